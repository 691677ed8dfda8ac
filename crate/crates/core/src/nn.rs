//! Dense feed-forward networks with hand-derived gradients.
//!
//! Hidden layers use the rectifier, the output layer is affine and the
//! softmax lives inside [`bounded_cross_entropy`]. Gradients are exact with
//! respect to both the parameters and the input sample; the input gradient
//! drives the adversarial perturbation solver in [`crate::robustness`].
//!
//! Weight matrix `l` is stored row-major with shape
//! `(layer_dims[l + 1], layer_dims[l])`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One tensor per layer for weights and one for biases. Shared by models,
/// gradients, momentum buffers and variational parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub type Gradients = Params;

impl Params {
    pub fn zeros(layer_dims: &[usize]) -> Self {
        let layers = layer_dims.len().saturating_sub(1);
        let weights = (0..layers)
            .map(|l| vec![0.0; layer_dims[l] * layer_dims[l + 1]])
            .collect();
        let biases = (0..layers).map(|l| vec![0.0; layer_dims[l + 1]]).collect();
        Params { weights, biases }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        fn lens(v: &[Vec<f64>]) -> impl Iterator<Item = usize> + '_ {
            v.iter().map(Vec::len)
        }
        self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
            && lens(&self.weights).eq(lens(&other.weights))
            && lens(&self.biases).eq(lens(&other.biases))
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights of every layer in order, then biases of every layer.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.biases.iter()).flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flatten()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    params: Params,
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidArchitecture(format!(
            "need at least input and output dimensions, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(Error::InvalidArchitecture(format!(
            "zero-width layer in {layer_dims:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    /// Build a model from explicit parameters, validating every shape.
    pub fn from_params(layer_dims: Vec<usize>, params: Params) -> Result<Self> {
        check_dims(&layer_dims)?;
        if !params.same_shape(&Params::zeros(&layer_dims)) {
            return Err(Error::Shape(format!(
                "parameters do not match architecture {layer_dims:?}"
            )));
        }
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(MlpModel { layer_dims, params })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Widths of the rectified hidden layers.
    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_dims[1..self.layer_dims.len() - 1]
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable access for callers that keep shapes intact (optimizers,
    /// hand-built fixtures).
    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        let logits = forward(self, input, None)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fan-based uniform initialization: layer `l` draws from
/// `[-s_l, s_l]` with `s_l = scale * sqrt(6 / (fan_in + fan_out))`. Biases
/// start at zero.
pub fn init_mlp(layer_dims: &[usize], seed: u64, scale: f64) -> Result<MlpModel> {
    check_dims(layer_dims)?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!(
            "init scale must be positive, got {scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::zeros(layer_dims);
    for (l, w) in params.weights.iter_mut().enumerate() {
        let limit = scale * (6.0 / (layer_dims[l] + layer_dims[l + 1]) as f64).sqrt();
        for v in w.iter_mut() {
            *v = rng.random_range(-limit..=limit);
        }
    }
    Ok(MlpModel {
        layer_dims: layer_dims.to_vec(),
        params,
    })
}

/// Cross-entropy with the true-class probability floored at `exp(-max)`,
/// so every loss value lies in `[0, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundedLoss {
    max: f64,
}

impl Default for BoundedLoss {
    fn default() -> Self {
        BoundedLoss { max: 100f64.ln() }
    }
}

impl BoundedLoss {
    pub fn new(max: f64) -> Result<Self> {
        if !(max.is_finite() && max > 0.0) {
            return Err(Error::Config(format!(
                "loss bound M must be positive, got {max}"
            )));
        }
        Ok(BoundedLoss { max })
    }

    /// The bound `M`.
    pub fn max(&self) -> f64 {
        self.max
    }

    /// Probability floor `exp(-M)`.
    pub fn p_min(&self) -> f64 {
        (-self.max).exp()
    }
}

/// Numerically stable `-ln softmax(logits)[label]`, unclamped.
fn negative_log_likelihood(logits: &[f64], label: usize) -> f64 {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - top).exp()).sum();
    top + sum.ln() - logits[label]
}

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

pub fn bounded_cross_entropy(logits: &[f64], label: usize, bound: BoundedLoss) -> Result<f64> {
    check_logits(logits, label)?;
    Ok(negative_log_likelihood(logits, label).clamp(0.0, bound.max))
}

/// Per-hidden-layer dropout masks. `None` leaves a layer untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutState {
    pub rate: f64,
    pub masks: Vec<Option<Vec<bool>>>,
    pub rng_seed: Option<u64>,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

impl DropoutState {
    /// Masks for the hidden layers listed in `layers`, drawn from `rng`.
    pub fn sample_with<R: Rng + ?Sized>(
        rate: f64,
        widths: &[usize],
        layers: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        check_rate(rate)?;
        let masks = widths
            .iter()
            .enumerate()
            .map(|(l, &width)| {
                layers
                    .contains(&l)
                    .then(|| (0..width).map(|_| rng.random::<f64>() >= rate).collect())
            })
            .collect();
        Ok(DropoutState {
            rate,
            masks,
            rng_seed: None,
        })
    }

    /// Inverted-dropout factor applied to kept units.
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    fn check(&self, model: &MlpModel) -> Result<()> {
        let widths = model.hidden_widths();
        if self.masks.len() != widths.len() {
            return Err(Error::Shape(format!(
                "{} dropout masks for {} hidden layers",
                self.masks.len(),
                widths.len()
            )));
        }
        for (l, (mask, &w)) in self.masks.iter().zip(widths).enumerate() {
            if let Some(m) = mask {
                if m.len() != w {
                    return Err(Error::Shape(format!(
                        "dropout mask {l} has length {}, layer width is {w}",
                        m.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Masks every hidden layer, each unit kept independently with
/// probability `1 - rate`.
pub fn sample_dropout_mask(rate: f64, widths: &[usize], seed: u64) -> Result<DropoutState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..widths.len()).collect();
    let mut state = DropoutState::sample_with(rate, widths, &all, &mut rng)?;
    state.rng_seed = Some(seed);
    Ok(state)
}

/// Cached activations of one forward pass.
struct Trace {
    /// `inputs[l]` is the (masked) input to layer `l`; `inputs[0]` is the sample.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn trace(model: &MlpModel, input: &[f64], dropout: Option<&DropoutState>) -> Result<Trace> {
    if input.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has length {}, model expects {}",
            input.len(),
            model.input_dim()
        )));
    }
    if let Some(d) = dropout {
        d.check(model)?;
    }
    let layers = model.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers - 1);
    let mut current = input.to_vec();
    for l in 0..layers - 1 {
        let z = affine(&model.params.weights[l], &model.params.biases[l], &current);
        let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
        if let Some(mask) = dropout.and_then(|d| d.masks[l].as_ref()) {
            let keep = dropout.map(DropoutState::keep_scale).unwrap_or(1.0);
            for (v, &m) in a.iter_mut().zip(mask) {
                *v = if m { *v * keep } else { 0.0 };
            }
        }
        inputs.push(std::mem::replace(&mut current, a));
        pre.push(z);
    }
    let logits = affine(
        &model.params.weights[layers - 1],
        &model.params.biases[layers - 1],
        &current,
    );
    inputs.push(current);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(Trace {
        inputs,
        pre,
        logits,
    })
}

pub fn forward(
    model: &MlpModel,
    input: &[f64],
    dropout: Option<&DropoutState>,
) -> Result<Vec<f64>> {
    trace(model, input, dropout).map(|t| t.logits)
}

/// Loss and input gradient of a single sample; parameter gradients are
/// added into `acc` scaled by `weight` when an accumulator is given.
pub(crate) fn backward_accumulate(
    model: &MlpModel,
    input: &[f64],
    label: usize,
    bound: BoundedLoss,
    dropout: Option<&DropoutState>,
    mut acc: Option<(&mut Params, f64)>,
) -> Result<(f64, Vec<f64>)> {
    let t = trace(model, input, dropout)?;
    check_logits(&t.logits, label)?;
    let nll = negative_log_likelihood(&t.logits, label);
    if nll > bound.max {
        // Clamped plateau: the loss is constant here.
        return Ok((bound.max, vec![0.0; input.len()]));
    }
    let loss = nll.max(0.0);

    let top = t.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t.logits.iter().map(|z| (z - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut delta: Vec<f64> = exps.iter().map(|e| e / total).collect();
    delta[label] -= 1.0;

    let keep = dropout.map(DropoutState::keep_scale).unwrap_or(1.0);
    for l in (0..model.num_layers()).rev() {
        let x = &t.inputs[l];
        let w = &model.params.weights[l];
        let cols = x.len();
        if let Some((grads, scale)) = acc.as_mut() {
            let gw = &mut grads.weights[l];
            for (r, &d) in delta.iter().enumerate() {
                let sd = *scale * d;
                for (g, &xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                    *g += sd * xv;
                }
            }
            for (g, &d) in grads.biases[l].iter_mut().zip(&delta) {
                *g += *scale * d;
            }
        }
        let mut upstream = vec![0.0; cols];
        for (r, &d) in delta.iter().enumerate() {
            for (u, &wv) in upstream.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *u += wv * d;
            }
        }
        if l == 0 {
            return Ok((loss, upstream));
        }
        let h = l - 1;
        let mask = dropout.and_then(|d| d.masks[h].as_ref());
        for (j, u) in upstream.iter_mut().enumerate() {
            let active = t.pre[h][j] > 0.0;
            *u = match mask {
                _ if !active => 0.0,
                Some(m) if !m[j] => 0.0,
                Some(_) => *u * keep,
                None => *u,
            };
        }
        delta = upstream;
    }
    unreachable!("loop returns at the input layer")
}

/// Result of [`backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub params: Gradients,
    pub input: Vec<f64>,
}

/// Exact gradients of `bounded_cross_entropy(forward(..))` with respect to
/// the parameters and the input sample. Both vanish on the clamped plateau.
pub fn backward(
    model: &MlpModel,
    input: &[f64],
    label: usize,
    bound: BoundedLoss,
    dropout: Option<&DropoutState>,
) -> Result<Backward> {
    let mut params = model.params.zeros_like();
    let (loss, input_grad) = backward_accumulate(
        model,
        input,
        label,
        bound,
        dropout,
        Some((&mut params, 1.0)),
    )?;
    Ok(Backward {
        loss,
        params,
        input: input_grad,
    })
}

/// Loss and `∇_s loss` only.
pub fn input_gradient(
    model: &MlpModel,
    input: &[f64],
    label: usize,
    bound: BoundedLoss,
) -> Result<(f64, Vec<f64>)> {
    backward_accumulate(model, input, label, bound, None, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum step: `v <- momentum * v - lr * (g + weight_decay * w)`,
/// then `w <- w + v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    opt: SgdParams,
    velocity: &mut Params,
) -> Result<()> {
    opt.validate()?;
    if !grads.same_shape(&model.params) || !velocity.same_shape(&model.params) {
        return Err(Error::Shape(
            "gradient or velocity shape does not match model".into(),
        ));
    }
    for ((w, &g), v) in model
        .params
        .iter_mut()
        .zip(grads.iter())
        .zip(velocity.iter_mut())
    {
        *v = opt.momentum * *v - opt.lr * (g + opt.weight_decay * *w);
        *w += *v;
    }
    if !model.params.is_finite() {
        return Err(Error::Numeric("non-finite parameter after update".into()));
    }
    Ok(())
}
