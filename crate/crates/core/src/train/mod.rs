//! Seeded stochastic trainers. Every algorithm maps `(config, data)` to a
//! single deterministic [`Hypothesis`]; varying the seed draws different
//! members of the algorithm's output distribution.

mod bbb;
mod prioritized;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{minibatches_with, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    backward_accumulate, bounded_cross_entropy, forward, init_mlp, sgd_step, BoundedLoss,
    DropoutState, MlpModel, Params, SgdParams,
};
use crate::robustness::{adversarial_perturbation, Norm, PerturbationSpec};

pub use bbb::{
    bbb_step, kl_divergence, kl_gradient, sample_bbb_hypothesis, softplus, WeightPosterior,
    RHO_FLOOR,
};
pub use prioritized::{prioritized_sample, PrioritizedDraw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    SgdDropout,
    Prioritized,
    PrioritizedDropout,
    AdversarialL1,
    AdversarialL2,
    AdversarialLinf,
    BayesByBackprop,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Sgd,
        Algorithm::SgdDropout,
        Algorithm::Prioritized,
        Algorithm::PrioritizedDropout,
        Algorithm::AdversarialL1,
        Algorithm::AdversarialL2,
        Algorithm::AdversarialLinf,
        Algorithm::BayesByBackprop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::SgdDropout => "sgd_dropout",
            Algorithm::Prioritized => "prioritized",
            Algorithm::PrioritizedDropout => "prioritized_dropout",
            Algorithm::AdversarialL1 => "adversarial_l1",
            Algorithm::AdversarialL2 => "adversarial_l2",
            Algorithm::AdversarialLinf => "adversarial_linf",
            Algorithm::BayesByBackprop => "bayes_by_backprop",
        }
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, Algorithm::SgdDropout | Algorithm::PrioritizedDropout)
    }

    pub fn is_prioritized(self) -> bool {
        matches!(self, Algorithm::Prioritized | Algorithm::PrioritizedDropout)
    }

    pub fn adversarial_norm(self) -> Option<Norm> {
        match self {
            Algorithm::AdversarialL1 => Some(Norm::L1),
            Algorithm::AdversarialL2 => Some(Norm::L2),
            Algorithm::AdversarialLinf => Some(Norm::Linf),
            _ => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BbbConfig {
    pub prior_sigma: f64,
    /// Initial softplus pre-image of every posterior scale.
    pub init_rho: f64,
    /// Multiplier on the summed KL term added to each mean batch loss.
    pub kl_weight: f64,
}

impl Default for BbbConfig {
    fn default() -> Self {
        BbbConfig {
            prior_sigma: 1.0,
            init_rho: -5.0,
            kl_weight: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub layer_dims: Vec<usize>,
    pub lr: f64,
    /// Multiplicative per-epoch learning-rate factor.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_scale: f64,
    pub dropout_rate: f64,
    /// Hidden layers (0-based) whose outputs are dropped.
    pub dropout_layers: Vec<usize>,
    pub adv_radius: f64,
    pub clamp_adversarial: bool,
    pub priority_exponent: f64,
    pub bbb: BbbConfig,
    /// Loss bound `M`.
    pub loss_bound: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: lr 0.01, momentum 0.9, weight decay 1e-6, batch 100.
    pub fn new(algorithm: Algorithm, layer_dims: Vec<usize>) -> Self {
        TrainConfig {
            algorithm,
            layer_dims,
            lr: 0.01,
            lr_decay: 1.0,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 100,
            epochs: 10,
            init_scale: 1.0,
            dropout_rate: 0.5,
            dropout_layers: vec![0],
            adv_radius: 0.1,
            clamp_adversarial: false,
            priority_exponent: 0.6,
            bbb: BbbConfig::default(),
            loss_bound: 100f64.ln(),
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn bound(&self) -> Result<BoundedLoss> {
        BoundedLoss::new(self.loss_bound)
    }

    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::InvalidArchitecture(format!("{:?}", self.layer_dims)));
        }
        self.sgd().validate()?;
        self.bound()?;
        let finite = [
            self.lr_decay,
            self.init_scale,
            self.dropout_rate,
            self.adv_radius,
            self.priority_exponent,
            self.bbb.prior_sigma,
            self.bbb.init_rho,
            self.bbb.kl_weight,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite numeric field".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_decay <= 0.0 || self.init_scale <= 0.0 {
            return Err(Error::Config(
                "lr_decay and init_scale must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.algorithm.uses_dropout() {
            if self.dropout_rate <= 0.0 {
                return Err(Error::Config(format!(
                    "{} needs dropout_rate > 0",
                    self.algorithm
                )));
            }
            let hidden = self.layer_dims.len() - 2;
            if hidden == 0 {
                return Err(Error::Config(format!(
                    "{} needs at least one hidden layer",
                    self.algorithm
                )));
            }
            if let Some(l) = self.dropout_layers.iter().find(|&&l| l >= hidden) {
                return Err(Error::Config(format!(
                    "dropout layer {l} out of range for {hidden} hidden layers"
                )));
            }
        }
        if self.adv_radius < 0.0 {
            return Err(Error::Config("adv_radius must be non-negative".into()));
        }
        if self.algorithm.adversarial_norm().is_some() && self.adv_radius <= 0.0 {
            return Err(Error::Config(format!(
                "{} needs adv_radius > 0",
                self.algorithm
            )));
        }
        if self.priority_exponent < 0.0 {
            return Err(Error::Config(
                "priority_exponent must be non-negative".into(),
            ));
        }
        if self.bbb.prior_sigma <= 0.0 || self.bbb.kl_weight < 0.0 {
            return Err(Error::Config(
                "bbb.prior_sigma must be positive and bbb.kl_weight non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Hex digest of the configuration with the seed zeroed, shared by all
    /// members of one ensemble.
    pub fn config_hash(&self) -> String {
        let unseeded = self.with_seed(0);
        let json = serde_json::to_vec(&unseeded).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// A trained model together with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub model: MlpModel,
    pub config_hash: String,
    pub seed: u64,
    /// Mean bounded training loss of each epoch.
    pub train_loss_curve: Vec<f64>,
}

/// Training randomness stream, distinct from the initialization stream of
/// the same seed.
pub(crate) fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// How one minibatch is turned into a gradient.
#[derive(Debug, Clone, Copy)]
struct BatchPlan<'a> {
    bound: BoundedLoss,
    dropout: Option<(f64, &'a [usize])>,
    perturbation: Option<PerturbationSpec>,
}

/// Accumulates the (importance-weighted) mean batch gradient, takes one
/// momentum step and returns the summed per-sample loss.
#[allow(clippy::too_many_arguments)]
fn batch_step<R: Rng + ?Sized>(
    model: &mut MlpModel,
    data: &Dataset,
    batch: &[usize],
    weights: Option<&[f64]>,
    plan: BatchPlan<'_>,
    opt: SgdParams,
    velocity: &mut Params,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty minibatch".into()));
    }
    let mut grads = model.params().zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for (k, &i) in batch.iter().enumerate() {
        let (x, y) = (data.row(i), data.label(i));
        let dropout = match plan.dropout {
            Some((rate, layers)) => Some(DropoutState::sample_with(
                rate,
                model.hidden_widths(),
                layers,
                rng,
            )?),
            None => None,
        };
        let perturbed;
        let input = match plan.perturbation {
            Some(spec) if spec.radius > 0.0 => {
                let delta = adversarial_perturbation(model, x, y, spec, plan.bound)?;
                perturbed = x.iter().zip(&delta).map(|(a, b)| a + b).collect::<Vec<_>>();
                &perturbed[..]
            }
            _ => x,
        };
        let w = weights.map_or(1.0, |w| w[k]);
        let (loss, _) = backward_accumulate(
            model,
            input,
            y,
            plan.bound,
            dropout.as_ref(),
            Some((&mut grads, w * scale)),
        )?;
        loss_sum += loss;
    }
    sgd_step(model, &grads, opt, velocity)?;
    Ok(loss_sum)
}

/// One plain minibatch SGD update.
pub fn sgd_batch_step(
    model: &mut MlpModel,
    data: &Dataset,
    batch: &[usize],
    bound: BoundedLoss,
    opt: SgdParams,
    velocity: &mut Params,
) -> Result<f64> {
    let plan = BatchPlan {
        bound,
        dropout: None,
        perturbation: None,
    };
    let mut unused = training_rng(0);
    batch_step(model, data, batch, None, plan, opt, velocity, &mut unused)
}

/// One adversarial-training update: every sample in the batch is replaced
/// by its linearized worst case inside the `spec` ball before the gradient
/// is taken. A zero radius reproduces [`sgd_batch_step`] exactly.
pub fn adversarial_training_step(
    model: &mut MlpModel,
    data: &Dataset,
    batch: &[usize],
    spec: PerturbationSpec,
    bound: BoundedLoss,
    opt: SgdParams,
    velocity: &mut Params,
) -> Result<f64> {
    spec.validate()?;
    let plan = BatchPlan {
        bound,
        dropout: None,
        perturbation: Some(spec),
    };
    let mut unused = training_rng(0);
    batch_step(model, data, batch, None, plan, opt, velocity, &mut unused)
}

fn check_data(config: &TrainConfig, data: &Dataset) -> Result<()> {
    let dims = &config.layer_dims;
    if data.dim() != dims[0] || data.class_count() != dims[dims.len() - 1] {
        return Err(Error::Shape(format!(
            "data is {}-dimensional with {} classes, architecture is {:?}",
            data.dim(),
            data.class_count(),
            dims
        )));
    }
    Ok(())
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(reason) => Error::TrainingDiverged { epoch, reason },
        other => other,
    }
}

/// Mean bounded loss per sample, without dropout.
pub(crate) fn per_sample_losses(
    model: &MlpModel,
    data: &Dataset,
    bound: BoundedLoss,
) -> Result<Vec<f64>> {
    data.iter()
        .map(|(x, y)| bounded_cross_entropy(&forward(model, x, None)?, y, bound))
        .collect()
}

fn train_seeded(config: &TrainConfig, data: &Dataset) -> Result<Hypothesis> {
    let bound = config.bound()?;
    let mut model = init_mlp(&config.layer_dims, config.seed, config.init_scale)?;
    let mut velocity = model.params().zeros_like();
    let mut rng = training_rng(config.seed);
    let plan = BatchPlan {
        bound,
        dropout: config
            .algorithm
            .uses_dropout()
            .then_some((config.dropout_rate, &config.dropout_layers[..])),
        perturbation: config
            .algorithm
            .adversarial_norm()
            .map(|norm| PerturbationSpec {
                norm,
                radius: config.adv_radius,
                clamp_to_unit_box: config.clamp_adversarial,
            }),
    };
    let n = data.len();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut opt = config.sgd();
    for epoch in 0..config.epochs {
        let on_err = diverged(epoch);
        let (order, weights) = if config.algorithm.is_prioritized() {
            let losses = per_sample_losses(&model, data, bound).map_err(&on_err)?;
            let draw = prioritized_sample(
                &losses,
                config.priority_exponent,
                n,
                1e-3 * bound.max(),
                &mut rng,
            );
            (draw.indices, Some(draw.weights))
        } else {
            let order: Vec<usize> = minibatches_with(n, n, &mut rng)?.concat();
            (order, None)
        };
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let w = weights
                .as_ref()
                .map(|w| &w[b * config.batch_size..b * config.batch_size + batch.len()]);
            total += batch_step(
                &mut model,
                data,
                batch,
                w,
                plan,
                opt,
                &mut velocity,
                &mut rng,
            )
            .map_err(&on_err)?;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                reason: "non-finite training loss".into(),
            });
        }
        curve.push(mean);
        opt.lr *= config.lr_decay;
    }
    Ok(Hypothesis {
        model,
        config_hash: config.config_hash(),
        seed: config.seed,
        train_loss_curve: curve,
    })
}

/// Train one member with `config.seed`. For Bayes-by-backprop the returned
/// model is one weight realization sampled from the trained posterior.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<Hypothesis> {
    config.validate()?;
    check_data(config, data)?;
    match config.algorithm {
        Algorithm::BayesByBackprop => {
            let (posterior, curve) = bbb::train_posterior(config, data)?;
            let mut h = sample_bbb_hypothesis(&posterior, config.seed)?;
            h.train_loss_curve = curve;
            Ok(h)
        }
        _ => train_seeded(config, data),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// `t` members with seeds `base_seed + k`. Bayes-by-backprop trains one
/// posterior with `base_seed` and samples every member from it.
pub fn train_ensemble(
    config: &TrainConfig,
    data: &Dataset,
    t: usize,
    base_seed: u64,
) -> Result<Vec<Hypothesis>> {
    train_ensemble_with(config, data, t, base_seed, Execution::Parallel)
}

pub fn train_ensemble_with(
    config: &TrainConfig,
    data: &Dataset,
    t: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<Hypothesis>> {
    if t == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    config.validate()?;
    check_data(config, data)?;
    let seeds: Vec<u64> = (0..t as u64).map(|k| base_seed.wrapping_add(k)).collect();
    let tag = |member: usize| {
        move |e: Error| Error::Member {
            member,
            source: Box::new(e),
        }
    };

    if config.algorithm == Algorithm::BayesByBackprop {
        let (posterior, curve) =
            bbb::train_posterior(&config.with_seed(base_seed), data).map_err(tag(0))?;
        return seeds
            .iter()
            .enumerate()
            .map(|(k, &seed)| {
                let mut h = sample_bbb_hypothesis(&posterior, seed).map_err(tag(k))?;
                h.train_loss_curve = curve.clone();
                Ok(h)
            })
            .collect();
    }

    let member =
        |(k, &seed): (usize, &u64)| train_seeded(&config.with_seed(seed), data).map_err(tag(k));
    match exec {
        Execution::Serial => seeds.iter().enumerate().map(member).collect(),
        Execution::Parallel => seeds.par_iter().enumerate().map(member).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};

    fn blobs() -> Dataset {
        synthetic_blobs(BlobSpec {
            n: 60,
            dim: 3,
            classes: 3,
            separation: 0.3,
            noise: 0.05,
            seed: 2,
        })
        .unwrap()
    }

    fn config(alg: Algorithm) -> TrainConfig {
        let mut c = TrainConfig::new(alg, vec![3, 8, 3]);
        c.epochs = 3;
        c.batch_size = 16;
        c.lr = 0.05;
        c
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut c = config(Algorithm::Sgd);
        c.epochs = 0;
        c.seed = 4;
        let h = train(&c, &blobs()).unwrap();
        assert!(h.train_loss_curve.is_empty());
        assert_eq!(h.model, init_mlp(&[3, 8, 3], 4, 1.0).unwrap());
    }

    #[test]
    fn every_algorithm_is_seed_deterministic() {
        let data = blobs();
        for alg in Algorithm::ALL {
            let c = config(alg).with_seed(9);
            let a = train(&c, &data).unwrap();
            let b = train(&c, &data).unwrap();
            assert_eq!(a, b, "{alg}");
            assert_eq!(a.train_loss_curve.len(), 3);
            assert!(a.train_loss_curve.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = config(Algorithm::AdversarialL2);
        c.adv_radius = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = config(Algorithm::SgdDropout);
        c.dropout_rate = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = config(Algorithm::Sgd);
        c.lr = -1.0;
        assert!(c.validate().is_err());
        let mut c = config(Algorithm::Sgd);
        c.layer_dims = vec![4, 8, 3];
        assert!(matches!(train(&c, &blobs()), Err(Error::Shape(_))));
    }

    #[test]
    fn hash_ignores_seed_only() {
        let c = config(Algorithm::Sgd);
        assert_eq!(c.config_hash(), c.with_seed(77).config_hash());
        let mut d = c.clone();
        d.lr = 0.02;
        assert_ne!(c.config_hash(), d.config_hash());
    }

    #[test]
    fn divergence_names_the_epoch() {
        let mut c = config(Algorithm::Sgd);
        c.lr = 1e300;
        c.momentum = 0.0;
        c.init_scale = 1e5;
        match train(&c, &blobs()) {
            Err(Error::TrainingDiverged { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_members_differ_and_t1_matches_train() {
        let data = blobs();
        let c = config(Algorithm::SgdDropout);
        let ens = train_ensemble(&c, &data, 3, 100).unwrap();
        assert_eq!(ens.len(), 3);
        assert_ne!(ens[0].model, ens[1].model);
        assert_ne!(ens[1].model, ens[2].model);
        let single = train_ensemble(&c, &data, 1, 100).unwrap();
        assert_eq!(single[0], train(&c.with_seed(100), &data).unwrap());
        assert!(train_ensemble(&c, &data, 0, 0).is_err());
    }

    #[test]
    fn bbb_ensemble_samples_one_posterior() {
        let data = blobs();
        let c = config(Algorithm::BayesByBackprop);
        let ens = train_ensemble(&c, &data, 2, 5).unwrap();
        assert_ne!(ens[0].model, ens[1].model);
        assert_eq!(ens[0].config_hash, ens[1].config_hash);
        assert_eq!(ens[0].train_loss_curve, ens[1].train_loss_curve);
        assert_eq!(ens[0], train(&c.with_seed(5), &data).unwrap());
    }
}
