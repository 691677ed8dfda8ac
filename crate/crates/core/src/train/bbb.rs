//! Bayes-by-backprop with a factorized Gaussian posterior and a single
//! zero-mean Gaussian prior.
//!
//! Each parameter carries a mean `μ` and a scale `σ = ln(1 + e^ρ)`. A step
//! draws one weight realization `w = μ + σ ε` and descends
//! `mean batch loss + kl_weight · KL(q ‖ p)` through the reparameterization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check_data, training_rng, Hypothesis, TrainConfig};
use crate::data::{minibatches_with, Dataset};
use crate::error::{Error, Result};
use crate::nn::{backward_accumulate, init_mlp, BoundedLoss, MlpModel, Params};

/// Below this `ρ` the posterior scale is considered to have underflowed.
pub const RHO_FLOOR: f64 = -50.0;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `KL(N(μ, σ²) ‖ N(0, prior²))` for one parameter.
pub fn kl_divergence(mu: f64, sigma: f64, prior_sigma: f64) -> f64 {
    (prior_sigma / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * prior_sigma * prior_sigma) - 0.5
}

/// `(∂KL/∂μ, ∂KL/∂ρ)` with `σ = softplus(ρ)`.
pub fn kl_gradient(mu: f64, rho: f64, prior_sigma: f64) -> (f64, f64) {
    let sigma = softplus(rho);
    let p2 = prior_sigma * prior_sigma;
    let d_sigma = -1.0 / sigma + sigma / p2;
    (mu / p2, d_sigma * sigmoid(rho))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior {
    pub layer_dims: Vec<usize>,
    pub mu: Params,
    pub rho: Params,
    pub prior_sigma: f64,
    /// Configuration digest stamped onto sampled hypotheses.
    pub origin_hash: String,
}

impl WeightPosterior {
    /// Means taken from `model`, every scale at `softplus(init_rho)`.
    pub fn from_model(model: &MlpModel, init_rho: f64, prior_sigma: f64) -> Self {
        let mu = model.params().clone();
        let mut rho = mu.zeros_like();
        rho.iter_mut().for_each(|r| *r = init_rho);
        WeightPosterior {
            layer_dims: model.layer_dims().to_vec(),
            mu,
            rho,
            prior_sigma,
            origin_hash: "untracked".into(),
        }
    }

    pub fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.rho.iter().map(|&r| softplus(r))
    }

    /// Summed KL divergence to the prior.
    pub fn kl(&self) -> f64 {
        self.mu
            .iter()
            .zip(self.sigmas())
            .map(|(&m, s)| kl_divergence(m, s, self.prior_sigma))
            .sum()
    }

    fn realize(&self, eps: &Params) -> Result<MlpModel> {
        let mut w = self.mu.clone();
        for ((wv, &r), &e) in w.iter_mut().zip(self.rho.iter()).zip(eps.iter()) {
            *wv += softplus(r) * e;
        }
        MlpModel::from_params(self.layer_dims.clone(), w)
    }
}

fn standard_normal_like<R: Rng + ?Sized>(shape: &Params, rng: &mut R) -> Params {
    let mut eps = shape.zeros_like();
    eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
    eps
}

/// One stochastic-gradient step on the variational objective. Returns the
/// mean data loss of the batch under the sampled weights.
#[allow(clippy::too_many_arguments)]
pub fn bbb_step<R: Rng + ?Sized>(
    posterior: &mut WeightPosterior,
    data: &Dataset,
    batch: &[usize],
    kl_weight: f64,
    lr: f64,
    bound: BoundedLoss,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty minibatch".into()));
    }
    if let Some(r) = posterior.rho.iter().find(|&&r| r.is_nan() || r < RHO_FLOOR) {
        return Err(Error::Numeric(format!(
            "posterior scale underflow (rho = {r})"
        )));
    }
    let eps = standard_normal_like(&posterior.mu, rng);
    let model = posterior.realize(&eps)?;

    let mut g = posterior.mu.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let (l, _) = backward_accumulate(
            &model,
            data.row(i),
            data.label(i),
            bound,
            None,
            Some((&mut g, scale)),
        )?;
        loss += l * scale;
    }

    let prior = posterior.prior_sigma;
    for (((mu, rho), &gw), &e) in posterior
        .mu
        .iter_mut()
        .zip(posterior.rho.iter_mut())
        .zip(g.iter())
        .zip(eps.iter())
    {
        let (kl_mu, kl_rho) = kl_gradient(*mu, *rho, prior);
        let d_mu = gw + kl_weight * kl_mu;
        let d_rho = gw * e * sigmoid(*rho) + kl_weight * kl_rho;
        *mu -= lr * d_mu;
        *rho -= lr * d_rho;
    }
    if !(posterior.mu.is_finite() && posterior.rho.is_finite()) {
        return Err(Error::Numeric("non-finite posterior parameter".into()));
    }
    Ok(loss)
}

/// One weight realization, deterministic in `seed`.
pub fn sample_bbb_hypothesis(posterior: &WeightPosterior, seed: u64) -> Result<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let eps = standard_normal_like(&posterior.mu, &mut rng);
    Ok(Hypothesis {
        model: posterior.realize(&eps)?,
        config_hash: posterior.origin_hash.clone(),
        seed,
        train_loss_curve: Vec::new(),
    })
}

pub(super) fn train_posterior(
    config: &TrainConfig,
    data: &Dataset,
) -> Result<(WeightPosterior, Vec<f64>)> {
    check_data(config, data)?;
    let bound = config.bound()?;
    let init = init_mlp(&config.layer_dims, config.seed, config.init_scale)?;
    let mut posterior =
        WeightPosterior::from_model(&init, config.bbb.init_rho, config.bbb.prior_sigma);
    posterior.origin_hash = config.config_hash();
    let mut rng = training_rng(config.seed);
    let mut lr = config.lr;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = minibatches_with(data.len(), config.batch_size, &mut rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let mean = bbb_step(
                &mut posterior,
                data,
                batch,
                config.bbb.kl_weight,
                lr,
                bound,
                &mut rng,
            )
            .map_err(|e| match e {
                Error::Numeric(reason) => Error::TrainingDiverged { epoch, reason },
                other => other,
            })?;
            total += mean * batch.len() as f64;
        }
        curve.push(total / data.len() as f64);
        lr *= config.lr_decay;
    }
    Ok((posterior, curve))
}
