//! Empirical ensemble robustness.
//!
//! Each training sample `s_i` is pushed to `s_i + Δs_i`, where `Δs_i`
//! maximizes the first-order surrogate `ℓ(s_i) + <∇ℓ(s_i), Δs>` over a norm
//! ball of radius `r`. A hypothesis scores the largest loss change over the
//! training set, and an ensemble scores the mean of its members' scores:
//!
//! ```text
//! ε̄_emp = (1/T) Σ_t max_i |ℓ(h_t, s_i) − ℓ(h_t, s_i + Δs_i)|
//! ```
//!
//! `Δs_i` is recomputed for every member from that member's own gradient.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{bounded_cross_entropy, forward, input_gradient, BoundedLoss, MlpModel};
use crate::train::Hypothesis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// The norm whose value is the maximum of `<g, ·>` over this norm's
    /// unit ball.
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::Linf,
            Norm::L2 => Norm::L2,
            Norm::Linf => Norm::L1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "l-inf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::Config(format!(
                "unknown norm {other:?} (expected l1, l2 or linf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub norm: Norm,
    pub radius: f64,
    /// Clamp `s + Δs` back into `[0, 1]^d` after solving.
    pub clamp_to_unit_box: bool,
}

impl PerturbationSpec {
    pub fn new(norm: Norm, radius: f64) -> Result<Self> {
        let spec = PerturbationSpec {
            norm,
            radius,
            clamp_to_unit_box: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius.is_finite() && self.radius >= 0.0) {
            return Err(Error::Config(format!(
                "perturbation radius must be finite and non-negative, got {}",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Exact maximizer of `<g, Δ>` over `{‖Δ‖ ≤ r}`. A zero gradient yields
/// `Δ = 0`; ℓ1 ties go to the lowest coordinate.
pub fn solve_linearized(gradient: &[f64], norm: Norm, radius: f64) -> Result<Vec<f64>> {
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    let mut delta = vec![0.0; gradient.len()];
    match norm {
        Norm::Linf => {
            for (d, &g) in delta.iter_mut().zip(gradient) {
                if g != 0.0 {
                    *d = radius * g.signum();
                }
            }
        }
        Norm::L2 => {
            let len = Norm::L2.of(gradient);
            if len > 0.0 {
                for (d, &g) in delta.iter_mut().zip(gradient) {
                    *d = radius * g / len;
                }
            }
        }
        Norm::L1 => {
            let mut best = 0;
            for (j, g) in gradient.iter().enumerate() {
                if g.abs() > gradient[best].abs() {
                    best = j;
                }
            }
            if let Some(&g) = gradient.get(best) {
                if g != 0.0 {
                    delta[best] = radius * g.signum();
                }
            }
        }
    }
    Ok(delta)
}

fn clamp_into_box(sample: &[f64], delta: &mut [f64]) {
    for (d, &s) in delta.iter_mut().zip(sample) {
        *d = (s + *d).clamp(0.0, 1.0) - s;
    }
}

/// Linearized adversarial perturbation of one sample.
pub fn adversarial_perturbation(
    model: &MlpModel,
    sample: &[f64],
    label: usize,
    spec: PerturbationSpec,
    bound: BoundedLoss,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let (_, grad) = input_gradient(model, sample, label, bound)?;
    let mut delta = solve_linearized(&grad, spec.norm, spec.radius)?;
    if spec.clamp_to_unit_box {
        clamp_into_box(sample, &mut delta);
    }
    Ok(delta)
}

fn loss_at(model: &MlpModel, x: &[f64], label: usize, bound: BoundedLoss) -> Result<f64> {
    bounded_cross_entropy(&forward(model, x, None)?, label, bound)
}

fn shifted(sample: &[f64], delta: &[f64]) -> Vec<f64> {
    sample.iter().zip(delta).map(|(s, d)| s + d).collect()
}

/// `|ℓ(s) − ℓ(s + Δs)|` for the solver's `Δs`.
pub fn sample_deviation(
    model: &MlpModel,
    sample: &[f64],
    label: usize,
    spec: PerturbationSpec,
    bound: BoundedLoss,
) -> Result<f64> {
    if spec.radius == 0.0 {
        return Ok(0.0);
    }
    let (clean, grad) = input_gradient(model, sample, label, bound)?;
    let mut delta = solve_linearized(&grad, spec.norm, spec.radius)?;
    if spec.clamp_to_unit_box {
        clamp_into_box(sample, &mut delta);
    }
    let perturbed = loss_at(model, &shifted(sample, &delta), label, bound)?;
    Ok((clean - perturbed).abs())
}

/// Largest per-sample deviation of one model over a dataset.
pub fn model_max_deviation(
    model: &MlpModel,
    data: &Dataset,
    spec: PerturbationSpec,
    bound: BoundedLoss,
) -> Result<f64> {
    spec.validate()?;
    if data.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "dataset dimension {} does not match model input {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let devs = (0..data.len())
        .into_par_iter()
        .map(|i| sample_deviation(model, data.row(i), data.label(i), spec, bound))
        .collect::<Result<Vec<f64>>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

pub fn per_hypothesis_max_deviation(
    h: &Hypothesis,
    data: &Dataset,
    spec: PerturbationSpec,
    bound: BoundedLoss,
) -> Result<f64> {
    model_max_deviation(&h.model, data, spec, bound)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEstimate {
    pub epsilon_bar_emp: f64,
    pub per_run_max: Vec<f64>,
    /// Unbiased sample variance of `per_run_max`; zero for a single run.
    pub variance_alpha: f64,
    pub t: usize,
    pub spec: PerturbationSpec,
}

impl RobustnessEstimate {
    pub fn from_per_run_max(per_run_max: Vec<f64>, spec: PerturbationSpec) -> Result<Self> {
        let t = per_run_max.len();
        if t == 0 {
            return Err(Error::Protocol("empty ensemble".into()));
        }
        let mean = per_run_max.iter().sum::<f64>() / t as f64;
        let variance_alpha = if t > 1 {
            per_run_max.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1) as f64
        } else {
            0.0
        };
        Ok(RobustnessEstimate {
            epsilon_bar_emp: mean,
            per_run_max,
            variance_alpha,
            t,
            spec,
        })
    }
}

pub(crate) fn check_shared_config(ensemble: &[Hypothesis]) -> Result<()> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::Protocol("empty ensemble".into()))?;
    if let Some(other) = ensemble.iter().find(|h| h.config_hash != first.config_hash) {
        return Err(Error::Protocol(format!(
            "ensemble mixes configurations {} and {}",
            first.config_hash, other.config_hash
        )));
    }
    Ok(())
}

/// ε̄_emp over an ensemble of hypotheses drawn from one configuration.
pub fn empirical_ensemble_robustness(
    ensemble: &[Hypothesis],
    data: &Dataset,
    spec: PerturbationSpec,
    bound: BoundedLoss,
) -> Result<RobustnessEstimate> {
    check_shared_config(ensemble)?;
    let per_run = ensemble
        .par_iter()
        .map(|h| per_hypothesis_max_deviation(h, data, spec, bound))
        .collect::<Result<Vec<f64>>>()?;
    RobustnessEstimate::from_per_run_max(per_run, spec)
}

/// ε̄_emp at each radius in `radii` (ascending, non-negative).
pub fn deviation_profile(
    ensemble: &[Hypothesis],
    data: &Dataset,
    radii: &[f64],
    norm: Norm,
    bound: BoundedLoss,
) -> Result<Vec<(f64, RobustnessEstimate)>> {
    if radii.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("profile radii must be ascending".into()));
    }
    radii
        .iter()
        .map(|&r| {
            let spec = PerturbationSpec::new(norm, r)?;
            Ok((
                r,
                empirical_ensemble_robustness(ensemble, data, spec, bound)?,
            ))
        })
        .collect()
}

pub const ORACLE_MAX_DIM: usize = 4;

/// Exhaustive grid search of `|ℓ(s) − ℓ(s + Δ)|` over the norm ball, for
/// tiny inputs only. Candidates are the `grid_points^d` lattice on
/// `[-r, r]^d` restricted to the ball, the `±r e_j` vertices, the solver's
/// `Δs` and the gradient direction scaled onto the sphere. Returns a lower
/// bound on the true maximum deviation.
pub fn brute_force_deviation_oracle(
    model: &MlpModel,
    sample: &[f64],
    label: usize,
    spec: PerturbationSpec,
    grid_points: usize,
    bound: BoundedLoss,
) -> Result<f64> {
    spec.validate()?;
    let d = sample.len();
    if d > ORACLE_MAX_DIM {
        return Err(Error::OracleScope(format!(
            "brute force handles at most {ORACLE_MAX_DIM} dimensions, got {d}"
        )));
    }
    if grid_points < 3 {
        return Err(Error::Config(
            "oracle grid needs at least 3 points per axis".into(),
        ));
    }
    let r = spec.radius;
    if r == 0.0 {
        return Ok(0.0);
    }
    let (clean, grad) = input_gradient(model, sample, label, bound)?;

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    let step = 2.0 * r / (grid_points - 1) as f64;
    let tol = r * (1.0 + 1e-12);
    let mut idx = vec![0usize; d];
    loop {
        let delta: Vec<f64> = idx.iter().map(|&k| -r + step * k as f64).collect();
        if spec.norm.of(&delta) <= tol {
            candidates.push(delta);
        }
        let mut axis = 0;
        while axis < d {
            idx[axis] += 1;
            if idx[axis] < grid_points {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
        if axis == d {
            break;
        }
    }
    for j in 0..d {
        for sign in [-1.0, 1.0] {
            let mut e = vec![0.0; d];
            e[j] = sign * r;
            candidates.push(e);
        }
    }
    candidates.push(solve_linearized(&grad, spec.norm, r)?);
    let glen = spec.norm.of(&grad);
    if glen > 0.0 {
        candidates.push(grad.iter().map(|g| r * g / glen).collect());
    }

    let mut best: f64 = 0.0;
    for mut delta in candidates {
        if spec.clamp_to_unit_box {
            clamp_into_box(sample, &mut delta);
        }
        let loss = loss_at(model, &shifted(sample, &delta), label, bound)?;
        best = best.max((clean - loss).abs());
    }
    Ok(best)
}
