//! Closed-form generalization bounds driven by ensemble robustness.
//!
//! `K` (the number of partition cells) is never measured; it is a modeling
//! knob supplied by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Training-set size.
    pub n: u64,
    /// Loss bound `M`.
    pub m: f64,
    /// Confidence parameter `δ ∈ (0, 1)`.
    pub delta: f64,
    /// Ensemble robustness `ε̄(n)`.
    pub epsilon_bar: f64,
    /// Partition cardinality `K`.
    pub k: u64,
    /// Variance of the per-run robustness `α`.
    pub alpha: f64,
    /// Dropout sensitivity `β`.
    pub beta: f64,
    /// Number of dropout-randomized layers `L`.
    pub layers: u64,
}

impl BoundInputs {
    /// Remaining fields default to `K = 1`, `α = β = 0`, `L = 1`.
    pub fn new(n: u64, m: f64, delta: f64, epsilon_bar: f64) -> Self {
        BoundInputs {
            n,
            m,
            delta,
            epsilon_bar,
            k: 1,
            alpha: 0.0,
            beta: 0.0,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::Domain(what.to_string()));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(&format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.n == 0 {
            return fail("n must be at least 1");
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return fail(&format!("M must be positive, got {}", self.m));
        }
        if !(self.epsilon_bar.is_finite() && self.epsilon_bar >= 0.0) {
            return fail(&format!(
                "epsilon_bar must be non-negative, got {}",
                self.epsilon_bar
            ));
        }
        if self.k == 0 {
            return fail("K must be at least 1");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(&format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(&format!("beta must be non-negative, got {}", self.beta));
        }
        if self.layers == 0 {
            return fail("L must be at least 1");
        }
        Ok(())
    }

    /// `sqrt((2K ln 2 + 2 ln(c/δ)) / n)`.
    fn partition_term(&self, c: f64) -> f64 {
        ((2.0 * self.k as f64 * std::f64::consts::LN_2 + 2.0 * (c / self.delta).ln())
            / self.n as f64)
            .sqrt()
    }
}

/// `|L(h) − ℓ_emp(h)| ≤ sqrt((n M ε̄ + 2 M²) / (δ n))`.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let n = inputs.n as f64;
    let m = inputs.m;
    Ok(((n * m * inputs.epsilon_bar + 2.0 * m * m) / (inputs.delta * n)).sqrt())
}

/// Expected risk bounded by the mean adversarial loss plus the
/// [`theorem1_bound`] term.
pub fn corollary1_risk_bound(adv_empirical_mean: f64, inputs: &BoundInputs) -> Result<f64> {
    if !(0.0..=inputs.m).contains(&adv_empirical_mean) {
        return Err(Error::Domain(format!(
            "adversarial empirical loss {adv_empirical_mean} outside [0, M]"
        )));
    }
    Ok(adv_empirical_mean + theorem1_bound(inputs)?)
}

/// `ε̄ + α / sqrt(2δ) + M sqrt((2K ln 2 + 2 ln(1/δ)) / n)`.
pub fn theorem2_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(inputs.epsilon_bar
        + inputs.alpha / (2.0 * inputs.delta).sqrt()
        + inputs.m * inputs.partition_term(1.0))
}

/// `ε̄ + M sqrt((2K ln 2 + 2 ln(1/δ)) / n)`; [`theorem2_bound`] at `α = 0`.
pub fn lemma1_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(inputs.epsilon_bar + inputs.m * inputs.partition_term(1.0))
}

/// Which middle term of the dropout bound to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutForm {
    /// `sqrt(2 ln(1/δ) / L)`.
    Stated,
    /// `β sqrt(2 L ln(1/δ))`, requires `β ≤ L^(-3/4)`.
    Proof,
}

impl std::str::FromStr for DropoutForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stated" => Ok(DropoutForm::Stated),
            "proof" => Ok(DropoutForm::Proof),
            other => Err(Error::Config(format!(
                "unknown dropout bound form {other:?}"
            ))),
        }
    }
}

/// `ε̄ + middle + sqrt((2K ln 2 + 2 ln(2/δ)) / n)` for an `L`-layer network
/// trained with dropout.
pub fn dropout_bound(inputs: &BoundInputs, form: DropoutForm) -> Result<f64> {
    inputs.validate()?;
    let l = inputs.layers as f64;
    let log_inv_delta = (1.0 / inputs.delta).ln();
    let middle = match form {
        DropoutForm::Stated => (2.0 * log_inv_delta / l).sqrt(),
        DropoutForm::Proof => {
            let cap = l.powf(-0.75);
            if inputs.beta > cap {
                return Err(Error::Precondition(format!(
                    "dropout sensitivity beta = {} exceeds L^(-3/4) = {cap}",
                    inputs.beta
                )));
            }
            inputs.beta * (2.0 * l * log_inv_delta).sqrt()
        }
    };
    Ok(inputs.epsilon_bar + middle + inputs.partition_term(2.0))
}
