//! Laplace noise, per-group dummy counts and feature-level budget composition.

use rand::Rng;

use crate::{Error, Result};

/// Sensitivity of the bin-count query: one record moves one count by one.
pub const DEFAULT_SENSITIVITY: f64 = 1.0;

/// Per-group budgets `eps_g` and their harmonic composition.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyBudget {
    per_group_eps: Vec<f64>,
    sensitivity: f64,
    overall_eps: f64,
}

impl PrivacyBudget {
    pub fn new(per_group_eps: Vec<f64>, sensitivity: f64) -> Result<Self> {
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(Error::Domain(format!("sensitivity must be positive, got {sensitivity}")));
        }
        let overall_eps = compose_budget(&per_group_eps)?;
        Ok(PrivacyBudget { per_group_eps, sensitivity, overall_eps })
    }

    /// `groups` equal budgets `G * overall`, which compose back to `overall`.
    pub fn uniform(overall: f64, groups: usize, sensitivity: f64) -> Result<Self> {
        if !(overall > 0.0) {
            return Err(Error::Domain(format!("overall budget must be positive, got {overall}")));
        }
        PrivacyBudget::new(vec![groups as f64 * overall; groups], sensitivity)
    }

    pub fn per_group_eps(&self) -> &[f64] {
        &self.per_group_eps
    }

    pub fn eps(&self, group_index: usize) -> f64 {
        self.per_group_eps[group_index]
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn overall_eps(&self) -> f64 {
        self.overall_eps
    }

    pub fn groups(&self) -> usize {
        self.per_group_eps.len()
    }

    pub fn scale(&self, group_index: usize) -> LaplaceScale {
        LaplaceScale::new(self.sensitivity / self.per_group_eps[group_index]).expect("validated budget")
    }
}

/// Laplace scale `sigma = delta_b / eps`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LaplaceScale(f64);

impl LaplaceScale {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(LaplaceScale(sigma))
        } else {
            Err(Error::Domain(format!("Laplace scale must be positive and finite, got {sigma}")))
        }
    }

    pub fn from_budget(eps: f64, delta_b: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Domain(format!("privacy budget must be positive, got {eps}")));
        }
        LaplaceScale::new(delta_b / eps)
    }

    pub fn sigma(self) -> f64 {
        self.0
    }
}

/// One draw from the density `exp(-|x|/sigma) / (2 sigma)` by inversion.
pub fn laplace_sample<R: Rng + ?Sized>(scale: LaplaceScale, rng: &mut R) -> f64 {
    // u in (-1/2, 1/2) keeps the log argument strictly positive.
    let u = loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            break v - 0.5;
        }
    };
    let mag = -(1.0 - 2.0 * u.abs()).ln();
    scale.0 * mag * u.signum()
}

/// Expected dummies per (bin, group): `E[max(X, 0)] = sigma / 2 = delta_b / (2 eps)`.
pub fn expected_dummies(eps_g: f64, delta_b: f64) -> Result<f64> {
    if !(eps_g > 0.0) {
        return Err(Error::Domain(format!("privacy budget must be positive, got {eps_g}")));
    }
    Ok(delta_b / (2.0 * eps_g))
}

/// `(sum_g 1/eps_g)^-1`.
pub fn compose_budget(eps: &[f64]) -> Result<f64> {
    if eps.is_empty() {
        return Err(Error::Domain("cannot compose an empty budget list".into()));
    }
    if let Some(bad) = eps.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::Domain(format!("per-group budget must be positive and finite, got {bad}")));
    }
    Ok(1.0 / eps.iter().map(|e| 1.0 / e).sum::<f64>())
}

/// Discretises a Laplace draw: round half away from zero, then clamp at 0
/// (no records are ever deleted).
pub fn discretize(draw: f64) -> u64 {
    let r = draw.round();
    if r <= 0.0 {
        0
    } else {
        r as u64
    }
}

/// Dummy count for one (bin, group) before the bin-size clamp.
pub fn dummy_count_draw<R: Rng + ?Sized>(eps_g: f64, delta_b: f64, rng: &mut R) -> Result<u64> {
    let scale = LaplaceScale::from_budget(eps_g, delta_b)?;
    Ok(discretize(laplace_sample(scale, rng)))
}

/// Exact `E[max(round(X), 0)]` for `X ~ Laplace(sigma)` with half-away rounding:
/// `sum_{k>=1} P(X >= k - 1/2) = e^{1/(2 sigma)} / (2 (e^{1/sigma} - 1))`.
pub fn expected_discrete_dummies(sigma: f64) -> f64 {
    0.5 * (0.5 / sigma).exp() / (1.0 / sigma).exp_m1()
}
