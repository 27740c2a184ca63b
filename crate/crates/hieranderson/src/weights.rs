//! Probability weights of the hierarchical Laplacian, the eigenvalue
//! partial sums `lambda_r`, exact tails `1 - lambda_kappa`, the spectral
//! dimension, and the rank-selection functions used by the tail bounds.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Absolute log-space slack used to resolve floating-point boundary ties
/// in the rank-selection functions.
const TIE_SLACK: f64 = 1e-12;

/// What to do with the probability mass left over by an explicit weight list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TailRule {
    /// Distribute the remainder geometrically with decay base `rho`.
    GeometricContinuation { rho: f64 },
    /// No continuation: the list must already sum to one.
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Geometric {
        rho: f64,
    },
    Explicit {
        p: Vec<f64>,
        /// Suffix sums of the list: `suffix[r]` = sum of `p_{r+1} ..= p_len`.
        suffix: Vec<f64>,
        /// Mass beyond the list, distributed geometrically.
        remainder: f64,
        rho: f64,
    },
}

/// The weight sequence `(p_s)` of the hierarchical Laplacian, with exact
/// partial sums and tails.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSequence {
    kind: Kind,
}

impl WeightSequence {
    /// Geometric weights `p_s = (rho - 1) rho^{-s}`, which sum to one in
    /// closed form and satisfy the algebraic-decay condition with
    /// `C_1 = C_2 = rho - 1`.
    pub fn geometric(rho: f64) -> Result<Self> {
        if !(rho > 1.0) || !rho.is_finite() {
            return Err(Error::Validation(format!(
                "geometric decay base rho = {rho} must be > 1"
            )));
        }
        Ok(Self {
            kind: Kind::Geometric { rho },
        })
    }

    /// Explicit list of weights for ranks `1..=len`, with the remaining
    /// mass handled according to `tail_rule`.
    pub fn explicit(p: Vec<f64>, tail_rule: TailRule) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Validation("empty weight list".into()));
        }
        for (i, &w) in p.iter().enumerate() {
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::Validation(format!(
                    "weight p_{} = {} must lie in (0, 1)",
                    i + 1,
                    w
                )));
            }
        }
        // Backward (suffix) sums keep the small tail values accurate.
        let mut suffix = vec![0.0; p.len() + 1];
        for r in (0..p.len()).rev() {
            suffix[r] = suffix[r + 1] + p[r];
        }
        let total = suffix[0];
        if total > 1.0 + TIE_SLACK {
            return Err(Error::Validation(format!(
                "weights sum to {total} > 1"
            )));
        }
        let remainder = (1.0 - total).max(0.0);
        let rho = match tail_rule {
            TailRule::GeometricContinuation { rho } => {
                if !(rho > 1.0) {
                    return Err(Error::Validation(format!(
                        "continuation base rho = {rho} must be > 1"
                    )));
                }
                if remainder <= 0.0 {
                    return Err(Error::Validation(
                        "no remaining mass for the geometric continuation".into(),
                    ));
                }
                rho
            }
            TailRule::Reject => {
                if total < 1.0 - 1e-12 {
                    return Err(Error::Validation(format!(
                        "weights sum to {total} < 1 with no declared continuation"
                    )));
                }
                // Unused when the list carries all the mass.
                2.0
            }
        };
        Ok(Self {
            kind: Kind::Explicit {
                p,
                suffix,
                remainder,
                rho,
            },
        })
    }

    /// Decay base when the sequence is purely geometric.
    pub fn rho(&self) -> Option<f64> {
        match &self.kind {
            Kind::Geometric { rho } => Some(*rho),
            Kind::Explicit { .. } => None,
        }
    }

    /// Weight `p_s` for `s >= 0`, with `p_0 = 0`.
    pub fn p(&self, s: usize) -> f64 {
        if s == 0 {
            return 0.0;
        }
        match &self.kind {
            Kind::Geometric { rho } => (rho - 1.0) * rho.powi(-(s as i32)),
            Kind::Explicit { p, remainder, rho, .. } => {
                if s <= p.len() {
                    p[s - 1]
                } else {
                    remainder * (rho - 1.0) * rho.powi(-((s - p.len()) as i32))
                }
            }
        }
    }

    /// Partial sum `lambda_r = sum_{s<=r} p_s`, the `r`-th eigenvalue of
    /// the hierarchical Laplacian. Computed as `1 - tail(r)` so the value
    /// is exact wherever the tail has a closed form.
    pub fn lambda(&self, r: usize) -> f64 {
        1.0 - self.tail(r)
    }

    /// Exact tail `1 - lambda_kappa = sum_{s > kappa} p_s`, never obtained
    /// by truncating an infinite sum.
    pub fn tail(&self, kappa: usize) -> f64 {
        match &self.kind {
            Kind::Geometric { rho } => rho.powi(-(kappa as i32)),
            Kind::Explicit {
                p,
                suffix,
                remainder,
                rho,
            } => {
                if kappa <= p.len() {
                    suffix[kappa] + remainder
                } else {
                    remainder * rho.powi(-((kappa - p.len()) as i32))
                }
            }
        }
    }

    /// Natural log of the exact tail, for boundary comparisons.
    pub fn ln_tail(&self, kappa: usize) -> f64 {
        match &self.kind {
            Kind::Geometric { rho } => -(kappa as f64) * rho.ln(),
            Kind::Explicit { p, remainder, rho, .. } if kappa > p.len() => {
                remainder.ln() - ((kappa - p.len()) as f64) * rho.ln()
            }
            _ => self.tail(kappa).ln(),
        }
    }

    /// Reported decay diagnostics for an explicit list: the realized
    /// `p_r * rho^r` range over the stored ranks. For geometric weights
    /// both constants equal `rho - 1`.
    pub fn decay_constants(&self, rho: f64) -> (f64, f64) {
        match &self.kind {
            Kind::Geometric { rho: g } if (*g - rho).abs() < 1e-15 => (g - 1.0, g - 1.0),
            _ => {
                let len = match &self.kind {
                    Kind::Explicit { p, .. } => p.len(),
                    Kind::Geometric { .. } => 8,
                };
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for s in 1..=len.max(1) {
                    let c = self.p(s) * rho.powi(s as i32);
                    lo = lo.min(c);
                    hi = hi.max(c);
                }
                (lo, hi)
            }
        }
    }
}

/// Spectral dimension of a homogeneous model with geometric weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralDimension {
    pub n: u32,
    pub rho: f64,
    pub d_s: f64,
}

/// `d_s = 2 ln n / ln rho`.
pub fn spectral_dimension(n: u32, rho: f64) -> Result<SpectralDimension> {
    if n < 2 {
        return Err(Error::Validation(format!("degree n = {n} must be >= 2")));
    }
    if !(rho > 1.0) || !rho.is_finite() {
        return Err(Error::Validation(format!("rho = {rho} must be > 1")));
    }
    Ok(SpectralDimension {
        n,
        rho,
        d_s: 2.0 * (n as f64).ln() / rho.ln(),
    })
}

/// The proof's upper-bound rank choice: the largest `r >= 1` with
/// `n^r <= (alpha E)^{-d_s/2}`. Ties are resolved in log space with
/// absolute slack so the boundary case qualifies.
pub fn k_of_e(dim: &SpectralDimension, energy: f64, alpha: f64) -> Result<usize> {
    if !(energy > 0.0 && energy < 1.0) {
        return Err(Error::Validation(format!(
            "energy {energy} must lie in (0, 1)"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Validation(format!("alpha = {alpha} must be > 0")));
    }
    let bound = -(dim.d_s / 2.0) * (alpha * energy).ln() / (dim.n as f64).ln();
    let r = (bound + TIE_SLACK).floor();
    if r < 1.0 {
        return Err(Error::Domain(format!(
            "no rank r >= 1 satisfies n^r <= (alpha E)^(-d_s/2) at E = {energy}, alpha = {alpha}"
        )));
    }
    Ok(r as usize)
}

/// The proof's lower-bound rank choice: the smallest `r` with
/// `tail(r) < E/2` (strict), compared in log space.
pub fn big_k_of_e(weights: &WeightSequence, energy: f64) -> Result<usize> {
    if !(energy > 0.0) {
        return Err(Error::Validation(format!("energy {energy} must be > 0")));
    }
    let target = (energy / 2.0).ln();
    let mut r = 1usize;
    loop {
        if weights.ln_tail(r) < target - TIE_SLACK {
            return Ok(r);
        }
        r += 1;
        if r > 1_000_000 {
            return Err(Error::Domain(
                "tail did not drop below E/2 within 10^6 ranks".into(),
            ));
        }
    }
}
