//! Log-domain representation for positive probabilities that underflow
//! `f64` (analytic tail bounds routinely fall below 1e-300).

use serde::{Deserialize, Serialize};

/// A nonnegative quantity stored as its natural logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProb {
    /// Natural log of the value; `-inf` encodes zero.
    pub ln: f64,
}

impl LogProb {
    pub fn from_prob(p: f64) -> Self {
        debug_assert!(p >= 0.0);
        Self { ln: p.ln() }
    }

    pub fn from_ln(ln: f64) -> Self {
        Self { ln }
    }

    pub fn zero() -> Self {
        Self { ln: f64::NEG_INFINITY }
    }

    /// The value as `f64`; underflows to zero below roughly 1e-308.
    pub fn value(&self) -> f64 {
        self.ln.exp()
    }

    pub fn log10(&self) -> f64 {
        self.ln / std::f64::consts::LN_10
    }

    /// Whether the value survives conversion to `f64` without underflow.
    pub fn representable(&self) -> bool {
        self.log10().abs() <= 300.0
    }

    pub fn mul(&self, other: LogProb) -> Self {
        Self { ln: self.ln + other.ln }
    }

    pub fn powi(&self, k: f64) -> Self {
        Self { ln: self.ln * k }
    }

    /// `ln |ln value|`, the ordinate of the double-log (Lifshits) transform,
    /// computed without leaving the log domain.
    pub fn ln_abs_ln(&self) -> f64 {
        self.ln.abs().ln()
    }
}

impl std::fmt::Display for LogProb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.representable() {
            write!(f, "{}", self.value())
        } else {
            write!(f, "10^{}", self.log10())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn round_trip_moderate_values() {
        for p in [1.0, 0.5, 1e-10, 1e-300] {
            assert_relative_eq!(LogProb::from_prob(p).value(), p, max_relative = 1e-14);
        }
    }

    #[test]
    fn products_below_underflow() {
        // (1/16)^32 * (1/32): representable but tiny
        let p = LogProb::from_prob(1.0 / 16.0)
            .powi(32.0)
            .mul(LogProb::from_prob(1.0 / 32.0));
        assert_relative_eq!(p.log10(), -32.0 * 16f64.log10() - 32f64.log10());
        // push far below 1e-300 and stay finite in the log domain
        let q = p.powi(20.0);
        assert!(!q.representable());
        assert!(q.ln.is_finite());
        assert_eq!(q.value(), 0.0);
    }

    #[test]
    fn double_log_transform() {
        let p = LogProb::from_ln(-1e6);
        assert_relative_eq!(p.ln_abs_ln(), (1e6f64).ln());
    }
}
