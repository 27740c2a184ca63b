//! Single-site distributions, reproducible potential sampling, the ergodic
//! shift action on potentials, and Birkhoff averaging.
//!
//! Sampling uses counter-based generator streams keyed by
//! `(master_seed, replica)`, so Monte Carlo output never depends on
//! scheduling or degree of parallelism.

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchicalStructure, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Deterministic per-replica generator stream.
///
/// The master seed is expanded into the cipher key with a SplitMix64 walk;
/// the replica index selects the stream, so any replica can be generated
/// independently of all others.
pub fn stream_rng(master_seed: u64, replica: u64) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    let mut state = master_seed;
    for chunk in seed.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(replica);
    rng
}

/// Compactly supported single-site distribution of the i.i.d. potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SingleSiteDistribution {
    /// Uniform on `[a, b]`.
    Uniform { a: f64, b: f64 },
    /// Mass `q` at `v_plus`, mass `1 - q` at `v_minus`.
    TwoPoint { v_minus: f64, v_plus: f64, q: f64 },
    /// Law of `-(0 - v_minus) U^{1/mu}` for uniform `U`; support
    /// `[v_minus, 0]` with `P([-eps, 0]) = (eps / |v_minus|)^mu` exactly.
    PowerTail { v_minus: f64, mu: f64 },
}

impl SingleSiteDistribution {
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a <= b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Validation(format!(
                "uniform bounds ({a}, {b}) invalid"
            )));
        }
        Ok(Self::Uniform { a, b })
    }

    pub fn two_point(v_minus: f64, v_plus: f64, q: f64) -> Result<Self> {
        if !(v_minus <= v_plus) || !(0.0..=1.0).contains(&q) {
            return Err(Error::Validation(format!(
                "two-point parameters ({v_minus}, {v_plus}, q = {q}) invalid"
            )));
        }
        Ok(Self::TwoPoint { v_minus, v_plus, q })
    }

    pub fn power_tail(v_minus: f64, mu: f64) -> Result<Self> {
        if !(v_minus < 0.0) || !(mu > 0.0) {
            return Err(Error::Validation(format!(
                "power-tail parameters (v_minus = {v_minus}, mu = {mu}) invalid"
            )));
        }
        Ok(Self::PowerTail { v_minus, mu })
    }

    /// Support bounds `(v_minus, v_plus)`.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Self::Uniform { a, b } => (a, b),
            Self::TwoPoint { v_minus, v_plus, .. } => (v_minus, v_plus),
            Self::PowerTail { v_minus, .. } => (v_minus, 0.0),
        }
    }

    /// All mass at a single point. Degenerate laws are allowed for oracle
    /// tests but flagged for tail experiments.
    pub fn is_degenerate(&self) -> bool {
        match *self {
            Self::Uniform { a, b } => a == b,
            Self::TwoPoint { v_minus, v_plus, q } => {
                v_minus == v_plus || q == 0.0 || q == 1.0
            }
            Self::PowerTail { .. } => false,
        }
    }

    /// Inverse CDF at `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Self::Uniform { a, b } => a + u * (b - a),
            Self::TwoPoint { v_minus, v_plus, q } => {
                if u < q {
                    v_plus
                } else {
                    v_minus
                }
            }
            Self::PowerTail { v_minus, mu } => v_minus.abs() * -u.powf(1.0 / mu),
        }
    }

    /// `P(omega > t)`, exact for the built-in laws.
    pub fn prob_above(&self, t: f64) -> f64 {
        match *self {
            Self::Uniform { a, b } => {
                if t >= b {
                    0.0
                } else if t <= a {
                    1.0
                } else {
                    (b - t) / (b - a)
                }
            }
            Self::TwoPoint { v_minus, v_plus, q } => {
                if t >= v_plus {
                    0.0
                } else if t >= v_minus {
                    q
                } else {
                    1.0
                }
            }
            Self::PowerTail { v_minus, mu } => {
                if t >= 0.0 {
                    0.0
                } else if t <= v_minus {
                    1.0
                } else {
                    (t / v_minus).powf(mu)
                }
            }
        }
    }

    /// `ln P(omega > t)`, computed without forming the probability when it
    /// underflows (power-tail case).
    pub fn ln_prob_above(&self, t: f64) -> f64 {
        match *self {
            Self::PowerTail { v_minus, mu } if t < 0.0 && t > v_minus => {
                mu * ((-t).ln() - (-v_minus).ln())
            }
            _ => self.prob_above(t).ln(),
        }
    }

    /// The same law shifted by `c` (used for the `v_plus = 0` frame).
    pub fn shifted(&self, c: f64) -> Self {
        match *self {
            Self::Uniform { a, b } => Self::Uniform { a: a + c, b: b + c },
            Self::TwoPoint { v_minus, v_plus, q } => Self::TwoPoint {
                v_minus: v_minus + c,
                v_plus: v_plus + c,
                q,
            },
            // power-tail is only defined in the v_plus = 0 frame
            Self::PowerTail { v_minus, mu } => {
                debug_assert_eq!(c, 0.0);
                Self::PowerTail { v_minus, mu }
            }
        }
    }
}

/// A sampled potential together with its seed provenance.
#[derive(Debug, Clone)]
pub struct PotentialSample {
    pub omega: Vec<f64>,
    pub master_seed: u64,
    pub replica: u64,
}

/// I.i.d. draws via inverse CDF from the `(master_seed, replica)` stream.
pub fn sample_potential(
    dist: &SingleSiteDistribution,
    volume: usize,
    master_seed: u64,
    replica: u64,
) -> Result<PotentialSample> {
    if volume == 0 {
        return Err(Error::Validation("volume must be >= 1".into()));
    }
    let mut rng = stream_rng(master_seed, replica);
    let omega = (0..volume).map(|_| dist.quantile(rng.gen::<f64>())).collect();
    Ok(PotentialSample {
        omega,
        master_seed,
        replica,
    })
}

/// Restriction of the shifted potential `tau_x(omega)` to `Q_kappa(x_0)`:
/// entry at `index(y)` equals `omega[index(x + y)]`. Every shifted index
/// must stay inside the supplied window.
pub fn shift_window(
    structure: &HierarchicalStructure,
    omega: &[f64],
    x: &Point,
    kappa: usize,
) -> Result<Vec<f64>> {
    let dim = structure.volume(kappa) as usize;
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let y = structure.index_to_point(j as u64)?;
        let shifted = structure.group_add(x, &y)?;
        let idx = structure.point_to_index(&shifted)? as usize;
        if idx >= omega.len() {
            return Err(Error::Range(format!(
                "shifted index {idx} escapes the window of length {}",
                omega.len()
            )));
        }
        out.push(omega[idx]);
    }
    Ok(out)
}

/// Spatial mean `(1/|Q_r|) sum_{x in Q_r} h(tau_x(omega))` of an observable
/// of the rank-`window_rank` shifted window.
pub fn birkhoff_average<F>(
    structure: &HierarchicalStructure,
    omega: &[f64],
    r: usize,
    window_rank: usize,
    h: F,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let count = structure.volume(r);
    let mut sum = 0.0;
    for k in 0..count {
        let x = structure.index_to_point(k)?;
        let window = shift_window(structure, omega, &x, window_rank)?;
        sum += h(&window);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn degenerate_two_point_is_constant() {
        let d = SingleSiteDistribution::two_point(-1.0, 0.0, 1.0).unwrap();
        assert!(d.is_degenerate());
        let s = sample_potential(&d, 100, 42, 0).unwrap();
        assert!(s.omega.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_mean_within_four_sigma() {
        let d = SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let n = 1_000_000;
        let s = sample_potential(&d, n, 2024, 1).unwrap();
        let mean = s.omega.iter().sum::<f64>() / n as f64;
        let sigma = 1.0 / (12.0 * n as f64).sqrt();
        assert!((mean + 0.5).abs() <= 4.0 * sigma, "mean {mean}");
        let (lo, hi) = d.support();
        assert!(s.omega.iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn power_tail_near_zero_mass() {
        let d = SingleSiteDistribution::power_tail(-1.0, 2.0).unwrap();
        let n = 1_000_000;
        let s = sample_potential(&d, n, 7, 3).unwrap();
        for eps in [0.1, 0.05, 0.02] {
            let frac =
                s.omega.iter().filter(|&&x| x >= -eps).count() as f64 / n as f64;
            let ratio = frac / (eps * eps);
            assert!(
                (ratio - 1.0).abs() < 0.1,
                "eps = {eps}: ratio {ratio} deviates more than 10%"
            );
        }
        // exact CDF of the construction
        assert_relative_eq!(d.prob_above(-0.25), 0.0625);
    }

    #[test]
    fn reproducible_across_calls() {
        let d = SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let a = sample_potential(&d, 1000, 5, 17).unwrap();
        let b = sample_potential(&d, 1000, 5, 17).unwrap();
        assert_eq!(a.omega, b.omega);
        let c = sample_potential(&d, 1000, 5, 18).unwrap();
        assert_ne!(a.omega, c.omega);
    }

    #[test]
    fn shift_window_examples() {
        let s = HierarchicalStructure::homogeneous(2, 2).unwrap();
        let omega = vec![1.0, 2.0, 3.0, 4.0];
        // identity shift
        let w = shift_window(&s, &omega, &Point::origin(), 2).unwrap();
        assert_eq!(w, omega);
        // swap within the rank-1 cluster
        let x = Point::new(vec![1]);
        let w = shift_window(&s, &omega, &x, 1).unwrap();
        assert_eq!(w, vec![2.0, 1.0]);
        // shift by x then by -x is the identity
        let full = shift_window(&s, &omega, &x, 2).unwrap();
        let neg = s.group_neg(&x).unwrap();
        let back = shift_window(&s, &full, &neg, 2).unwrap();
        assert_eq!(back, omega);
    }

    #[test]
    fn shift_composition() {
        let s = HierarchicalStructure::homogeneous(2, 3).unwrap();
        let d = SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let omega = sample_potential(&d, 8, 11, 0).unwrap().omega;
        for xi in 0..8u64 {
            for yi in 0..8u64 {
                let x = s.index_to_point(xi).unwrap();
                let y = s.index_to_point(yi).unwrap();
                let xy = s.group_add(&x, &y).unwrap();
                let two_step = shift_window(
                    &s,
                    &shift_window(&s, &omega, &x, 3).unwrap(),
                    &y,
                    3,
                )
                .unwrap();
                let one_step = shift_window(&s, &omega, &xy, 3).unwrap();
                assert_eq!(two_step, one_step);
            }
        }
    }

    #[test]
    fn birkhoff_trivial_observables() {
        let s = HierarchicalStructure::homogeneous(2, 4).unwrap();
        let d = SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let omega = sample_potential(&d, 16, 3, 0).unwrap().omega;
        // origin-value observable is the plain sample mean
        let avg = birkhoff_average(&s, &omega, 4, 0, |w| w[0]).unwrap();
        let mean = omega.iter().sum::<f64>() / 16.0;
        assert_relative_eq!(avg, mean, max_relative = 1e-14);
        // constant observable
        let avg = birkhoff_average(&s, &omega, 4, 0, |_| 2.5).unwrap();
        assert_relative_eq!(avg, 2.5);
    }

    #[test]
    fn birkhoff_clt_scale() {
        let s = HierarchicalStructure::homogeneous(2, 14).unwrap();
        let d = SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let omega = sample_potential(&d, 1 << 14, 77, 0).unwrap().omega;
        let avg = birkhoff_average(&s, &omega, 14, 0, |w| w[0]).unwrap();
        let sigma = 1.0 / (12.0 * (1 << 14) as f64).sqrt();
        assert!((avg + 0.5).abs() <= 4.0 * sigma, "avg {avg}");
    }
}
