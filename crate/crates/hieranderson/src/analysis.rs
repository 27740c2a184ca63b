//! Quantitative experiments: Monte Carlo integrated density of states,
//! Dirichlet-Neumann bracketing checks, the upper/lower tail bounds at the
//! top of the spectrum, exponent fits, and covariance/Birkhoff verification.
//!
//! Replicas are independent tasks keyed by `(master_seed, replica)`;
//! aggregation runs in replica order, so results are identical for any
//! degree of parallelism.

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchicalStructure, Point};
use crate::logdomain::LogProb;
use crate::operators::{Boundary, FiniteVolumeHamiltonian};
use crate::randomness::{sample_potential, shift_window, stream_rng, SingleSiteDistribution};
use crate::spectra::{counting_function, eigenvalues_dense, temple_bound, TempleInput};
use crate::weights::{big_k_of_e, k_of_e, SpectralDimension, WeightSequence};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Monte Carlo estimate of the expected counting function on an energy grid.
#[derive(Debug, Clone)]
pub struct IdsEstimate {
    pub boundary: Boundary,
    pub kappa: usize,
    pub replicas: usize,
    pub energies: Vec<f64>,
    pub mean: Vec<f64>,
    /// Standard error of the mean; zero when `replicas < 2`.
    pub std_err: Vec<f64>,
}

/// How a tail value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailMethod {
    McNeumannLower,
    McDirichletUpper,
    AnalyticLower,
    TempleUpper,
}

impl std::fmt::Display for TailMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TailMethod::McNeumannLower => "mc-neumann-lower",
            TailMethod::McDirichletUpper => "mc-dirichlet-upper",
            TailMethod::AnalyticLower => "analytic-lower",
            TailMethod::TempleUpper => "temple-upper",
        };
        write!(f, "{s}")
    }
}

/// Estimate of `1 - N(1 + v_plus - E)` at distance `E` below the upper
/// spectral edge. Values live in the log domain; analytic bounds are
/// deterministic (no standard error).
#[derive(Debug, Clone)]
pub struct TailEstimate {
    pub energy: f64,
    pub kappa: usize,
    pub method: TailMethod,
    pub value: LogProb,
    pub std_err: Option<f64>,
    pub replicas: usize,
}

/// Least-squares exponent fit over an energy window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTransform {
    /// `ln(value)` against `ln E`; target slope `d_s / 2`.
    VanHove,
    /// `ln |ln value|` against `ln E`; target slope `-d_s / 2`.
    Lifshits,
}

#[derive(Debug, Clone)]
pub struct ExponentFit {
    pub transform: FitTransform,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit, reported, never hidden.
    pub residual: f64,
    pub window: (f64, f64),
    pub points: usize,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Eigenvalues of one sampled Neumann Hamiltonian. The Dirichlet spectrum
/// is the same list shifted by the exact tail.
fn replica_neumann_eigs(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    kappa: usize,
    master_seed: u64,
    replica: u64,
    dense_cap: usize,
) -> Result<Vec<f64>> {
    let dim = structure.volume(kappa) as usize;
    let omega = sample_potential(dist, dim, master_seed, replica)?.omega;
    let h = FiniteVolumeHamiltonian::new(
        structure.clone(),
        weights.clone(),
        kappa,
        Boundary::Neumann,
        Some(omega),
    )?;
    eigenvalues_dense(&h.dense_matrix(dense_cap)?)
}

/// Per-energy means and standard errors of the Neumann and Dirichlet
/// counting functions, from one diagonalization per replica.
#[allow(clippy::too_many_arguments)]
fn mc_counting_curves(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    kappa: usize,
    energies: &[f64],
    replicas: usize,
    master_seed: u64,
    dense_cap: usize,
) -> Result<(IdsEstimate, IdsEstimate)> {
    if replicas == 0 {
        return Err(Error::Validation("replicas must be >= 1".into()));
    }
    let tail = weights.tail(kappa);
    let per_replica: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let eigs =
                replica_neumann_eigs(structure, weights, dist, kappa, master_seed, rep, dense_cap)?;
            let n_vals: Vec<f64> = energies
                .iter()
                .map(|&e| counting_function(&eigs, e))
                .collect();
            let d_vals: Vec<f64> = energies
                .iter()
                .map(|&e| counting_function(&eigs, e - tail))
                .collect();
            Ok((n_vals, d_vals))
        })
        .collect();
    let mut n_cols = vec![Vec::with_capacity(replicas); energies.len()];
    let mut d_cols = vec![Vec::with_capacity(replicas); energies.len()];
    for row in per_replica {
        let (n_vals, d_vals) = row?;
        for (i, v) in n_vals.into_iter().enumerate() {
            n_cols[i].push(v);
        }
        for (i, v) in d_vals.into_iter().enumerate() {
            d_cols[i].push(v);
        }
    }
    let build = |cols: &[Vec<f64>], boundary| {
        let (mut mean, mut se) = (Vec::new(), Vec::new());
        for c in cols {
            let (m, s) = mean_and_se(c);
            mean.push(m);
            se.push(s);
        }
        IdsEstimate {
            boundary,
            kappa,
            replicas,
            energies: energies.to_vec(),
            mean,
            std_err: se,
        }
    };
    Ok((
        build(&n_cols, Boundary::Neumann),
        build(&d_cols, Boundary::Dirichlet),
    ))
}

/// Monte Carlo IDS estimate for one boundary condition.
#[allow(clippy::too_many_arguments)]
pub fn mc_ids(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    boundary: Boundary,
    kappa: usize,
    energies: &[f64],
    replicas: usize,
    master_seed: u64,
    dense_cap: usize,
) -> Result<IdsEstimate> {
    let (n, d) = mc_counting_curves(
        structure, weights, dist, kappa, energies, replicas, master_seed, dense_cap,
    )?;
    Ok(match boundary {
        Boundary::Neumann => n,
        Boundary::Dirichlet => d,
    })
}

/// Energy grid of continuity points: midpoints between consecutive atoms
/// of the free spectrum shifted by the potential support edges.
pub fn continuity_grid(
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    count: usize,
) -> Vec<f64> {
    let (v_minus, v_plus) = dist.support();
    let mut atoms = Vec::new();
    // stop refining once lambda_r is within 1e-4 of its limit so that
    // midpoints never creep onto the accumulation points of the atom set
    let mut r = 0usize;
    loop {
        let l = weights.lambda(r);
        atoms.push(l + v_minus);
        atoms.push(l + v_plus);
        if weights.tail(r) <= 1e-4 || r >= 64 {
            break;
        }
        r += 1;
    }
    atoms.push(1.0 + v_minus);
    atoms.push(1.0 + v_plus);
    atoms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    atoms.dedup_by(|a, b| (*a - *b).abs() < 1e-8);
    let mids: Vec<f64> = atoms.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    if mids.len() <= count {
        return mids;
    }
    (0..count)
        .map(|i| mids[i * (mids.len() - 1) / (count - 1).max(1)])
        .collect()
}

/// Per-sample report of the Dirichlet-Neumann decoupling inequalities.
#[derive(Debug, Clone, Serialize)]
pub struct BracketingReport {
    pub kappa: usize,
    pub r: usize,
    /// Worst violation of `<psi, H_N_kappa psi> >= <psi, (+)H_N_r psi>`.
    pub neumann_form_violation: f64,
    /// Worst violation of `<psi, H_D_kappa psi> <= <psi, (+)H_D_r psi>`.
    pub dirichlet_form_violation: f64,
    /// Worst violation of sorted-eigenvalue dominance, Neumann direction.
    pub neumann_eig_violation: f64,
    /// Worst violation of sorted-eigenvalue dominance, Dirichlet direction.
    pub dirichlet_eig_violation: f64,
    /// Worst deviation of `e_D(j) - e_N(j)` from the exact tail.
    pub gap_deviation: f64,
}

impl BracketingReport {
    pub fn max_violation(&self) -> f64 {
        self.neumann_form_violation
            .max(self.dirichlet_form_violation)
            .max(self.neumann_eig_violation)
            .max(self.dirichlet_eig_violation)
    }
}

/// Block-diagonal operator made of rank-`r` restrictions tiling `Q_kappa`.
fn block_operator(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    kappa: usize,
    r: usize,
    boundary: Boundary,
    omega: &[f64],
    dense_cap: usize,
) -> Result<DMatrix<f64>> {
    let dim = structure.volume(kappa) as usize;
    let block = structure.volume(r) as usize;
    let mut m = DMatrix::zeros(dim, dim);
    for j in 0..dim / block {
        let piece = FiniteVolumeHamiltonian::new(
            structure.clone(),
            weights.clone(),
            r,
            boundary,
            Some(omega[j * block..(j + 1) * block].to_vec()),
        )?
        .dense_matrix(dense_cap)?;
        m.view_mut((j * block, j * block), (block, block))
            .copy_from(&piece);
    }
    Ok(m)
}

/// Verify the decoupling inequalities for one potential sample, both as
/// quadratic forms on random unit vectors and as sorted-eigenvalue
/// dominance.
#[allow(clippy::too_many_arguments)]
pub fn bracketing_check(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    kappa: usize,
    r: usize,
    omega: &[f64],
    psi_count: usize,
    seed: u64,
    dense_cap: usize,
) -> Result<BracketingReport> {
    if r > kappa {
        return Err(Error::Validation(format!("r = {r} must be <= kappa = {kappa}")));
    }
    let dim = structure.volume(kappa) as usize;
    if omega.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: omega.len() });
    }
    let full_n = FiniteVolumeHamiltonian::new(
        structure.clone(),
        weights.clone(),
        kappa,
        Boundary::Neumann,
        Some(omega.to_vec()),
    )?
    .dense_matrix(dense_cap)?;
    let full_d = FiniteVolumeHamiltonian::new(
        structure.clone(),
        weights.clone(),
        kappa,
        Boundary::Dirichlet,
        Some(omega.to_vec()),
    )?
    .dense_matrix(dense_cap)?;
    let blocks_n =
        block_operator(structure, weights, kappa, r, Boundary::Neumann, omega, dense_cap)?;
    let blocks_d =
        block_operator(structure, weights, kappa, r, Boundary::Dirichlet, omega, dense_cap)?;

    let mut rng = stream_rng(seed, 0xb4ac);
    let mut neumann_form_violation: f64 = 0.0;
    let mut dirichlet_form_violation: f64 = 0.0;
    for _ in 0..psi_count {
        let mut psi = DVector::from_fn(dim, |_, _| rng.gen::<f64>() - 0.5);
        psi /= psi.norm();
        let qn_full = psi.dot(&(&full_n * &psi));
        let qn_blocks = psi.dot(&(&blocks_n * &psi));
        neumann_form_violation = neumann_form_violation.max(qn_blocks - qn_full);
        let qd_full = psi.dot(&(&full_d * &psi));
        let qd_blocks = psi.dot(&(&blocks_d * &psi));
        dirichlet_form_violation = dirichlet_form_violation.max(qd_full - qd_blocks);
    }

    let en_full = eigenvalues_dense(&full_n)?;
    let ed_full = eigenvalues_dense(&full_d)?;
    let en_blocks = eigenvalues_dense(&blocks_n)?;
    let ed_blocks = eigenvalues_dense(&blocks_d)?;
    let mut neumann_eig_violation: f64 = 0.0;
    let mut dirichlet_eig_violation: f64 = 0.0;
    let mut gap_deviation: f64 = 0.0;
    let tail = weights.tail(kappa);
    for j in 0..dim {
        neumann_eig_violation = neumann_eig_violation.max(en_blocks[j] - en_full[j]);
        dirichlet_eig_violation = dirichlet_eig_violation.max(ed_full[j] - ed_blocks[j]);
        gap_deviation = gap_deviation.max((ed_full[j] - en_full[j] - tail).abs());
    }
    Ok(BracketingReport {
        kappa,
        r,
        neumann_form_violation,
        dirichlet_form_violation,
        neumann_eig_violation,
        dirichlet_eig_violation,
        gap_deviation,
    })
}

/// Parameters of the Temple upper-bound pipeline.
#[derive(Debug, Clone)]
pub struct TailUpperParams {
    /// Distance below the upper edge, in the `v_plus = 0` frame.
    pub energy: f64,
    /// Free parameter of the rank choice and the large-deviation step.
    pub alpha: f64,
    pub replicas: usize,
    pub master_seed: u64,
    pub dense_cap: usize,
    /// Use this rank instead of the one selected by the rank rule.
    pub kappa_override: Option<usize>,
}

/// Outcome of the Temple pipeline over all replicas.
#[derive(Debug, Clone)]
pub struct TailUpperReport {
    pub estimate: TailEstimate,
    pub kappa: usize,
    pub p_kappa: f64,
    /// Truncation floor `-p_kappa / 3` of the raised potential.
    pub truncation_floor: f64,
    pub replicas: usize,
    pub precondition_passes: usize,
    /// Worst `E_max(H_D) - (1 + mean(V_kappa)/2)` over passing replicas.
    pub simplified_bound_violation: f64,
    /// Worst `E_max(H_D) - E_max(H~_D)` over all replicas.
    pub tilde_ordering_violation: f64,
    /// Worst `E_max(H~_D) - temple bound` over passing replicas.
    pub temple_violation: f64,
    /// Bernoulli coarse-graining diagnostics of the large-deviation step.
    pub diagnostics: LargeDeviationDiagnostics,
}

/// Diagnostics of the exponential rate; reported, not asserted against the
/// Monte Carlo frequencies (the events are far too rare).
#[derive(Debug, Clone, Serialize)]
pub struct LargeDeviationDiagnostics {
    /// Threshold `gamma` defining the Bernoulli variables.
    pub gamma: f64,
    /// `q = P0(]gamma, 0])`.
    pub q: f64,
    /// `z = 1 - 6 / (alpha C1)`.
    pub z: f64,
    /// Max of `f(t) = t z - ln(1 - q + q e^t)` over the scanned grid.
    pub f_max: f64,
    pub t_at_f_max: f64,
    /// `exp(-|Q_kappa| f(t0))` when `f_max > 0`.
    pub rate_bound: Option<f64>,
}

/// The upper-bound pipeline of the tail proof: raised potential, Temple
/// bound with the analytic `E_1 = 1 - p_kappa`, per-replica verification
/// against the dense top eigenvalue, and the Monte Carlo frequency of
/// `E_max(H_D) > 1 - E` as surrogate for the tail probability.
pub fn tail_upper_pipeline(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dim: &SpectralDimension,
    dist: &SingleSiteDistribution,
    params: &TailUpperParams,
) -> Result<TailUpperReport> {
    let (_, v_plus) = dist.support();
    let dist0 = dist.shifted(-v_plus);
    let kappa = match params.kappa_override {
        Some(k) => k,
        None => k_of_e(dim, params.energy, params.alpha)?,
    };
    if kappa == 0 || kappa > structure.max_rank() {
        return Err(Error::Range(format!("kappa = {kappa} out of range")));
    }
    let vol = structure.volume(kappa) as usize;
    let p_kappa = weights.p(kappa);
    let floor = -p_kappa / 3.0;
    let e1 = 1.0 - p_kappa;

    // (precondition ok, simplified-bound violation, temple violation,
    //  ordering violation, exceeds threshold)
    type ReplicaRow = (bool, f64, f64, f64, bool);
    let per_replica: Vec<Result<ReplicaRow>> = (0..params.replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let omega = sample_potential(&dist0, vol, params.master_seed, rep)?.omega;
            let raised: Vec<f64> = omega.iter().map(|&w| w.max(floor)).collect();
            let mean_v = raised.iter().sum::<f64>() / vol as f64;

            let h_tilde = FiniteVolumeHamiltonian::new(
                structure.clone(),
                weights.clone(),
                kappa,
                Boundary::Dirichlet,
                Some(raised),
            )?;
            // <psi0, A psi0> and <psi0, A^2 psi0> for the constant trial vector
            let psi0 = vec![1.0 / (vol as f64).sqrt(); vol];
            let a_psi = h_tilde.apply(&psi0)?;
            let mean_energy: f64 = psi0.iter().zip(&a_psi).map(|(p, a)| p * a).sum();
            let second_moment: f64 = a_psi.iter().map(|a| a * a).sum();
            let pre_ok = mean_energy > e1;

            let h = FiniteVolumeHamiltonian::new(
                structure.clone(),
                weights.clone(),
                kappa,
                Boundary::Dirichlet,
                Some(omega),
            )?;
            let e_max = *eigenvalues_dense(&h.dense_matrix(params.dense_cap)?)?
                .last()
                .unwrap();
            let e_max_tilde = *eigenvalues_dense(&h_tilde.dense_matrix(params.dense_cap)?)?
                .last()
                .unwrap();
            let simplified = 1.0 + 0.5 * mean_v;
            let mut simplified_violation = f64::NEG_INFINITY;
            let mut temple_violation = f64::NEG_INFINITY;
            if pre_ok {
                let bound = temple_bound(TempleInput {
                    mean_energy,
                    second_moment,
                    e1,
                })?;
                simplified_violation = e_max - simplified;
                temple_violation = e_max_tilde - bound;
            }
            let exceeds = e_max > 1.0 - params.energy;
            Ok((
                pre_ok,
                simplified_violation,
                temple_violation,
                e_max - e_max_tilde,
                exceeds,
            ))
        })
        .collect();

    let mut passes = 0usize;
    let mut simplified_bound_violation = f64::NEG_INFINITY;
    let mut temple_violation = f64::NEG_INFINITY;
    let mut tilde_ordering_violation = f64::NEG_INFINITY;
    let mut exceed_count = 0usize;
    for row in per_replica {
        let (pre_ok, sv, tv, ov, exceeds) = row?;
        if pre_ok {
            passes += 1;
            simplified_bound_violation = simplified_bound_violation.max(sv);
            temple_violation = temple_violation.max(tv);
        }
        tilde_ordering_violation = tilde_ordering_violation.max(ov);
        if exceeds {
            exceed_count += 1;
        }
    }

    let n = params.replicas as f64;
    let freq = exceed_count as f64 / n;
    let se = (freq * (1.0 - freq) / n).sqrt();
    let estimate = TailEstimate {
        energy: params.energy,
        kappa,
        method: TailMethod::TempleUpper,
        value: LogProb::from_prob(freq),
        std_err: Some(se),
        replicas: params.replicas,
    };

    // Large-deviation diagnostics; gamma is the truncation floor.
    let c1 = dim.rho - 1.0;
    let z = 1.0 - 6.0 / (params.alpha * c1);
    let gamma = floor;
    let q = dist0.prob_above(gamma);
    let mut f_max = f64::NEG_INFINITY;
    let mut t_at = 0.0;
    for i in 0..=1000 {
        let t = 10.0 * i as f64 / 1000.0;
        let f = t * z - (1.0 - q + q * t.exp()).ln();
        if f > f_max {
            f_max = f;
            t_at = t;
        }
    }
    let rate_bound = if f_max > 0.0 {
        Some((-(vol as f64) * f_max).exp())
    } else {
        None
    };

    Ok(TailUpperReport {
        estimate,
        kappa,
        p_kappa,
        truncation_floor: floor,
        replicas: params.replicas,
        precondition_passes: passes,
        simplified_bound_violation,
        tilde_ordering_violation,
        temple_violation,
        diagnostics: LargeDeviationDiagnostics {
            gamma,
            q,
            z,
            f_max,
            t_at_f_max: t_at,
            rate_bound,
        },
    })
}

/// Rigorous analytic lower bound on the tail:
/// `(1/|Q_K|) * P0(]-E/2, 0])^{|Q_K|}` with `K = K(E)`, carried in the
/// log domain.
pub fn tail_lower_analytic(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    energy: f64,
) -> Result<TailEstimate> {
    let kappa = big_k_of_e(weights, energy)?;
    let (_, v_plus) = dist.support();
    // |Q_K| as f64 so ranks beyond the materialized prefix still work
    let vol = if kappa <= structure.max_rank() {
        structure.volume(kappa) as f64
    } else {
        let n = structure.homogeneous_degree().ok_or_else(|| {
            Error::Range(format!(
                "rank {kappa} beyond materialized prefix of an inhomogeneous structure"
            ))
        })?;
        (n as f64).powi(kappa as i32)
    };
    let ln_p_site = dist.ln_prob_above(v_plus - energy / 2.0);
    let value = LogProb::from_ln(-vol.ln() + vol * ln_p_site);
    Ok(TailEstimate {
        energy,
        kappa,
        method: TailMethod::AnalyticLower,
        value,
        std_err: None,
        replicas: 0,
    })
}

/// Rule for choosing the finite-volume rank per energy.
#[derive(Debug, Clone)]
pub enum KappaRule {
    KOfE { dim: SpectralDimension, alpha: f64 },
    BigK,
    Fixed(usize),
}

/// Monte Carlo tail bounds plus per-replica trial-function checks at one
/// grid energy.
#[derive(Debug, Clone)]
pub struct TailMcRow {
    pub energy: f64,
    pub kappa: usize,
    pub neumann_lower: TailEstimate,
    pub dirichlet_upper: TailEstimate,
    /// Empirical frequency of `E_max(H_N) > 1 + v_plus - E`.
    pub emax_exceed_freq: f64,
    /// Worst violation of `E_max(H_N) >= lambda_kappa + mean(omega)`.
    pub trial_bound_violation: f64,
}

/// Monte Carlo estimates of the tail from both boundary conditions:
/// `1 - mean N_N(1-E)` bounds the tail from below, `1 - mean N_D(1-E)`
/// from above.
#[allow(clippy::too_many_arguments)]
pub fn tail_mc(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    energies: &[f64],
    kappa_rule: &KappaRule,
    replicas: usize,
    master_seed: u64,
    dense_cap: usize,
) -> Result<Vec<TailMcRow>> {
    let (_, v_plus) = dist.support();
    let mut rows = Vec::with_capacity(energies.len());
    for &energy in energies {
        let kappa = match kappa_rule {
            KappaRule::KOfE { dim, alpha } => k_of_e(dim, energy, *alpha)?,
            KappaRule::BigK => big_k_of_e(weights, energy)?,
            KappaRule::Fixed(k) => *k,
        };
        if kappa > structure.max_rank() {
            return Err(Error::Range(format!(
                "kappa = {kappa} exceeds max_rank {}",
                structure.max_rank()
            )));
        }
        let threshold = 1.0 + v_plus - energy;
        let tail = weights.tail(kappa);
        let lambda_kappa = weights.lambda(kappa);
        let vol = structure.volume(kappa) as usize;

        let per_replica: Vec<Result<(f64, f64, bool, f64)>> = (0..replicas as u64)
            .into_par_iter()
            .map(|rep| {
                let omega = sample_potential(dist, vol, master_seed, rep)?.omega;
                let mean_omega = omega.iter().sum::<f64>() / vol as f64;
                let h = FiniteVolumeHamiltonian::new(
                    structure.clone(),
                    weights.clone(),
                    kappa,
                    Boundary::Neumann,
                    Some(omega),
                )?;
                let eigs = eigenvalues_dense(&h.dense_matrix(dense_cap)?)?;
                let n_above = 1.0 - counting_function(&eigs, threshold);
                let d_above = 1.0 - counting_function(&eigs, threshold - tail);
                let e_max = *eigs.last().unwrap();
                let exceeds = e_max > threshold;
                let trial_violation = (lambda_kappa + mean_omega) - e_max;
                Ok((n_above, d_above, exceeds, trial_violation))
            })
            .collect();

        let mut n_vals = Vec::with_capacity(replicas);
        let mut d_vals = Vec::with_capacity(replicas);
        let mut exceed_count = 0usize;
        let mut trial_bound_violation = f64::NEG_INFINITY;
        for row in per_replica {
            let (nv, dv, ex, tv) = row?;
            n_vals.push(nv);
            d_vals.push(dv);
            if ex {
                exceed_count += 1;
            }
            trial_bound_violation = trial_bound_violation.max(tv);
        }
        let (n_mean, n_se) = mean_and_se(&n_vals);
        let (d_mean, d_se) = mean_and_se(&d_vals);
        rows.push(TailMcRow {
            energy,
            kappa,
            neumann_lower: TailEstimate {
                energy,
                kappa,
                method: TailMethod::McNeumannLower,
                value: LogProb::from_prob(n_mean),
                std_err: Some(n_se),
                replicas,
            },
            dirichlet_upper: TailEstimate {
                energy,
                kappa,
                method: TailMethod::McDirichletUpper,
                value: LogProb::from_prob(d_mean),
                std_err: Some(d_se),
                replicas,
            },
            emax_exceed_freq: exceed_count as f64 / replicas as f64,
            trial_bound_violation,
        });
    }
    Ok(rows)
}

fn fit_line(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let rss: f64 = points
        .iter()
        .map(|p| (p.1 - slope * p.0 - intercept).powi(2))
        .sum();
    (slope, intercept, (rss / n).sqrt())
}

/// Least-squares exponent fit of `(E, value)` pairs under the requested
/// transform. Values must lie strictly inside `(0, 1)`.
pub fn exponent_fit(points: &[(f64, f64)], transform: FitTransform) -> Result<ExponentFit> {
    for &(_, v) in points {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!(
                "value {v} outside (0, 1): logarithm undefined"
            )));
        }
    }
    let log_points: Vec<(f64, LogProb)> = points
        .iter()
        .map(|&(e, v)| (e, LogProb::from_prob(v)))
        .collect();
    exponent_fit_ln(&log_points, transform)
}

/// Exponent fit for values already in the log domain, so analytic tail
/// bounds far below `f64` underflow can still be fitted.
pub fn exponent_fit_ln(
    points: &[(f64, LogProb)],
    transform: FitTransform,
) -> Result<ExponentFit> {
    if points.len() < 4 {
        return Err(Error::Validation(format!(
            "{} points supplied; the fit window needs at least 4",
            points.len()
        )));
    }
    let mut transformed = Vec::with_capacity(points.len());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(e, v) in points {
        if !(e > 0.0) || !v.ln.is_finite() || v.ln >= 0.0 {
            return Err(Error::Domain(format!(
                "point (E = {e}, ln value = {}) outside the fit domain",
                v.ln
            )));
        }
        let y = match transform {
            FitTransform::VanHove => v.ln,
            FitTransform::Lifshits => v.ln_abs_ln(),
        };
        transformed.push((e.ln(), y));
        lo = lo.min(e);
        hi = hi.max(e);
    }
    let (slope, intercept, residual) = fit_line(&transformed);
    Ok(ExponentFit {
        transform,
        slope,
        intercept,
        residual,
        window: (lo, hi),
        points: points.len(),
    })
}

/// Dense matrix of the truncated operator `K_kappa = sum_{s<=kappa} p_s E_s + V`
/// on the larger cluster `Q_R`; it leaves every `Q_kappa`-block invariant.
fn truncated_matrix(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    kappa: usize,
    big_r: usize,
    omega: &[f64],
) -> DMatrix<f64> {
    let dim = structure.volume(big_r) as usize;
    let mut c = vec![0.0; kappa + 2];
    for d in (1..=kappa).rev() {
        c[d] = c[d + 1] + weights.p(d) / structure.volume(d) as f64;
    }
    c[0] = c[1];
    let mut m = DMatrix::zeros(dim, dim);
    for x in 0..dim {
        for y in x..dim {
            let d = structure.common_rank(x as u64, y as u64);
            let mut entry = if d <= kappa { c[d] } else { 0.0 };
            if x == y {
                entry += omega[x];
            }
            m[(x, y)] = entry;
            m[(y, x)] = entry;
        }
    }
    m
}

/// Covariance of the truncated Hamiltonian under the shift group: the
/// matrix of `K^{tau_x(omega)}` must equal the conjugated matrix of
/// `K^{omega}`, entry `(a, b)` against `(x+a, x+b)`. Returns the maximum
/// absolute entry deviation.
pub fn covariance_check(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    kappa: usize,
    big_r: usize,
    omega: &[f64],
    x: &Point,
) -> Result<f64> {
    let dim = structure.volume(big_r) as usize;
    if omega.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: omega.len() });
    }
    let base = truncated_matrix(structure, weights, kappa, big_r, omega);
    let shifted_omega = shift_window(structure, omega, x, big_r)?;
    let shifted = truncated_matrix(structure, weights, kappa, big_r, &shifted_omega);
    let mut shift_idx = Vec::with_capacity(dim);
    for a in 0..dim {
        let p = structure.index_to_point(a as u64)?;
        let xa = structure.group_add(x, &p)?;
        shift_idx.push(structure.point_to_index(&xa)? as usize);
    }
    let mut max_dev: f64 = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            let dev = (shifted[(a, b)] - base[(shift_idx[a], shift_idx[b])]).abs();
            max_dev = max_dev.max(dev);
        }
    }
    Ok(max_dev)
}

/// Sup-norm gaps between Neumann counting-function means two ranks apart,
/// the checkable form of finite-volume convergence.
#[derive(Debug, Clone)]
pub struct ConvergenceTrend {
    pub kappas: Vec<usize>,
    /// `sup_E |mean N_kappa - mean N_{kappa+2}|` for each listed kappa.
    pub gaps: Vec<f64>,
    /// Combined standard error at the energy achieving each gap.
    pub gap_std_err: Vec<f64>,
}

/// Estimate the convergence trend of the Neumann counting means on a
/// continuity grid.
#[allow(clippy::too_many_arguments)]
pub fn convergence_trend(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    dist: &SingleSiteDistribution,
    kappas: &[usize],
    energies: &[f64],
    replicas: usize,
    master_seed: u64,
    dense_cap: usize,
) -> Result<ConvergenceTrend> {
    let mut estimates = std::collections::BTreeMap::new();
    for &k in kappas {
        for kk in [k, k + 2] {
            estimates.entry(kk).or_insert_with(|| {
                mc_ids(
                    structure,
                    weights,
                    dist,
                    Boundary::Neumann,
                    kk,
                    energies,
                    replicas,
                    master_seed,
                    dense_cap,
                )
            });
        }
    }
    let mut gaps = Vec::new();
    let mut gap_std_err = Vec::new();
    for &k in kappas {
        let a = estimates.get(&k).unwrap().as_ref().map_err(clone_err)?;
        let b = estimates.get(&(k + 2)).unwrap().as_ref().map_err(clone_err)?;
        let mut gap: f64 = 0.0;
        let mut se = 0.0;
        for i in 0..energies.len() {
            let d = (a.mean[i] - b.mean[i]).abs();
            if d > gap {
                gap = d;
                se = (a.std_err[i].powi(2) + b.std_err[i].powi(2)).sqrt();
            }
        }
        gaps.push(gap);
        gap_std_err.push(se);
    }
    Ok(ConvergenceTrend {
        kappas: kappas.to_vec(),
        gaps,
        gap_std_err,
    })
}

fn clone_err(e: &Error) -> Error {
    Error::Validation(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::ids_free;
    use approx::assert_relative_eq;

    fn setup(max_rank: usize) -> (HierarchicalStructure, WeightSequence, SingleSiteDistribution)
    {
        (
            HierarchicalStructure::homogeneous(2, max_rank).unwrap(),
            WeightSequence::geometric(2.0).unwrap(),
            SingleSiteDistribution::uniform(-1.0, 0.0).unwrap(),
        )
    }

    #[test]
    fn mc_ids_point_mass_reduces_to_free() {
        let (s, w, _) = setup(3);
        let point_mass = SingleSiteDistribution::two_point(0.0, 0.0, 1.0).unwrap();
        // grid strictly below lambda_{kappa-1} region handled by the free IDS identity
        let grid = vec![-0.1, 0.0, 0.25, 0.5, 0.6];
        let est = mc_ids(&s, &w, &point_mass, Boundary::Neumann, 3, &grid, 4, 9, 64).unwrap();
        for (i, &e) in grid.iter().enumerate() {
            assert_relative_eq!(est.mean[i], ids_free(&s, &w, e).unwrap(), epsilon = 1e-14);
            assert_eq!(est.std_err[i], 0.0);
        }
    }

    #[test]
    fn mc_ids_constant_shift() {
        let (s, w, _) = setup(3);
        let c = -0.3;
        let shifted_mass = SingleSiteDistribution::two_point(c, c, 0.0).unwrap();
        let grid = vec![0.0 + c, 0.5 + c, 0.6 + c];
        let est =
            mc_ids(&s, &w, &shifted_mass, Boundary::Neumann, 3, &grid, 2, 9, 64).unwrap();
        for (i, &e) in grid.iter().enumerate() {
            assert_relative_eq!(
                est.mean[i],
                ids_free(&s, &w, e - c).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn mc_ids_sandwich_ordering() {
        let (s, w, d) = setup(3);
        let grid = continuity_grid(&w, &d, 12);
        let (n, dd) = mc_counting_curves(&s, &w, &d, 3, &grid, 2000, 42, 64).unwrap();
        for i in 0..grid.len() {
            let se = (n.std_err[i].powi(2) + dd.std_err[i].powi(2)).sqrt();
            assert!(
                dd.mean[i] <= n.mean[i] + 3.0 * se,
                "ordering failed at E = {}",
                grid[i]
            );
        }
    }

    #[test]
    fn bracketing_free_example() {
        let (s, w, _) = setup(2);
        let omega = vec![0.0; 4];
        let rep = bracketing_check(&s, &w, 2, 1, &omega, 10, 1, 64).unwrap();
        assert!(rep.max_violation() <= 1e-10, "violation {}", rep.max_violation());
        assert!(rep.gap_deviation <= 1e-12);
        // kappa-spectrum {1/4, 1/4, 3/4, 1}; decoupled Dirichlet blocks give
        // {1/2, 1/2, 1, 1}, which dominates entrywise
        let full = FiniteVolumeHamiltonian::new(
            s.clone(),
            w.clone(),
            2,
            Boundary::Dirichlet,
            Some(omega.clone()),
        )
        .unwrap();
        let eigs = eigenvalues_dense(&full.dense_matrix(64).unwrap()).unwrap();
        let expect = [0.25, 0.25, 0.75, 1.0];
        for (a, b) in eigs.iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-10);
        }
        let blocks =
            block_operator(&s, &w, 2, 1, Boundary::Dirichlet, &omega, 64).unwrap();
        let beigs = eigenvalues_dense(&blocks).unwrap();
        let bexpect = [0.5, 0.5, 1.0, 1.0];
        for (a, b) in beigs.iter().zip(bexpect) {
            assert_relative_eq!(*a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn bracketing_r_equals_kappa_is_exact() {
        let (s, w, d) = setup(3);
        let omega = sample_potential(&d, 8, 3, 0).unwrap().omega;
        let rep = bracketing_check(&s, &w, 3, 3, &omega, 20, 2, 64).unwrap();
        assert!(rep.max_violation() <= 1e-12);
    }

    #[test]
    fn bracketing_random_samples() {
        let (s, w, d) = setup(4);
        for rep_idx in 0..20 {
            let omega = sample_potential(&d, 16, 100, rep_idx).unwrap().omega;
            let rep = bracketing_check(&s, &w, 4, 2, &omega, 5, rep_idx, 64).unwrap();
            assert!(rep.max_violation() <= 1e-10);
        }
    }

    #[test]
    fn temple_pipeline_free_potential_is_tight() {
        let (s, w, _) = setup(3);
        let dim = crate::weights::spectral_dimension(2, 2.0).unwrap();
        let zero = SingleSiteDistribution::two_point(-1.0, 0.0, 1.0).unwrap();
        let params = TailUpperParams {
            energy: 0.125,
            alpha: 1.0,
            replicas: 3,
            master_seed: 5,
            dense_cap: 64,
            kappa_override: None,
        };
        let rep = tail_upper_pipeline(&s, &w, &dim, &zero, &params).unwrap();
        assert_eq!(rep.kappa, 3);
        assert_relative_eq!(rep.p_kappa, 0.125);
        assert_relative_eq!(rep.truncation_floor, -1.0 / 24.0);
        assert_eq!(rep.precondition_passes, 3);
        // omega = 0: the simplified bound is 1 and E_max(free Dirichlet) = 1
        assert!(rep.simplified_bound_violation.abs() <= 1e-10);
    }

    #[test]
    fn temple_pipeline_uniform_validity() {
        let (s, w, d) = setup(3);
        let dim = crate::weights::spectral_dimension(2, 2.0).unwrap();
        let params = TailUpperParams {
            energy: 0.125,
            alpha: 1.0,
            replicas: 200,
            master_seed: 11,
            dense_cap: 64,
            kappa_override: None,
        };
        let rep = tail_upper_pipeline(&s, &w, &dim, &d, &params).unwrap();
        assert!(rep.simplified_bound_violation <= 1e-10);
        assert!(rep.temple_violation <= 1e-10);
        assert!(rep.tilde_ordering_violation <= 1e-10);
    }

    #[test]
    fn analytic_lower_uniform_example() {
        let (s, w, d) = setup(6);
        let est = tail_lower_analytic(&s, &w, &d, 0.125).unwrap();
        assert_eq!(est.kappa, 5);
        // (1/32) * (1/16)^32
        let expect = -(32f64.ln()) + 32.0 * (1.0 / 16.0f64).ln();
        assert_relative_eq!(est.value.ln, expect, max_relative = 1e-12);
    }

    #[test]
    fn analytic_lower_two_point_atom() {
        let (s, w, _) = setup(8);
        let d = SingleSiteDistribution::two_point(-1.0, 0.0, 0.3).unwrap();
        for energy in [0.5, 0.25, 1.5] {
            let est = tail_lower_analytic(&s, &w, &d, energy).unwrap();
            let vol = s.volume(est.kappa) as f64;
            let expect = -(vol.ln()) + vol * 0.3f64.ln();
            assert_relative_eq!(est.value.ln, expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn tail_mc_point_mass_reduces_to_free() {
        let (s, w, _) = setup(4);
        let point_mass = SingleSiteDistribution::two_point(0.0, 0.0, 1.0).unwrap();
        let rows = tail_mc(
            &s,
            &w,
            &point_mass,
            &[0.3],
            &KappaRule::Fixed(4),
            3,
            1,
            64,
        )
        .unwrap();
        let expect = 1.0 - ids_free(&s, &w, 1.0 - 0.3).unwrap();
        assert_relative_eq!(rows[0].neumann_lower.value.value(), expect, epsilon = 1e-12);
    }

    #[test]
    fn tail_mc_ordering_and_trial_bound() {
        let (s, w, d) = setup(4);
        let rows =
            tail_mc(&s, &w, &d, &[0.25], &KappaRule::BigK, 2000, 21, 64).unwrap();
        let row = &rows[0];
        assert_eq!(row.kappa, 4);
        let n = row.neumann_lower.value.value();
        let dd = row.dirichlet_upper.value.value();
        let se = (row.neumann_lower.std_err.unwrap().powi(2)
            + row.dirichlet_upper.std_err.unwrap().powi(2))
        .sqrt();
        assert!(n <= dd + 3.0 * se);
        assert!(row.trial_bound_violation <= 1e-10);
    }

    #[test]
    fn van_hove_fit_closed_form() {
        let (s, w, _) = setup(3);
        let points: Vec<(f64, f64)> = (4..=14)
            .map(|m| {
                let e = 2f64.powi(-m);
                (e, 1.0 - ids_free(&s, &w, 1.0 - e).unwrap())
            })
            .collect();
        // pointwise ratio at E = 2^-10 is exactly 1.1
        let (e10, v10) = points[6];
        assert_relative_eq!(v10.ln() / e10.ln(), 1.1, max_relative = 1e-12);
        let fit = exponent_fit(&points, FitTransform::VanHove).unwrap();
        assert!((fit.slope - 1.0).abs() <= 0.15, "slope {}", fit.slope);
    }

    #[test]
    fn lifshits_fit_constructed_power_law() {
        let points: Vec<(f64, LogProb)> = (1..=8)
            .map(|i| {
                let e = 0.02 * i as f64;
                (e, LogProb::from_ln(-1.0 / e))
            })
            .collect();
        let fit = exponent_fit_ln(&points, FitTransform::Lifshits).unwrap();
        assert_relative_eq!(fit.slope, -1.0, epsilon = 1e-8);
        assert!(fit.residual <= 1e-8);
    }

    #[test]
    fn exponent_fit_rejects_bad_values() {
        let pts = vec![(0.1, 1.0), (0.2, 0.5), (0.3, 0.25), (0.4, 0.125)];
        assert!(matches!(
            exponent_fit(&pts, FitTransform::VanHove),
            Err(Error::Domain(_))
        ));
        let few = vec![(0.1, 0.5), (0.2, 0.25), (0.3, 0.125)];
        assert!(exponent_fit(&few, FitTransform::VanHove).is_err());
    }

    #[test]
    fn covariance_all_shifts_small_volume() {
        let (s, w, d) = setup(3);
        let omega = sample_potential(&d, 8, 17, 0).unwrap().omega;
        for xi in 0..8u64 {
            let x = s.index_to_point(xi).unwrap();
            let dev = covariance_check(&s, &w, 2, 3, &omega, &x).unwrap();
            assert!(dev <= 1e-14, "shift {xi}: deviation {dev}");
        }
        // identity shift is exact
        let dev = covariance_check(&s, &w, 2, 3, &omega, &Point::origin()).unwrap();
        assert_eq!(dev, 0.0);
        // free operator
        let zero = vec![0.0; 8];
        for xi in 0..8u64 {
            let x = s.index_to_point(xi).unwrap();
            let dev = covariance_check(&s, &w, 2, 3, &zero, &x).unwrap();
            assert!(dev <= 1e-14);
        }
    }

    #[test]
    fn continuity_grid_avoids_atoms() {
        let (_, w, d) = setup(3);
        let grid = continuity_grid(&w, &d, 20);
        assert_eq!(grid.len(), 20);
        for &e in &grid {
            for r in 0..12 {
                for v in [-1.0, 0.0] {
                    assert!((e - (w.lambda(r) + v)).abs() > 1e-6);
                }
            }
        }
    }
}
