//! The hierarchical Laplacian on a finite cluster: cluster averaging
//! operators, Neumann/Dirichlet restrictions, random Hamiltonians with a
//! structured O(kappa * |Q_kappa|) matvec, dense materialization for small
//! volumes, and closed-form free spectra / integrated density of states.
//!
//! The finite volume is always the leftmost cluster `Q_kappa(x_0)`; by
//! translation covariance nothing is lost by this choice.

use crate::error::{Error, Result};
use crate::hierarchy::HierarchicalStructure;
use crate::weights::WeightSequence;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Default cap on the dense materialization dimension.
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Neumann,
    Dirichlet,
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Boundary::Neumann => write!(f, "neumann"),
            Boundary::Dirichlet => write!(f, "dirichlet"),
        }
    }
}

/// Apply the cluster averaging operator `E_s` restricted to `Q_kappa`.
/// `E_0` is the identity. One pass of contiguous block sums, O(|Q_kappa|).
pub fn averaging_apply(
    structure: &HierarchicalStructure,
    s: usize,
    kappa: usize,
    psi: &[f64],
) -> Result<Vec<f64>> {
    if s > kappa || kappa > structure.max_rank() {
        return Err(Error::Range(format!(
            "ranks (s = {s}, kappa = {kappa}) out of range"
        )));
    }
    let dim = structure.volume(kappa) as usize;
    if psi.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: psi.len(),
        });
    }
    if s == 0 {
        return Ok(psi.to_vec());
    }
    let block = structure.volume(s) as usize;
    let mut out = vec![0.0; dim];
    for (b, chunk) in psi.chunks_exact(block).enumerate() {
        let mean = chunk.iter().sum::<f64>() / block as f64;
        out[b * block..(b + 1) * block].fill(mean);
    }
    Ok(out)
}

/// Finite-volume Hamiltonian `H = Delta_{X,kappa} + V` on `Q_kappa(x_0)`.
/// Without a potential this is the free restriction `Delta_{X,kappa}`.
#[derive(Debug, Clone)]
pub struct FiniteVolumeHamiltonian {
    pub boundary: Boundary,
    pub kappa: usize,
    structure: HierarchicalStructure,
    weights: WeightSequence,
    potential: Option<Vec<f64>>,
}

impl FiniteVolumeHamiltonian {
    pub fn new(
        structure: HierarchicalStructure,
        weights: WeightSequence,
        kappa: usize,
        boundary: Boundary,
        potential: Option<Vec<f64>>,
    ) -> Result<Self> {
        if kappa > structure.max_rank() {
            return Err(Error::Range(format!(
                "kappa = {} exceeds max_rank {}",
                kappa,
                structure.max_rank()
            )));
        }
        let dim = structure.volume(kappa) as usize;
        if let Some(v) = &potential {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation("non-finite potential entry".into()));
            }
        }
        Ok(Self {
            boundary,
            kappa,
            structure,
            weights,
            potential,
        })
    }

    pub fn free(
        structure: HierarchicalStructure,
        weights: WeightSequence,
        kappa: usize,
        boundary: Boundary,
    ) -> Result<Self> {
        Self::new(structure, weights, kappa, boundary, None)
    }

    pub fn dim(&self) -> usize {
        self.structure.volume(self.kappa) as usize
    }

    pub fn structure(&self) -> &HierarchicalStructure {
        &self.structure
    }

    pub fn weights(&self) -> &WeightSequence {
        &self.weights
    }

    pub fn potential(&self) -> Option<&[f64]> {
        self.potential.as_deref()
    }

    fn diagonal_shift(&self) -> f64 {
        match self.boundary {
            Boundary::Neumann => 0.0,
            Boundary::Dirichlet => self.weights.tail(self.kappa),
        }
    }

    /// Apply the Hamiltonian using shared bottom-up cluster-sum passes.
    pub fn apply(&self, psi: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if psi.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: psi.len(),
            });
        }
        let shift = self.diagonal_shift();
        let mut out: Vec<f64> = match &self.potential {
            Some(v) => psi
                .iter()
                .zip(v)
                .map(|(&x, &w)| (w + shift) * x)
                .collect(),
            None => psi.iter().map(|&x| shift * x).collect(),
        };
        // Rank-s block sums built from rank-(s-1) block sums.
        let mut sums = psi.to_vec();
        for s in 1..=self.kappa {
            let n_s = self.structure.factor(s) as usize;
            let blocks = (self.structure.volume(self.kappa) / self.structure.volume(s)) as usize;
            let mut next = vec![0.0; blocks];
            for (b, chunk) in sums.chunks_exact(n_s).enumerate() {
                next[b] = chunk.iter().sum::<f64>();
            }
            sums = next;
            let p_s = self.weights.p(s);
            let vol_s = self.structure.volume(s) as usize;
            let coeff = p_s / vol_s as f64;
            for x in 0..dim {
                out[x] += coeff * sums[x / vol_s];
            }
        }
        Ok(out)
    }

    /// Dense symmetric matrix of the operator. Entry `(x, y)` is
    /// `sum_{s >= d(x,y), s >= 1}^{kappa} p_s / |Q_s|` plus the diagonal
    /// tail shift (Dirichlet) and potential, where `d(x,y)` is the smallest
    /// rank of a common cluster.
    pub fn dense_matrix(&self, cap: usize) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        if dim > cap {
            return Err(Error::Resource(format!(
                "volume {dim} exceeds dense cap {cap}"
            )));
        }
        // c[d] = sum_{s = max(d,1)}^{kappa} p_s / |Q_s|
        let mut c = vec![0.0; self.kappa + 2];
        for d in (1..=self.kappa).rev() {
            c[d] = c[d + 1] + self.weights.p(d) / self.structure.volume(d) as f64;
        }
        c[0] = c[1];
        let shift = self.diagonal_shift();
        let mut m = DMatrix::zeros(dim, dim);
        for x in 0..dim {
            for y in x..dim {
                let d = self.structure.common_rank(x as u64, y as u64);
                let mut entry = c[d];
                if x == y {
                    entry += shift;
                    if let Some(v) = &self.potential {
                        entry += v[x];
                    }
                }
                m[(x, y)] = entry;
                m[(y, x)] = entry;
            }
        }
        Ok(m)
    }
}

/// Eigenvalues with multiplicities, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSpectrum {
    pub pairs: Vec<(f64, u64)>,
}

impl ExactSpectrum {
    /// Expand into the full nondecreasing eigenvalue list.
    pub fn expand(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &(e, m) in &self.pairs {
            out.extend(std::iter::repeat_n(e, m as usize));
        }
        out
    }

    pub fn total_multiplicity(&self) -> u64 {
        self.pairs.iter().map(|&(_, m)| m).sum()
    }
}

/// Closed-form spectrum of the free restriction: eigenvalue `lambda_r`
/// with multiplicity `|Q_kappa|/|Q_r| - |Q_kappa|/|Q_{r+1}|` for
/// `r < kappa`, plus `lambda_kappa` with multiplicity one; the Dirichlet
/// spectrum is shifted by the exact tail.
pub fn exact_free_spectrum(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    kappa: usize,
    boundary: Boundary,
) -> Result<ExactSpectrum> {
    if kappa > structure.max_rank() {
        return Err(Error::Range(format!(
            "kappa = {} exceeds max_rank {}",
            kappa,
            structure.max_rank()
        )));
    }
    let vol = structure.volume(kappa);
    let shift = match boundary {
        Boundary::Neumann => 0.0,
        Boundary::Dirichlet => weights.tail(kappa),
    };
    let mut pairs = Vec::with_capacity(kappa + 1);
    for r in 0..kappa {
        let mult = vol / structure.volume(r) - vol / structure.volume(r + 1);
        pairs.push((weights.lambda(r) + shift, mult));
    }
    pairs.push((weights.lambda(kappa) + shift, 1));
    Ok(ExactSpectrum { pairs })
}

/// Free integrated density of states `N_0(E)` of the infinite-volume
/// Laplacian for a homogeneous structure: `1 - 1/|Q_{r(E)+1}|` with
/// `r(E) = max{r : lambda_r <= E}`, right-continuous, and `N_0(E) = 1`
/// for `E >= 1`.
pub fn ids_free(
    structure: &HierarchicalStructure,
    weights: &WeightSequence,
    energy: f64,
) -> Result<f64> {
    let n = structure.homogeneous_degree().ok_or_else(|| {
        Error::Validation("ids_free requires a homogeneous structure".into())
    })? as f64;
    if energy < 0.0 {
        return Ok(0.0);
    }
    if energy >= 1.0 {
        return Ok(1.0);
    }
    let mut r = 0usize;
    while weights.lambda(r + 1) <= energy + 1e-12 {
        r += 1;
        if r > 4096 {
            // lambda_r -> 1 > E, so this is unreachable for valid weights
            return Err(Error::Domain("lambda_r failed to exceed E".into()));
        }
    }
    Ok(1.0 - n.powi(-(r as i32 + 1)))
}
