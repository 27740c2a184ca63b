//! Eigenvalue computation (dense and iterative), the normalized
//! eigenvalue counting function, and Temple's inequality.

use crate::error::{Error, Result};
use crate::randomness::stream_rng;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

/// Absolute slack on the closed half-line `e(j) <= E` so eigenvalues
/// sitting exactly at grid energies count deterministically.
pub const COUNTING_SLACK: f64 = 1e-12;

/// Full sorted spectrum of a symmetric matrix.
///
/// The input must be symmetric within `1e-12` (absolute). Delegates to a
/// standard symmetric eigensolver; backward stability is spot-checked via
/// the trace identity.
pub fn eigenvalues_dense(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Validation("matrix is not square".into()));
    }
    let mut asym: f64 = 0.0;
    for x in 0..m.nrows() {
        for y in (x + 1)..m.ncols() {
            asym = asym.max((m[(x, y)] - m[(y, x)]).abs());
        }
    }
    if asym > 1e-12 {
        return Err(Error::Validation(format!(
            "matrix asymmetry {asym} exceeds 1e-12"
        )));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(vals)
}

/// Largest eigenvalue of a symmetric operator given only its matvec, via
/// Lanczos with full reorthogonalization. Returns the estimate and the
/// verified residual `||A psi - theta psi||`. The start vector is a
/// deterministic pseudo-random unit vector derived from `seed`.
pub fn max_eigenvalue_iterative<F>(
    apply: F,
    dim: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if dim == 0 {
        return Err(Error::Validation("zero-dimensional operator".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Validation("tolerance must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0x4c61_6e63);
    let mut v = DVector::from_fn(dim, |_, _| rng.gen::<f64>() - 0.5);
    v /= v.norm();

    let mut basis: Vec<DVector<f64>> = vec![v.clone()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);

    for it in 0..max_iter.min(dim + 1) {
        let q = &basis[it];
        let mut w = DVector::from_vec(apply(q.as_slice()));
        let alpha = q.dot(&w);
        alphas.push(alpha);
        w -= q * alpha;
        if it > 0 {
            w -= &basis[it - 1] * betas[it - 1];
        }
        // full reorthogonalization keeps the Ritz values trustworthy
        for b in &basis {
            let c = b.dot(&w);
            w -= b * c;
        }

        // Ritz extraction from the tridiagonal section
        let k = alphas.len();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alphas[i];
            if i + 1 < k {
                t[(i, i + 1)] = betas[i];
                t[(i + 1, i)] = betas[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let (top_idx, &theta) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let u = eig.eigenvectors.column(top_idx);
        let mut ritz = DVector::zeros(dim);
        for (i, b) in basis.iter().enumerate() {
            ritz += b * u[i];
        }
        ritz /= ritz.norm();
        let residual = (DVector::from_vec(apply(ritz.as_slice())) - &ritz * theta).norm();
        if residual < best.1 {
            best = (theta, residual);
        }
        if residual <= tol {
            return Ok((theta, residual));
        }

        let beta = w.norm();
        if beta < 1e-14 {
            // invariant subspace exhausted; the Ritz value is exact
            let residual =
                (DVector::from_vec(apply(ritz.as_slice())) - &ritz * theta).norm();
            if residual <= tol {
                return Ok((theta, residual));
            }
            break;
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: best.1,
    })
}

/// Normalized eigenvalue counting function `(1/dim) #{j : e(j) <= E}`,
/// with the deterministic counting slack.
pub fn counting_function(eigs: &[f64], energy: f64) -> f64 {
    if eigs.is_empty() {
        return 0.0;
    }
    let count = eigs.iter().filter(|&&e| e <= energy + COUNTING_SLACK).count();
    count as f64 / eigs.len() as f64
}

/// First and second moments of a normalized trial vector, plus the
/// second-highest spectral value of the operator.
#[derive(Debug, Clone, Copy)]
pub struct TempleInput {
    /// `<psi, A psi>` for normalized `psi`.
    pub mean_energy: f64,
    /// `<psi, A^2 psi>`.
    pub second_moment: f64,
    /// Second-highest spectral value `E_1(A)`.
    pub e1: f64,
}

/// Temple's inequality: an upper bound on the top eigenvalue,
/// `<A> + var / (<A> - E_1)`, valid when `<A> > E_1`. A violated
/// precondition is an error carrying the deficit, never a silent answer.
pub fn temple_bound(input: TempleInput) -> Result<f64> {
    let variance = input.second_moment - input.mean_energy * input.mean_energy;
    if variance < -1e-12 {
        return Err(Error::Validation(format!(
            "second moment below mean squared by {} (Cauchy-Schwarz violated)",
            -variance
        )));
    }
    let gap = input.mean_energy - input.e1;
    if gap <= 0.0 {
        return Err(Error::TemplePrecondition { deficit: -gap });
    }
    Ok(input.mean_energy + variance.max(0.0) / gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::HierarchicalStructure;
    use crate::operators::{exact_free_spectrum, Boundary, FiniteVolumeHamiltonian};
    use crate::weights::WeightSequence;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_matrix_spectrum() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        assert_eq!(eigenvalues_dense(&m).unwrap(), vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_asymmetric_matrix() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        assert!(eigenvalues_dense(&m).is_err());
    }

    #[test]
    fn free_neumann_matches_closed_form() {
        let s = HierarchicalStructure::homogeneous(2, 3).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let h = FiniteVolumeHamiltonian::free(s.clone(), w.clone(), 3, Boundary::Neumann)
            .unwrap();
        let eigs = eigenvalues_dense(&h.dense_matrix(64).unwrap()).unwrap();
        let exact = exact_free_spectrum(&s, &w, 3, Boundary::Neumann)
            .unwrap()
            .expand();
        for (a, b) in eigs.iter().zip(&exact) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn shift_invariance() {
        let s = HierarchicalStructure::homogeneous(2, 3).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let h = FiniteVolumeHamiltonian::free(s, w, 3, Boundary::Neumann).unwrap();
        let m = h.dense_matrix(64).unwrap();
        let c = 0.37;
        let shifted = &m + DMatrix::identity(8, 8) * c;
        let a = eigenvalues_dense(&m).unwrap();
        let b = eigenvalues_dense(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x + c, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn trace_identity() {
        let s = HierarchicalStructure::homogeneous(3, 3).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let h = FiniteVolumeHamiltonian::free(s, w, 3, Boundary::Dirichlet).unwrap();
        let m = h.dense_matrix(64).unwrap();
        let eigs = eigenvalues_dense(&m).unwrap();
        let tr: f64 = (0..27).map(|i| m[(i, i)]).sum();
        let sum: f64 = eigs.iter().sum();
        assert_relative_eq!(tr, sum, max_relative = 1e-10);
    }

    #[test]
    fn iterative_top_of_free_operators() {
        let s = HierarchicalStructure::homogeneous(2, 8).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let hd = FiniteVolumeHamiltonian::free(s.clone(), w.clone(), 8, Boundary::Dirichlet)
            .unwrap();
        let (top, res) =
            max_eigenvalue_iterative(|v| hd.apply(v).unwrap(), 256, 1e-10, 200, 7).unwrap();
        assert!(res <= 1e-10);
        assert_relative_eq!(top, 1.0, epsilon = 1e-9);

        let hn = FiniteVolumeHamiltonian::free(s, w.clone(), 8, Boundary::Neumann).unwrap();
        let (top, res) =
            max_eigenvalue_iterative(|v| hn.apply(v).unwrap(), 256, 1e-10, 200, 7).unwrap();
        assert!(res <= 1e-10);
        assert_relative_eq!(top, w.lambda(8), epsilon = 1e-9);
    }

    #[test]
    fn iterative_matches_dense_on_random_potential() {
        let s = HierarchicalStructure::homogeneous(2, 5).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let dist = crate::randomness::SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let omega = crate::randomness::sample_potential(&dist, 32, 99, 0)
            .unwrap()
            .omega;
        let h = FiniteVolumeHamiltonian::new(s, w, 5, Boundary::Dirichlet, Some(omega))
            .unwrap();
        let dense_top = *eigenvalues_dense(&h.dense_matrix(64).unwrap())
            .unwrap()
            .last()
            .unwrap();
        let tol = 1e-9;
        let (top, _) =
            max_eigenvalue_iterative(|v| h.apply(v).unwrap(), 32, tol, 200, 3).unwrap();
        assert!((top - dense_top).abs() <= 10.0 * tol);
    }

    #[test]
    fn counting_function_basics() {
        let eigs = vec![0.0, 0.0, 0.5, 1.0];
        assert_eq!(counting_function(&eigs, -0.1), 0.0);
        assert_eq!(counting_function(&eigs, 0.5), 0.75);
        assert_eq!(counting_function(&eigs, 1.0), 1.0);
        assert_eq!(counting_function(&eigs, 2.0), 1.0);
    }

    #[test]
    fn counting_free_neumann_at_half() {
        let s = HierarchicalStructure::homogeneous(2, 3).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let eigs = exact_free_spectrum(&s, &w, 3, Boundary::Neumann)
            .unwrap()
            .expand();
        assert_eq!(counting_function(&eigs, 0.5), 0.75);
    }

    #[test]
    fn temple_examples() {
        // psi is the top eigenvector of diag(0, 2): bound is tight
        let b = temple_bound(TempleInput {
            mean_energy: 2.0,
            second_moment: 4.0,
            e1: 0.0,
        })
        .unwrap();
        assert_relative_eq!(b, 2.0);

        // A = diag(0,1,3), psi = (0, 1/sqrt2, 1/sqrt2)
        let b = temple_bound(TempleInput {
            mean_energy: 2.0,
            second_moment: 5.0,
            e1: 1.0,
        })
        .unwrap();
        assert_relative_eq!(b, 3.0);

        // psi = top basis direction: zero variance
        let b = temple_bound(TempleInput {
            mean_energy: 3.0,
            second_moment: 9.0,
            e1: 1.0,
        })
        .unwrap();
        assert_relative_eq!(b, 3.0);
    }

    #[test]
    fn temple_precondition_error_carries_deficit() {
        let err = temple_bound(TempleInput {
            mean_energy: 0.5,
            second_moment: 1.0,
            e1: 0.75,
        })
        .unwrap_err();
        match err {
            Error::TemplePrecondition { deficit } => assert_relative_eq!(deficit, 0.25),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn weyl_monotonicity_on_bracketing_pairs() {
        // A - B positive semidefinite implies e_A(j) >= e_B(j):
        // decoupled Neumann blocks vs the full Neumann operator
        let s = HierarchicalStructure::homogeneous(2, 3).unwrap();
        let w = WeightSequence::geometric(2.0).unwrap();
        let dist = crate::randomness::SingleSiteDistribution::uniform(-1.0, 0.0).unwrap();
        let omega = crate::randomness::sample_potential(&dist, 8, 5, 0).unwrap().omega;
        let full = FiniteVolumeHamiltonian::new(
            s.clone(),
            w.clone(),
            3,
            Boundary::Neumann,
            Some(omega.clone()),
        )
        .unwrap()
        .dense_matrix(64)
        .unwrap();
        let mut blocks = DMatrix::zeros(8, 8);
        for j in 0..2 {
            let piece = FiniteVolumeHamiltonian::new(
                s.clone(),
                w.clone(),
                2,
                Boundary::Neumann,
                Some(omega[j * 4..(j + 1) * 4].to_vec()),
            )
            .unwrap()
            .dense_matrix(64)
            .unwrap();
            blocks.view_mut((j * 4, j * 4), (4, 4)).copy_from(&piece);
        }
        let ea = eigenvalues_dense(&full).unwrap();
        let eb = eigenvalues_dense(&blocks).unwrap();
        for (a, b) in ea.iter().zip(&eb) {
            assert!(a >= &(b - 1e-10));
        }
    }
}
