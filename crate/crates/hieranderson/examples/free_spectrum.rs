//! Closed-form spectrum of the free finite-volume Laplacian, checked
//! against dense diagonalization.

use hieranderson::hierarchy::HierarchicalStructure;
use hieranderson::operators::{exact_free_spectrum, Boundary, FiniteVolumeHamiltonian};
use hieranderson::spectra::eigenvalues_dense;
use hieranderson::weights::WeightSequence;

fn main() -> hieranderson::Result<()> {
    let kappa = 3;
    let s = HierarchicalStructure::homogeneous(2, kappa)?;
    let w = WeightSequence::geometric(2.0)?;

    for boundary in [Boundary::Neumann, Boundary::Dirichlet] {
        let spec = exact_free_spectrum(&s, &w, kappa, boundary)?;
        println!("{boundary} restriction, kappa = {kappa}:");
        for (e, mult) in &spec.pairs {
            println!("  lambda = {e:<8} multiplicity {mult}");
        }
        let h = FiniteVolumeHamiltonian::free(s.clone(), w.clone(), kappa, boundary)?;
        let dense = eigenvalues_dense(&h.dense_matrix(4096)?)?;
        let dev = dense
            .iter()
            .zip(spec.expand())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!("  max deviation from dense diagonalization: {dev:.2e}\n");
    }
    Ok(())
}
