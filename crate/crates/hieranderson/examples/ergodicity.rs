//! Ergodicity ingredients: covariance of the truncated Hamiltonian under
//! the translation group, and concentration of Birkhoff spatial averages.

use hieranderson::analysis::covariance_check;
use hieranderson::hierarchy::HierarchicalStructure;
use hieranderson::randomness::{birkhoff_average, sample_potential, SingleSiteDistribution};
use hieranderson::weights::WeightSequence;

fn main() -> hieranderson::Result<()> {
    let w = WeightSequence::geometric(2.0)?;
    let dist = SingleSiteDistribution::uniform(-1.0, 0.0)?;

    // covariance: conjugating by a translation matches shifting the potential
    let s3 = HierarchicalStructure::homogeneous(2, 3)?;
    let omega = sample_potential(&dist, 8, 17, 0)?.omega;
    let mut worst: f64 = 0.0;
    for k in 0..8u64 {
        let x = s3.index_to_point(k)?;
        worst = worst.max(covariance_check(&s3, &w, 2, 3, &omega, &x)?);
    }
    println!("covariance: max entry deviation over all 8 shifts = {worst:.2e}");

    // Birkhoff averages of the site potential concentrate at the mean
    let r = 12;
    let s = HierarchicalStructure::homogeneous(2, r)?;
    let vol = s.volume(r) as usize;
    let sigma = (1.0 / 12f64.sqrt()) / (vol as f64).sqrt();
    println!("Birkhoff averages over |Q_{r}| = {vol} sites (sigma = {sigma:.2e}):");
    for seed in 0..5u64 {
        let omega = sample_potential(&dist, vol, 100 + seed, 0)?.omega;
        let avg = birkhoff_average(&s, &omega, r, 1, |win| win[0])?;
        println!(
            "  seed {seed}: {avg:.6}  ({:+.2} sigma from -1/2)",
            (avg + 0.5) / sigma
        );
    }
    Ok(())
}
