//! Exponent fits: the van Hove behaviour of the free tail and the
//! Lifshits-type double-log fit of the analytic lower bound.

use hieranderson::analysis::{exponent_fit, exponent_fit_ln, tail_lower_analytic, FitTransform};
use hieranderson::hierarchy::HierarchicalStructure;
use hieranderson::logdomain::LogProb;
use hieranderson::operators::ids_free;
use hieranderson::randomness::SingleSiteDistribution;
use hieranderson::weights::{spectral_dimension, WeightSequence};

fn main() -> hieranderson::Result<()> {
    let s = HierarchicalStructure::homogeneous(2, 8)?;
    let w = WeightSequence::geometric(2.0)?;
    let d_s = spectral_dimension(2, 2.0)?.d_s;

    // free tail: 1 - N_0(1 - E) ~ E^{d_s/2} up to bounded oscillation
    let free_points: Vec<(f64, f64)> = (4..=14)
        .map(|m| {
            let e = 2f64.powi(-m);
            Ok((e, 1.0 - ids_free(&s, &w, 1.0 - e)?))
        })
        .collect::<hieranderson::Result<_>>()?;
    let fit = exponent_fit(&free_points, FitTransform::VanHove)?;
    println!(
        "free tail:     slope {:.4} (target d_s/2 = {}), rms residual {:.3}",
        fit.slope,
        d_s / 2.0,
        fit.residual
    );

    // analytic lower bound under the double-log transform
    let dist = SingleSiteDistribution::uniform(-1.0, 0.0)?;
    let tail_points: Vec<(f64, LogProb)> = (2..=8)
        .map(|m| {
            let e = 2f64.powi(-m);
            Ok((e, tail_lower_analytic(&s, &w, &dist, e)?.value))
        })
        .collect::<hieranderson::Result<_>>()?;
    let fit = exponent_fit_ln(&tail_points, FitTransform::Lifshits)?;
    println!(
        "analytic tail: double-log slope {:.4} (target -d_s/2 = {}), rms residual {:.3}",
        fit.slope,
        -d_s / 2.0,
        fit.residual
    );
    Ok(())
}
