//! Learns a duration table and switch matrix by EM over whole segments, starting
//! from a flat duration guess.
//!
//! Run with `cargo run --release --example duration_learning`.

use edswitch::chains::{sample_chain, substream, DurationModel, EdChain, Encoding, RegimeTransition};
use edswitch::edmsm::{cd, EdOptions, MarkovSegments};
use edswitch::hmm::GaussianEmission;
use rand_distr::{Distribution, Normal};

fn main() -> edswitch::Result<()> {
    let means = [0.0, 2.0];
    let sds = [1.0; 2];
    let (d_min, d_max) = (1, 40);
    let truth = EdChain::new(
        RegimeTransition::uniform_switching(2)?,
        DurationModel::discretized_gaussian(2, 20.0, 16.0, d_min, d_max)?,
    )?;
    let mut rng = substream(5, 0);
    let path = sample_chain(Encoding::Cd, &truth, 8000, &mut rng)?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = path.regimes.iter().map(|&s| means[s] + noise.sample(&mut rng)).collect();

    let seg = MarkovSegments { em: GaussianEmission { means: &means, sds: &sds, v: &v }, asi: false };
    let flat = EdChain::new(RegimeTransition::uniform_switching(2)?, DurationModel::uniform(2, d_min, d_max)?)?;
    let (fitted, trace) = cd::em_chain(&seg, &flat, EdOptions::default(), 4, 30)?;

    let ll = &trace.log_likelihood;
    println!("log likelihood {:.2} -> {:.2} over {} iterations", ll[0], ll[ll.len() - 1], ll.len() - 1);
    println!("largest decrease {:.2e}", trace.max_decrease());
    let mean = |c: &EdChain, s: usize| (d_min..=d_max).map(|d| d as f64 * c.rho(s, d)).sum::<f64>();
    for s in 0..2 {
        println!("regime {s}: mean duration true {:.2}, fitted {:.2}", mean(&truth, s), mean(&fitted, s));
    }
    println!("   d   true    fitted (regime 0)");
    for d in (10..=30).step_by(2) {
        println!("{d:>4}   {:.4}  {:.4}", truth.rho(0, d), fitted.rho(0, d));
    }
    Ok(())
}
