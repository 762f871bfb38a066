//! Increasing-count smoothing with a per-regime count budget, against the dense
//! recursion, on a piecewise-constant mean series.
//!
//! Run with `cargo run --release --example changepoints`.

use std::time::Instant;

use edswitch::approx::{inc_smooth_pruned, PruneConfig};
use edswitch::chains::{sample_chain, substream, DurationModel, EdChain, Encoding, RegimeTransition};
use edswitch::edmsm::{inc, EdOptions};
use edswitch::hmm::GaussianEmission;
use rand_distr::{Distribution, Normal};

fn main() -> edswitch::Result<()> {
    let means = [-2.0, 0.0, 2.0];
    let sds = [1.0; 3];
    let chain = EdChain::new(
        RegimeTransition::uniform_switching(3)?,
        DurationModel::discretized_gaussian(3, 60.0, 400.0, 1, 150)?,
    )?;
    let mut rng = substream(11, 0);
    let path = sample_chain(Encoding::Inc, &chain, 1500, &mut rng)?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = path.regimes.iter().map(|&s| means[s] + noise.sample(&mut rng)).collect();
    let em = GaussianEmission { means: &means, sds: &sds, v: &v };
    let opts = EdOptions::default();

    let start = Instant::now();
    let dense = inc::forward_backward(&em, &chain, opts)?;
    let dense_time = start.elapsed();
    let exact = dense.smoothed_regimes();
    let starts: Vec<usize> = (1..v.len()).filter(|&t| path.sigma[t].count() == 1).collect();
    println!("T = {}, {} true changepoints, dense smoothing {:.2?}", v.len(), starts.len(), dense_time);

    println!("budget  time        max |p - p_dense|  detected");
    for budget in [5, 10, 25, 50] {
        let cfg = PruneConfig::keep_top(budget)?;
        let start = Instant::now();
        let pruned = inc_smooth_pruned(&em, &chain, opts, &cfg)?;
        let elapsed = start.elapsed();
        let gap = pruned
            .smoothed_regimes()
            .iter()
            .zip(&exact)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        let cp = pruned.changepoint_marginals();
        let hits = starts.iter().filter(|&&t| (t.saturating_sub(3)..(t + 4).min(cp.len())).any(|u| cp[u] > 0.5)).count();
        println!("{budget:>6}  {elapsed:>10.2?}  {gap:>17.2e}  {hits}/{}", starts.len());
    }
    Ok(())
}
