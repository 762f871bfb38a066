//! Duration laws: geometric HMM durations, their negative-binomial expansion with a
//! minimum duration, and an explicit table checked against sampled durations.
//!
//! Run with `cargo run --release --example duration_laws`.

use edswitch::chains::{
    expanded_duration_pmf, geometric_pmf, negative_binomial_expansion, negative_binomial_pmf, sample_durations, substream,
    DurationModel, RegimeTransition,
};
use edswitch::edmsm::hmm_as_explicit_duration;

fn main() -> edswitch::Result<()> {
    let hmm = RegimeTransition::from_rows(vec![0.5, 0.5], &[vec![0.9, 0.2], vec![0.1, 0.8]])?;

    let ed = hmm_as_explicit_duration(&hmm)?;
    println!("regime 0 as an explicit-duration chain");
    println!("   d   rho(0, d)   0.9^(d-1) 0.1");
    for d in 1..=6 {
        println!("{d:>4}   {:.6}    {:.6}", ed.rho(0, d), geometric_pmf(0.9, d));
    }

    let d_min = 3;
    let expanded = negative_binomial_expansion(&hmm, d_min)?;
    let pmf = expanded_duration_pmf(&expanded, 0, d_min, 12);
    println!("\nregime 0 with {d_min} chained copies ({} states)", expanded.num_regimes());
    println!("   d   propagated   negative binomial");
    for (i, p) in pmf.iter().enumerate() {
        let d = i + 1;
        println!("{d:>4}   {p:.6}     {:.6}", negative_binomial_pmf(0.9, d_min, d));
    }

    let table = DurationModel::discretized_gaussian(1, 20.0, 16.0, 10, 30)?;
    let hazard = table.to_hazard();
    let draws = sample_durations(&hazard, 0, 50_000, &mut substream(7, 0));
    let mut hist = vec![0usize; 31];
    draws.iter().for_each(|&d| hist[d] += 1);
    let tv: f64 = (10..=30).map(|d| (hist[d] as f64 / draws.len() as f64 - table.rho(0, d)).abs()).sum::<f64>() / 2.0;
    let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
    println!("\ndiscretized Gaussian on 10..=30: sample mean {mean:.3}, total variation to the table {tv:.4}");
    Ok(())
}
