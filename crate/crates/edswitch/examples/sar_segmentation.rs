//! Segments a switching autoregressive series with and without explicit durations.
//!
//! Run with `cargo run --release --example sar_segmentation`.

use edswitch::chains::substream;
use edswitch::synth::{compare_sar, SarProcess};

fn main() -> edswitch::Result<()> {
    let process = SarProcess::three_regime(1.0)?;
    println!("seed  sarm-smooth  sarm-viterbi  gsarm-smooth  gsarm-viterbi");
    for seed in 0..10 {
        let run = process.sample(100, &mut substream(seed, 0))?;
        let c = compare_sar(&process, &run)?;
        println!(
            "{seed:>4}  {:>10.1}%  {:>11.1}%  {:>11.1}%  {:>12.1}%",
            c.sarm_smoothing, c.sarm_viterbi, c.gsarm_smoothing, c.gsarm_viterbi
        );
    }
    Ok(())
}
