//! Decodes a seven-regime switching linear series with count-duration extended Viterbi.
//!
//! Run with `cargo run --release --example segment_decoding`.

use std::time::Instant;

use edswitch::chains::substream;
use edswitch::synth::{segment_accuracy, SegmentModel};

fn main() -> edswitch::Result<()> {
    for seed in 0..5 {
        let mut rng = substream(seed, 0);
        let model = SegmentModel::seven_regime(&mut rng)?;
        let run = model.sample(30, &mut rng)?;
        let start = Instant::now();
        let acc = segment_accuracy(&model, &run)?;
        println!("seed {seed}: T = {}  accuracy {:.3}  ({:.2?})", run.v.len(), acc, start.elapsed());
    }
    Ok(())
}
