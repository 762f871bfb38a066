//! Loads a shipped model configuration, simulates from it and decodes the result.
//!
//! Run with `cargo run --release --example config_model [path/to/config.toml]`.

use edswitch::chains::{sample_chain, substream};
use edswitch::config::{Model, ModelConfig};
use edswitch::edmsm::{dec, inc, EdOptions};
use edswitch::synth::{segmentation_error, simulate_sarm};

fn main() -> edswitch::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/sar.toml").to_string());
    let cfg = ModelConfig::load(std::path::Path::new(&path))?;
    println!("{path}: {} encoding, {} regimes, seed {}", cfg.encoding, cfg.regimes, cfg.seed);

    let Model::Sarm { coeffs, chain } = cfg.build()? else {
        println!("this example decodes autoregressive configurations only");
        return Ok(());
    };
    let mut rng = substream(cfg.seed, 0);
    let t_len = cfg.length.unwrap_or(2000).min(3000);
    let sample = sample_chain(cfg.encoding, &chain, t_len, &mut rng)?;
    let v = simulate_sarm(&coeffs, &sample.sigma, cfg.asi, &mut rng);

    let em = coeffs.emission(&v, 0);
    let opts = EdOptions::default().asi(cfg.asi).condition_end(cfg.condition_end);
    let (smoothed, path) = match cfg.encoding {
        edswitch::chains::Encoding::Inc => (inc::forward_backward(&em, &chain, opts)?, inc::viterbi(&em, &chain, opts)?),
        _ => (dec::forward_backward(&em, &chain, opts)?, dec::viterbi(&em, &chain, opts)?),
    };
    println!("T = {t_len}");
    println!("smoothing error {:.2}%", segmentation_error(&smoothed.map_regimes(), &sample.regimes));
    println!("viterbi error   {:.2}%", segmentation_error(&path.regimes, &sample.regimes));
    Ok(())
}
