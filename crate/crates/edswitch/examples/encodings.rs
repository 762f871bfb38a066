//! The decreasing-count, increasing-count and count-duration encodings of one
//! explicit-duration model give the same regime posteriors, which agree with
//! brute-force enumeration over all augmented paths of a short series.
//!
//! Run with `cargo run --release --example encodings`.

use edswitch::chains::{substream, DurationModel, EdChain, Encoding, RegimeTransition};
use edswitch::edmsm::{cd, dec, inc, EdOptions, MarkovSegments};
use edswitch::hmm::{GaussianEmission, SarmCoefficients};
use edswitch::oracle::{enumerate_ed, PathEmission};
use rand::Rng;

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

fn main() -> edswitch::Result<()> {
    let chain = EdChain::new(
        RegimeTransition::from_rows(vec![0.6, 0.4], &[vec![0.0, 1.0], vec![1.0, 0.0]])?,
        DurationModel::from_weights(1, 4, vec![vec![1.0, 3.0, 2.0, 1.0], vec![2.0, 1.0, 1.0, 3.0]])?,
    )?;
    let mut rng = substream(2, 0);
    let v: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (means, sds) = ([-1.0, 1.0], [1.0, 0.7]);
    let em = GaussianEmission { means: &means, sds: &sds, v: &v };

    for condition_end in [false, true] {
        let opts = EdOptions::default().condition_end(condition_end);
        let exact = enumerate_ed(&chain, Encoding::Dec, PathEmission::Markov { em: &em, asi: false }, condition_end)?;
        let d = dec::forward_backward(&em, &chain, opts)?.smoothed_regimes();
        let i = inc::forward_backward(&em, &chain, opts)?.smoothed_regimes();
        let c = cd::forward_backward(&MarkovSegments { em: &em, asi: false }, &chain, opts)?.smoothed_regimes();
        println!("condition_end = {condition_end}");
        println!("  dec vs enumeration {:.2e}", max_gap(&d, &exact.smoothed_regimes));
        println!("  inc vs enumeration {:.2e}", max_gap(&i, &exact.smoothed_regimes));
        println!("  cd  vs enumeration {:.2e}", max_gap(&c, &exact.smoothed_regimes));
    }

    let ar = SarmCoefficients::new(vec![vec![0.9], vec![-0.5]], vec![1.0, 0.5])?;
    let sar = ar.emission(&v, 0);
    for asi in [false, true] {
        let opts = EdOptions::default().asi(asi);
        let exact = enumerate_ed(&chain, Encoding::Inc, PathEmission::Markov { em: &sar, asi }, false)?;
        let d = dec::forward_backward(&sar, &chain, opts)?.smoothed_regimes();
        let i = inc::forward_backward(&sar, &chain, opts)?.smoothed_regimes();
        println!("first-order autoregression, asi = {asi}");
        println!("  dec vs enumeration {:.2e}", max_gap(&d, &exact.smoothed_regimes));
        println!("  inc vs enumeration {:.2e}", max_gap(&i, &exact.smoothed_regimes));
    }
    Ok(())
}
