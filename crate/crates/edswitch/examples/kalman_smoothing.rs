//! Kalman filtering and RTS smoothing of a noisy constant-velocity track,
//! compared with the exact batch Gaussian posterior.
//!
//! Run with `cargo run --release --example kalman_smoothing`.

use edswitch::chains::substream;
use edswitch::lgssm::{filter, psd_sqrt, rts_smooth, LgssmParams};
use edswitch::oracle::batch_gaussian;
use nalgebra::{dmatrix, dvector, DVector};
use rand_distr::{Distribution, StandardNormal};

fn main() -> edswitch::Result<()> {
    let params = LgssmParams::new(
        dmatrix![1.0, 1.0; 0.0, 1.0],
        dmatrix![0.01, 0.0; 0.0, 0.01],
        dmatrix![1.0, 0.0],
        dmatrix![4.0],
        dvector![0.0, 1.0],
        dmatrix![1.0, 0.0; 0.0, 0.25],
    )?;
    let mut rng = substream(3, 0);
    let mut noise = |n: usize| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let q = psd_sqrt(&params.sigma_h)?;
    let r = psd_sqrt(&params.sigma_v)?;
    let p0 = psd_sqrt(&params.sigma)?;

    let t_len = 30;
    let mut h = &params.mu + &p0 * noise(2);
    let (mut truth, mut v) = (Vec::new(), Vec::new());
    for t in 0..t_len {
        if t > 0 {
            h = &params.a * &h + &q * noise(2);
        }
        v.push(&params.b * &h + &r * noise(1));
        truth.push(h.clone());
    }

    let filtered = filter(&params, &v)?;
    let smoothed = rts_smooth(&params, &filtered.filtered)?;
    let batch = batch_gaussian(&params, &v)?;

    let rmse = |est: &[DVector<f64>]| {
        (est.iter().zip(&truth).map(|(e, h)| (e[0] - h[0]).powi(2)).sum::<f64>() / t_len as f64).sqrt()
    };
    let raw: Vec<DVector<f64>> = v.iter().map(|x| dvector![x[0], 0.0]).collect();
    let f_means: Vec<DVector<f64>> = filtered.filtered.iter().map(|b| b.mean.clone()).collect();
    let s_means: Vec<DVector<f64>> = smoothed.iter().map(|b| b.mean.clone()).collect();
    println!("position RMSE  raw {:.3}  filtered {:.3}  smoothed {:.3}", rmse(&raw), rmse(&f_means), rmse(&s_means));

    let gap = s_means.iter().zip(&batch.means).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    println!("log evidence   recursive {:.6}  batch {:.6}", filtered.log_likelihood(), batch.log_evidence);
    println!("largest |smoothed mean - batch mean| = {gap:.2e}");
    Ok(())
}
