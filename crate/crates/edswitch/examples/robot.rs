//! Localizes a simulated two-wheeled robot from noisy position readings.
//!
//! Run with `cargo run --release --example robot`.

use std::time::Instant;

use edswitch::chains::substream;
use edswitch::edslgssm::robot::simulate_robot;
use edswitch::edslgssm::smooth::filter_smooth;
use edswitch::edslgssm::{build_robot_model, RobotParams};
use nalgebra::DVector;

fn rmse(est: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let sq: f64 = est.iter().zip(truth).map(|(e, h)| (e[0] - h[0]).powi(2) + (e[1] - h[1]).powi(2)).sum();
    (sq / est.len() as f64).sqrt()
}

fn main() -> edswitch::Result<()> {
    let robot = RobotParams::default();
    let model = build_robot_model(&robot)?;
    let start = Instant::now();
    for seed in 0..3 {
        let run = simulate_robot(&robot, 300, &mut substream(seed, 0))?;
        let (filtered, smoothed) = filter_smooth(&model, &run.measurements)?;
        let raw = rmse(&run.measurements, &run.poses);
        let f = rmse(&filtered.means()?, &run.poses);
        let s = rmse(&smoothed.means()?, &run.poses);
        let hits = smoothed.map_regimes().iter().zip(&run.movements).filter(|(a, b)| a == b).count();
        println!(
            "seed {seed}: raw {raw:.4}  filtered {f:.4}  smoothed {s:.4}  gain {:.2}x  movement accuracy {:.2}",
            raw / s,
            hits as f64 / run.movements.len() as f64
        );
    }
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
