//! Two-wheeled robot with three movement types and noisy position readings.
//!
//! The pose is `h = (x, y, phi)`: the midpoint of the wheel axle and the heading.
//! Each movement advances the right and left wheels by `(DR, DL)`; with
//! `dD = (DR + DL) / 2` and `dphi = (DR - DL) / L` the pose moves by
//! `r dD (cos, sin)(phi + dphi / 2)` and turns by `dphi`, where `r = 1` for the
//! straight move and `r = sin(dphi / 2) / (dphi / 2)` for rotations.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Collapse, Regime, SlgssmParams};
use crate::approx::PruneConfig;
use crate::chains::{sample_chain, DurationModel, EdChain, Encoding, RegimeTransition};
use crate::error::{invalid, Result};
use crate::lgssm::{GaussianBelief, UnscentedDynamics, UnscentedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Movement {
    Straight,
    RightRotation,
    LeftRotation,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Straight, Movement::RightRotation, Movement::LeftRotation];

    /// Right and left wheel distances for a per-step distance `k`.
    pub fn wheels(self, k: f64) -> (f64, f64) {
        match self {
            Movement::Straight => (k, k),
            Movement::RightRotation => (2.0 * k, 0.0),
            Movement::LeftRotation => (0.0, 2.0 * k),
        }
    }
}

/// Noiseless pose update.
pub fn move_pose(h: &DVector<f64>, m: Movement, axle: f64, k: f64) -> DVector<f64> {
    let (dr, dl) = m.wheels(k);
    let dd = 0.5 * (dr + dl);
    let dphi = (dr - dl) / axle;
    let r = match m {
        Movement::Straight => 1.0,
        _ => (0.5 * dphi).sin() / (0.5 * dphi),
    };
    let heading = h[2] + 0.5 * dphi;
    DVector::from_vec(vec![h[0] + r * dd * heading.cos(), h[1] + r * dd * heading.sin(), h[2] + dphi])
}

/// Robot geometry, noise levels and regime dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotParams {
    /// Axle width `L`.
    pub axle: f64,
    /// Per-step wheel distance `k`.
    pub step: f64,
    /// Covariance of `(eta_x, eta_y, eta_phi)`.
    pub process_cov: DMatrix<f64>,
    /// Covariance of the position measurement noise.
    pub measurement_cov: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// Per-step probability of continuing the current movement.
    pub dwell: f64,
    pub encoding: Encoding,
    /// Budget of retained counts per regime; `None` keeps every count.
    pub prune: Option<PruneConfig>,
    pub unscented: UnscentedParams,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            axle: 0.5,
            step: 0.1,
            process_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.01f64.powi(2), 0.01f64.powi(2), 0.005f64.powi(2)])),
            measurement_cov: DMatrix::from_diagonal_element(2, 2, 0.05f64.powi(2)),
            init_mean: DVector::zeros(3),
            init_cov: DMatrix::from_diagonal_element(3, 3, 1e-4),
            dwell: 0.9,
            encoding: Encoding::Inc,
            prune: Some(PruneConfig::keep_top(25).expect("positive budget")),
            unscented: UnscentedParams::default(),
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.axle > 0.0 && self.step > 0.0) {
            return invalid("axle width and step length must be positive");
        }
        if !(self.dwell >= 0.0 && self.dwell < 1.0) {
            return invalid("dwell probability must lie in [0, 1)");
        }
        if self.process_cov.shape() != (3, 3) || self.measurement_cov.shape() != (2, 2) || self.init_cov.shape() != (3, 3) || self.init_mean.len() != 3 {
            return invalid("robot covariances must be 3x3 (process, initial) and 2x2 (measurement)");
        }
        for (name, m) in [("process", &self.process_cov), ("measurement", &self.measurement_cov), ("initial", &self.init_cov)] {
            if m.clone().symmetric_eigenvalues().iter().any(|&e| e < -1e-12) {
                return invalid(format!("{name} covariance is not positive semidefinite"));
            }
        }
        Ok(())
    }

    /// Uniform switching between the three movements with geometric dwell times.
    pub fn chain(&self) -> Result<EdChain> {
        EdChain::new(RegimeTransition::uniform_switching(3)?, DurationModel::geometric(&[self.dwell; 3], 1)?)
    }

    /// Observation matrix selecting `(x, y)`.
    pub fn observation(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }
}

/// Switching model with unscented movement dynamics; segments inherit the pose.
pub fn build_robot_model(robot: &RobotParams) -> Result<SlgssmParams> {
    robot.validate()?;
    let b = robot.observation();
    let prior = GaussianBelief::new(robot.init_mean.clone(), robot.init_cov.clone());
    let regimes = Movement::ALL
        .iter()
        .map(|&m| {
            let (axle, k) = (robot.axle, robot.step);
            let dynamics = UnscentedDynamics {
                f: Box::new(move |h: &DVector<f64>| move_pose(h, m, axle, k)),
                sigma_h: robot.process_cov.clone(),
                params: robot.unscented,
            };
            Regime::new(prior.clone(), Arc::new(dynamics), b.clone(), robot.measurement_cov.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlgssmParams::new(regimes, robot.chain()?, robot.encoding)?
        .asi(false)
        .collapse(Collapse::ToOne)
        .prune(robot.prune))
}

/// Simulated robot run.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotRun {
    pub movements: Vec<usize>,
    pub poses: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

/// Samples `t_len` steps of movements, poses and measurements.
pub fn simulate_robot<R: Rng>(robot: &RobotParams, t_len: usize, rng: &mut R) -> Result<RobotRun> {
    robot.validate()?;
    let movements = sample_chain(Encoding::Inc, &robot.chain()?, t_len, rng)?.regimes;
    simulate_robot_path(robot, movements, rng)
}

/// Samples poses and measurements along a given movement sequence.
pub fn simulate_robot_path<R: Rng>(robot: &RobotParams, movements: Vec<usize>, rng: &mut R) -> Result<RobotRun> {
    robot.validate()?;
    if let Some(&m) = movements.iter().find(|&&m| m >= Movement::ALL.len()) {
        return invalid(format!("movement index {m} out of range"));
    }
    let proc = crate::lgssm::psd_sqrt(&robot.process_cov)?;
    let meas = crate::lgssm::psd_sqrt(&robot.measurement_cov)?;
    let init = crate::lgssm::psd_sqrt(&robot.init_cov)?;
    let mut normals = |n: usize| DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let b = robot.observation();
    let mut poses = Vec::with_capacity(movements.len());
    let mut measurements = Vec::with_capacity(movements.len());
    for (t, &m) in movements.iter().enumerate() {
        let h = if t == 0 {
            &robot.init_mean + &init * normals(3)
        } else {
            move_pose(&poses[t - 1], Movement::ALL[m], robot.axle, robot.step) + &proc * normals(3)
        };
        measurements.push(&b * &h + &meas * normals(2));
        poses.push(h);
    }
    Ok(RobotRun { movements, poses, measurements })
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI { PI } else { w }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_move_from_origin() {
        let h = move_pose(&DVector::zeros(3), Movement::Straight, 0.5, 0.1);
        assert!((h[0] - 0.1).abs() < 1e-15 && h[1].abs() < 1e-15 && h[2].abs() < 1e-15);
    }

    #[test]
    fn rotations_turn_by_two_k_over_l_and_mirror() {
        let h0 = DVector::from_vec(vec![1.0, -2.0, 0.3]);
        let r = move_pose(&h0, Movement::RightRotation, 0.5, 0.1);
        let l = move_pose(&h0, Movement::LeftRotation, 0.5, 0.1);
        assert!((r[2] - h0[2] - 0.4).abs() < 1e-14);
        assert!((l[2] - h0[2] + 0.4).abs() < 1e-14);
        // Mirror images about the heading axis.
        let (c, s) = (h0[2].cos(), h0[2].sin());
        let along = |p: &DVector<f64>| (p[0] - h0[0]) * c + (p[1] - h0[1]) * s;
        let across = |p: &DVector<f64>| -(p[0] - h0[0]) * s + (p[1] - h0[1]) * c;
        assert!((along(&r) - along(&l)).abs() < 1e-14);
        assert!((across(&r) + across(&l)).abs() < 1e-14);
    }

    #[test]
    fn rotation_arc_length_matches_chord() {
        // Rotating about the fixed wheel moves the axle midpoint on a circle of radius L/2.
        let (axle, k) = (0.5, 0.1);
        let h = move_pose(&DVector::zeros(3), Movement::RightRotation, axle, k);
        let dphi = 2.0 * k / axle;
        let chord = 2.0 * (axle / 2.0) * (dphi / 2.0).sin();
        assert!((h.rows(0, 2).norm() - chord).abs() < 1e-14);
    }

    #[test]
    fn wrap() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
    }
}
