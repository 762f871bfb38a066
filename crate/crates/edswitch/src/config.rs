//! Versioned TOML model description.
//!
//! A [`ModelConfig`] names the encoding, the regime chain (duration law and
//! switching table), the emission family and the inference switches. The
//! transition table is written row-stochastically: `rows[i][j]` is the probability
//! of switching from regime `i` to regime `j`.
//!
//! ```toml
//! schema_version = 1
//! encoding = "dec"
//! regimes = 2
//!
//! [duration]
//! family = "uniform"
//! d_min = 2
//! d_max = 6
//!
//! [transition]
//! kind = "uniform-switching"
//!
//! [emission]
//! family = "sarm"
//! a = [[0.9], [-0.5]]
//! sigma = [1.0, 1.0]
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::approx::PruneConfig;
use crate::chains::{DMax, DurationModel, EdChain, Encoding, RegimeTransition};
use crate::edmsm::EdOptions;
use crate::edslgssm::{build_robot_model, Collapse, RobotParams, SlgssmParams};
use crate::error::{Error, Result};
use crate::hmm::SarmCoefficients;
use crate::lgssm::LgssmParams;

pub const SCHEMA_VERSION: u32 = 1;

fn one() -> usize {
    1
}

/// Segment duration law shared by every regime unless the family is per-regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DurationSpec {
    /// Unbounded geometric law with per-regime continuation probability `stay`.
    Geometric {
        stay: Vec<f64>,
        #[serde(default = "one")]
        d_min: usize,
    },
    TruncatedGeometric {
        stay: Vec<f64>,
        #[serde(default = "one")]
        d_min: usize,
        d_max: usize,
    },
    Uniform { d_min: usize, d_max: usize },
    PointMass { d: usize },
    /// Gaussian restricted to `{d_min..d_max}` and renormalized.
    DiscretizedGaussian { mean: f64, variance: f64, d_min: usize, d_max: usize },
    /// `rows[s][d - d_min]`; rows are normalized on load.
    Table { d_min: usize, d_max: usize, rows: Vec<Vec<f64>> },
}

impl DurationSpec {
    pub fn build(&self, num_regimes: usize) -> Result<DurationModel> {
        let per_regime = |v: &[f64], what: &str| -> Result<()> {
            if v.len() == num_regimes {
                Ok(())
            } else {
                Err(Error::Config(format!("duration.{what} has {} entries for {num_regimes} regimes", v.len())))
            }
        };
        match self {
            Self::Geometric { stay, d_min } => {
                per_regime(stay, "stay")?;
                DurationModel::geometric(stay, *d_min)
            }
            Self::TruncatedGeometric { stay, d_min, d_max } => {
                per_regime(stay, "stay")?;
                DurationModel::truncated_geometric(stay, *d_min, *d_max)
            }
            Self::Uniform { d_min, d_max } => DurationModel::uniform(num_regimes, *d_min, *d_max),
            Self::PointMass { d } => DurationModel::point_mass(num_regimes, *d),
            Self::DiscretizedGaussian { mean, variance, d_min, d_max } => {
                DurationModel::discretized_gaussian(num_regimes, *mean, *variance, *d_min, *d_max)
            }
            Self::Table { d_min, d_max, rows } => {
                if rows.len() != num_regimes {
                    return Err(Error::Config(format!("duration.rows has {} rows for {num_regimes} regimes", rows.len())));
                }
                DurationModel::from_weights(*d_min, *d_max, rows.clone())
            }
        }
    }

    /// Explicit table of a bounded law.
    pub fn from_model(d: &DurationModel) -> Result<Self> {
        let DMax::Finite(d_max) = d.d_max() else {
            return Err(Error::Config("only bounded duration laws can be written as a table".into()));
        };
        let d_min = d.d_min();
        let rows = (0..d.num_regimes()).map(|s| (d_min..=d_max).map(|k| d.rho(s, k)).collect()).collect();
        Ok(Self::Table { d_min, d_max, rows })
    }
}

/// Initial-regime vector and regime switching table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransitionSpec {
    /// Uniform start and uniform switching to any other regime.
    UniformSwitching,
    /// `rows[i][j]` is the probability of moving from `i` to `j`.
    Table { initial: Vec<f64>, rows: Vec<Vec<f64>> },
}

impl TransitionSpec {
    pub fn build(&self, num_regimes: usize) -> Result<RegimeTransition> {
        match self {
            Self::UniformSwitching => RegimeTransition::uniform_switching(num_regimes),
            Self::Table { initial, rows } => {
                if initial.len() != num_regimes || rows.len() != num_regimes || rows.iter().any(|r| r.len() != num_regimes) {
                    return Err(Error::Config(format!("transition tables must be sized for {num_regimes} regimes")));
                }
                let to_from: Vec<Vec<f64>> = (0..num_regimes).map(|j| (0..num_regimes).map(|i| rows[i][j]).collect()).collect();
                RegimeTransition::from_rows(initial.clone(), &to_from)
            }
        }
    }

    pub fn from_transition(t: &RegimeTransition) -> Self {
        let s = t.num_regimes();
        Self::Table { initial: t.tilde_pi().to_vec(), rows: (0..s).map(|i| (0..s).map(|j| t.pi(j, i)).collect()).collect() }
    }
}

/// Matrices of one linear Gaussian regime, written row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgssmBlock {
    pub a: Vec<Vec<f64>>,
    pub sigma_h: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma_v: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{what} must be a non-empty rectangular table")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl LgssmBlock {
    pub fn build(&self) -> Result<LgssmParams> {
        LgssmParams::new(
            matrix(&self.a, "a")?,
            matrix(&self.sigma_h, "sigma_h")?,
            matrix(&self.b, "b")?,
            matrix(&self.sigma_v, "sigma_v")?,
            DVector::from_vec(self.mu.clone()),
            matrix(&self.sigma, "sigma")?,
        )
    }

    pub fn from_params(p: &LgssmParams) -> Self {
        Self {
            a: rows_of(&p.a),
            sigma_h: rows_of(&p.sigma_h),
            b: rows_of(&p.b),
            sigma_v: rows_of(&p.sigma_v),
            mu: p.mu.iter().copied().collect(),
            sigma: rows_of(&p.sigma),
        }
    }
}

/// Two-wheeled robot geometry and noise levels (standard deviations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub axle: f64,
    pub step: f64,
    /// Standard deviations of the `(x, y, phi)` process noise.
    pub process_std: [f64; 3],
    pub measurement_std: f64,
    pub init_mean: [f64; 3],
    pub init_std: f64,
    /// Series length used by the robot command.
    #[serde(default = "robot_len")]
    pub length: usize,
}

fn robot_len() -> usize {
    300
}

impl RobotSpec {
    pub fn params(&self, chain_dwell: f64, encoding: Encoding, prune: Option<PruneConfig>) -> RobotParams {
        let sq = |x: f64| x * x;
        RobotParams {
            axle: self.axle,
            step: self.step,
            process_cov: DMatrix::from_diagonal(&DVector::from_iterator(3, self.process_std.iter().map(|&x| sq(x)))),
            measurement_cov: DMatrix::from_diagonal_element(2, 2, sq(self.measurement_std)),
            init_mean: DVector::from_column_slice(&self.init_mean),
            init_cov: DMatrix::from_diagonal_element(3, 3, sq(self.init_std)),
            dwell: chain_dwell,
            encoding,
            prune,
            unscented: Default::default(),
        }
    }
}

/// Observation model attached to every regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmissionSpec {
    /// Switching autoregression; `a[s][i - 1]` multiplies `v_{t-i}`.
    Sarm { a: Vec<Vec<f64>>, sigma: Vec<f64> },
    /// One linear Gaussian state-space block per regime.
    Lgssm { blocks: Vec<LgssmBlock> },
    /// Straight, right and left movements of the two-wheeled robot.
    Robot(RobotSpec),
}

/// Complete model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub encoding: Encoding,
    pub regimes: usize,
    /// At most `i64::MAX`, the largest TOML integer.
    #[serde(default)]
    pub seed: u64,
    /// Observations of a new segment ignore the previous segment.
    #[serde(default)]
    pub asi: bool,
    /// Condition on a segment ending at the last observation.
    #[serde(default)]
    pub condition_end: bool,
    #[serde(default)]
    pub collapse: Collapse,
    /// Default series length for simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    pub duration: DurationSpec,
    pub transition: TransitionSpec,
    pub emission: EmissionSpec,
}

/// Parameters assembled from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub enum Model {
    Sarm { coeffs: SarmCoefficients, chain: EdChain },
    Lgssm { blocks: Vec<LgssmParams>, params: SlgssmParams },
    Robot { robot: RobotParams, params: SlgssmParams },
}

impl ModelConfig {
    /// Two-wheeled robot demo with illustrative geometry and noise levels.
    pub fn robot_default() -> Self {
        let r = RobotParams::default();
        Self {
            schema_version: SCHEMA_VERSION,
            encoding: r.encoding,
            regimes: 3,
            seed: 0,
            asi: false,
            condition_end: false,
            collapse: Collapse::ToOne,
            length: None,
            prune: r.prune,
            duration: DurationSpec::Geometric { stay: vec![r.dwell; 3], d_min: 1 },
            transition: TransitionSpec::UniformSwitching,
            emission: EmissionSpec::Robot(RobotSpec {
                axle: r.axle,
                step: r.step,
                process_std: [0.01, 0.01, 0.005],
                measurement_std: 0.05,
                init_mean: [0.0; 3],
                init_std: r.init_cov[(0, 0)].sqrt(),
                length: robot_len(),
            }),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    /// Checks the schema version and that every section builds.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.regimes == 0 {
            return Err(Error::Config("regimes must be at least 1".into()));
        }
        self.build().map(|_| ())
    }

    pub fn chain(&self) -> Result<EdChain> {
        EdChain::new(self.transition.build(self.regimes)?, self.duration.build(self.regimes)?)
    }

    pub fn options(&self) -> EdOptions {
        EdOptions::default().asi(self.asi).condition_end(self.condition_end)
    }

    pub fn build(&self) -> Result<Model> {
        let chain = self.chain()?;
        match &self.emission {
            EmissionSpec::Sarm { a, sigma } => {
                let coeffs = SarmCoefficients::new(a.clone(), sigma.clone())?;
                if coeffs.num_regimes() != self.regimes {
                    return Err(Error::Config(format!("emission has {} regimes, expected {}", coeffs.num_regimes(), self.regimes)));
                }
                Ok(Model::Sarm { coeffs, chain })
            }
            EmissionSpec::Lgssm { blocks } => {
                if blocks.len() != self.regimes {
                    return Err(Error::Config(format!("emission has {} blocks, expected {}", blocks.len(), self.regimes)));
                }
                let blocks = blocks.iter().map(LgssmBlock::build).collect::<Result<Vec<_>>>()?;
                let params = SlgssmParams::from_lgssm(&blocks, chain, self.encoding)?
                    .asi(self.asi)
                    .collapse(self.collapse)
                    .condition_end(self.condition_end)
                    .prune(self.prune);
                Ok(Model::Lgssm { blocks, params })
            }
            EmissionSpec::Robot(spec) => {
                if self.regimes != 3 {
                    return Err(Error::Config("the robot model has exactly 3 regimes".into()));
                }
                let dwell = match &self.duration {
                    DurationSpec::Geometric { stay, .. } => stay[0],
                    _ => RobotParams::default().dwell,
                };
                let robot = spec.params(dwell, self.encoding, self.prune);
                let mut params = build_robot_model(&robot)?;
                params.chain = chain;
                params.asi = self.asi;
                params.collapse = self.collapse;
                params.condition_end = self.condition_end;
                Ok(Model::Robot { robot, params })
            }
        }
    }
}

impl Model {
    pub fn chain(&self) -> &EdChain {
        match self {
            Model::Sarm { chain, .. } => chain,
            Model::Lgssm { params, .. } | Model::Robot { params, .. } => &params.chain,
        }
    }

    /// Observation dimension.
    pub fn v_dim(&self) -> usize {
        match self {
            Model::Sarm { .. } => 1,
            Model::Lgssm { blocks, .. } => blocks[0].v_dim(),
            Model::Robot { .. } => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAR: &str = include_str!("../../../configs/sar.toml");
    const SEVEN: &str = include_str!("../../../configs/seven_regime.toml");
    const ROBOT: &str = include_str!("../../../configs/robot.toml");

    #[test]
    fn shipped_configs_round_trip() {
        for text in [SAR, SEVEN, ROBOT] {
            let cfg = ModelConfig::from_toml_str(text).unwrap();
            let again = ModelConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(cfg, again);
        }
    }

    #[test]
    fn shipped_robot_config_is_the_default() {
        assert_eq!(ModelConfig::from_toml_str(ROBOT).unwrap(), ModelConfig::robot_default());
        let Model::Robot { robot, .. } = ModelConfig::robot_default().build().unwrap() else { panic!("expected the robot") };
        let d = RobotParams::default();
        assert!((robot.process_cov - d.process_cov).amax() < 1e-18);
        assert!((robot.init_cov - d.init_cov).amax() < 1e-18);
    }

    #[test]
    fn sar_config_builds_the_generator() {
        let cfg = ModelConfig::from_toml_str(SAR).unwrap();
        let Model::Sarm { coeffs, chain } = cfg.build().unwrap() else { panic!("expected a switching AR model") };
        assert_eq!(coeffs.a[0], vec![1.8, -0.92]);
        let mean: f64 = (30..=120).map(|d| d as f64 * chain.rho(0, d)).sum();
        assert!((mean - 75.0).abs() < 0.5, "{mean}");
        assert_eq!(chain.pi(1, 0), 0.5);
    }

    #[test]
    fn transition_rows_are_from_to() {
        let spec = TransitionSpec::Table { initial: vec![1.0, 0.0], rows: vec![vec![0.2, 0.8], vec![1.0, 0.0]] };
        let t = spec.build(2).unwrap();
        assert_eq!(t.pi(1, 0), 0.8);
        assert_eq!(TransitionSpec::from_transition(&t), spec);
    }

    #[test]
    fn rejects_wrong_version_and_unknown_keys() {
        let bumped = SAR.replace("schema_version = 1", "schema_version = 2");
        assert!(matches!(ModelConfig::from_toml_str(&bumped), Err(Error::Config(_))));
        let extra = format!("{SAR}\nbogus = 3\n");
        assert!(ModelConfig::from_toml_str(&extra).is_err());
    }

    #[test]
    fn fitted_duration_table_round_trips() {
        let d = DurationModel::discretized_gaussian(2, 5.0, 2.0, 2, 9).unwrap();
        let spec = DurationSpec::from_model(&d).unwrap();
        let back = spec.build(2).unwrap();
        for s in 0..2 {
            for k in 2..=9 {
                assert!((back.rho(s, k) - d.rho(s, k)).abs() < 1e-15);
            }
        }
        assert!(DurationSpec::from_model(&DurationModel::geometric(&[0.5], 1).unwrap()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn random_configs_round_trip(
            a in proptest::collection::vec(-2.0f64..2.0, 6),
            sigma in proptest::collection::vec(0.01f64..5.0, 3),
            stay in proptest::collection::vec(0.0f64..0.99, 3),
            seed in 0u64..i64::MAX as u64,
            budget in proptest::option::of(1usize..100),
        ) {
            let cfg = ModelConfig {
                schema_version: SCHEMA_VERSION,
                encoding: Encoding::Inc,
                regimes: 3,
                seed,
                asi: seed % 2 == 0,
                condition_end: false,
                collapse: Collapse::ToM(3),
                length: Some(100),
                prune: budget.map(|b| PruneConfig::keep_top(b).unwrap()),
                duration: DurationSpec::Geometric { stay, d_min: 2 },
                transition: TransitionSpec::UniformSwitching,
                emission: EmissionSpec::Sarm { a: a.chunks(2).map(<[f64]>::to_vec).collect(), sigma },
            };
            let text = cfg.to_toml_string().unwrap();
            proptest::prop_assert_eq!(ModelConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }
}
