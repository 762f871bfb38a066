//! Regime and explicit-duration Markov chains.
//!
//! A regime chain is given by an initial vector `tilde_pi` and a column-stochastic
//! matrix `pi` with `pi[(j, i)] = p(s_t = j | s_{t-1} = i)`. Segment durations are
//! described either by a pmf `rho` on `{d_min..d_max}` ([`DurationModel`]) or by
//! per-count continuation probabilities `lambda` ([`HazardModel`]); the two forms
//! are interconvertible. [`EdChain`] bundles both together with the initial
//! tables used by the three encodings of the augmented state
//! [`SigmaState`]:
//!
//! * decreasing count `(s, c)`: `c` is the number of steps left in the segment;
//! * increasing count `(s, c)`: `c` is the number of steps elapsed in the segment;
//! * count-duration `(s, d, c)`: `d` is the segment duration, `c` the steps left.
//!
//! Regimes and time are zero-based in code; counts and durations are one-based.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{invalid, Error, Result};

/// Tolerance used when validating probability vectors.
pub const PROB_TOL: f64 = 1e-9;

/// Seeded sub-stream `index` of the run stream `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Explicit-duration encoding of the augmented chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Dec,
    Inc,
    Cd,
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Encoding::Dec => "dec",
            Encoding::Inc => "inc",
            Encoding::Cd => "cd",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Encoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dec" => Ok(Encoding::Dec),
            "inc" => Ok(Encoding::Inc),
            "cd" => Ok(Encoding::Cd),
            other => Err(Error::InvalidParameter(format!("unknown encoding {other:?}"))),
        }
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&p| !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) || !p.is_finite()) {
        return invalid(format!("{what}: entries must lie in [0, 1]"));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return invalid(format!("{what}: sums to {sum}, expected 1"));
    }
    Ok(())
}

/// Initial regime vector and regime switch matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeTransition {
    tilde_pi: Vec<f64>,
    pi: DMatrix<f64>,
}

impl RegimeTransition {
    /// Validates `tilde_pi` and the column-stochastic `pi` (`pi[(j, i)] = p(j | i)`).
    pub fn new(tilde_pi: Vec<f64>, pi: DMatrix<f64>) -> Result<Self> {
        let s = tilde_pi.len();
        if s == 0 {
            return invalid("at least one regime is required");
        }
        if pi.nrows() != s || pi.ncols() != s {
            return Err(Error::Dimension(format!(
                "pi is {}x{}, expected {s}x{s}",
                pi.nrows(),
                pi.ncols()
            )));
        }
        check_simplex(&tilde_pi, "tilde_pi")?;
        for i in 0..s {
            let col: Vec<f64> = pi.column(i).iter().copied().collect();
            check_simplex(&col, &format!("pi column {i}"))?;
        }
        Ok(Self { tilde_pi, pi })
    }

    /// Builds from rows `pi_rows[j][i] = p(j | i)`.
    pub fn from_rows(tilde_pi: Vec<f64>, pi_rows: &[Vec<f64>]) -> Result<Self> {
        let s = tilde_pi.len();
        if pi_rows.len() != s || pi_rows.iter().any(|r| r.len() != s) {
            return Err(Error::Dimension(format!("pi must be {s}x{s}")));
        }
        let pi = DMatrix::from_fn(s, s, |j, i| pi_rows[j][i]);
        Self::new(tilde_pi, pi)
    }

    /// Uniform start and uniform switching to any other regime (zero diagonal).
    pub fn uniform_switching(s: usize) -> Result<Self> {
        if s == 1 {
            return Self::new(vec![1.0], DMatrix::from_element(1, 1, 1.0));
        }
        let off = 1.0 / (s - 1) as f64;
        let pi = DMatrix::from_fn(s, s, |j, i| if i == j { 0.0 } else { off });
        Self::new(vec![1.0 / s as f64; s], pi)
    }

    pub fn num_regimes(&self) -> usize {
        self.tilde_pi.len()
    }

    pub fn tilde_pi(&self) -> &[f64] {
        &self.tilde_pi
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pi
    }

    /// `p(s_t = j | s_{t-1} = i)`.
    #[inline]
    pub fn pi(&self, j: usize, i: usize) -> f64 {
        self.pi[(j, i)]
    }

    /// True when every diagonal entry is zero within tolerance.
    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.num_regimes()).all(|i| self.pi[(i, i)].abs() <= PROB_TOL)
    }

    /// Fails unless the diagonal is zero.
    pub fn require_zero_diagonal(&self) -> Result<()> {
        if self.has_zero_diagonal() {
            Ok(())
        } else {
            invalid("pi must have a zero diagonal")
        }
    }
}

/// Upper bound on segment duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DMax {
    Finite(usize),
    Unbounded,
}

impl DMax {
    /// Largest duration that needs representing for a series of length `t_len`.
    pub fn cap(self, t_len: usize) -> usize {
        match self {
            DMax::Finite(d) => d,
            DMax::Unbounded => t_len.max(1),
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, DMax::Finite(_))
    }
}

/// Segment-duration pmf `rho[s][d]` on `{d_min..d_max}` plus initial-segment tables.
///
/// With an unbounded `d_max` the pmf is stored as an explicit head on
/// `{d_min..d_min + len - 1}` followed by a geometric tail of ratio `tail[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationModel {
    d_min: usize,
    d_max: DMax,
    rho: Vec<Vec<f64>>,
    tail: Vec<f64>,
    tilde_rho: Option<Vec<Vec<f64>>>,
    tilde_tilde_rho: Option<Vec<Vec<f64>>>,
}

impl DurationModel {
    /// Finite support; `rows[s][d - d_min]` for `d` in `d_min..=d_max`.
    pub fn from_table(d_min: usize, d_max: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if d_min == 0 || d_min > d_max {
            return invalid(format!("need 1 <= d_min <= d_max, got {d_min}, {d_max}"));
        }
        if rows.is_empty() {
            return invalid("at least one regime is required");
        }
        for (s, row) in rows.iter().enumerate() {
            if row.len() != d_max - d_min + 1 {
                return Err(Error::Dimension(format!(
                    "rho row {s} has {} entries, expected {}",
                    row.len(),
                    d_max - d_min + 1
                )));
            }
            check_simplex(row, &format!("rho row {s}"))?;
        }
        let s = rows.len();
        Ok(Self {
            d_min,
            d_max: DMax::Finite(d_max),
            rho: rows,
            tail: vec![0.0; s],
            tilde_rho: None,
            tilde_tilde_rho: None,
        })
    }

    /// Finite support from unnormalized nonnegative weights, renormalized once.
    pub fn from_weights(d_min: usize, d_max: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut normed = Vec::with_capacity(rows.len());
        for (s, row) in rows.into_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0) || row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
                return invalid(format!("duration weights for regime {s} must be nonnegative with positive sum"));
            }
            normed.push(row.into_iter().map(|w| w / sum).collect());
        }
        Self::from_table(d_min, d_max, normed)
    }

    /// Unbounded support: explicit `head[s]` on `{d_min..}` and geometric tail ratio `tail[s]`.
    pub fn with_geometric_tail(d_min: usize, head: Vec<Vec<f64>>, tail: Vec<f64>) -> Result<Self> {
        if d_min == 0 {
            return invalid("d_min must be at least 1");
        }
        if head.is_empty() || head.len() != tail.len() {
            return Err(Error::Dimension("head and tail must have one entry per regime".into()));
        }
        for (s, (row, &q)) in head.iter().zip(&tail).enumerate() {
            if row.is_empty() {
                return invalid(format!("head row {s} is empty"));
            }
            if !(0.0..1.0).contains(&q) {
                return invalid(format!("tail ratio for regime {s} must lie in [0, 1)"));
            }
            let last = *row.last().unwrap();
            let mass: f64 = row.iter().sum::<f64>() + last * q / (1.0 - q);
            if (mass - 1.0).abs() > PROB_TOL || row.iter().any(|&p| p < 0.0) {
                return invalid(format!("regime {s}: head plus tail mass is {mass}, expected 1"));
            }
        }
        Ok(Self {
            d_min,
            d_max: DMax::Unbounded,
            rho: head,
            tail,
            tilde_rho: None,
            tilde_tilde_rho: None,
        })
    }

    /// Shifted geometric law `rho_d = (1 - p_s) p_s^(d - d_min)` with unbounded support.
    pub fn geometric(p: &[f64], d_min: usize) -> Result<Self> {
        let head = p.iter().map(|&q| vec![1.0 - q]).collect();
        Self::with_geometric_tail(d_min, head, p.to_vec())
    }

    /// Geometric law truncated to `{d_min..d_max}` and renormalized.
    pub fn truncated_geometric(p: &[f64], d_min: usize, d_max: usize) -> Result<Self> {
        let rows = p
            .iter()
            .map(|&q| (d_min..=d_max).map(|d| (1.0 - q) * q.powi((d - d_min) as i32)).collect())
            .collect();
        Self::from_weights(d_min, d_max, rows)
    }

    /// Uniform on `{d_min..d_max}` for `s` regimes.
    pub fn uniform(s: usize, d_min: usize, d_max: usize) -> Result<Self> {
        Self::from_weights(d_min, d_max, vec![vec![1.0; d_max.saturating_sub(d_min) + 1]; s])
    }

    /// Point mass at `d` for every regime.
    pub fn point_mass(s: usize, d: usize) -> Result<Self> {
        Self::from_table(d, d, vec![vec![1.0]; s])
    }

    /// Gaussian density evaluated at the integers of `{d_min..d_max}` and renormalized.
    pub fn discretized_gaussian(s: usize, mean: f64, variance: f64, d_min: usize, d_max: usize) -> Result<Self> {
        if !(variance > 0.0) {
            return invalid("variance must be positive");
        }
        let row: Vec<f64> = (d_min..=d_max)
            .map(|d| (-(d as f64 - mean).powi(2) / (2.0 * variance)).exp())
            .collect();
        Self::from_weights(d_min, d_max, vec![row; s])
    }

    /// Replaces the initial-segment duration table; `rows[s][d - 1]` for `d` in `1..=d_max`.
    pub fn with_tilde_rho(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        let DMax::Finite(d_max) = self.d_max else {
            return invalid("tilde_rho requires a finite d_max");
        };
        if rows.len() != self.rho.len() {
            return Err(Error::Dimension("tilde_rho needs one row per regime".into()));
        }
        for (s, row) in rows.iter().enumerate() {
            if row.len() != d_max {
                return Err(Error::Dimension(format!("tilde_rho row {s} must have {d_max} entries")));
            }
            check_simplex(row, &format!("tilde_rho row {s}"))?;
        }
        self.tilde_rho = Some(rows);
        Ok(self)
    }

    /// Replaces the first-segment end-offset table; `rows[d - 1][c - 1]` for `c` in `1..=d`.
    pub fn with_tilde_tilde_rho(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        let DMax::Finite(d_max) = self.d_max else {
            return invalid("tilde_tilde_rho requires a finite d_max");
        };
        if rows.len() != d_max {
            return Err(Error::Dimension(format!("tilde_tilde_rho needs {d_max} rows")));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Dimension(format!("tilde_tilde_rho row {} must have {} entries", i + 1, i + 1)));
            }
            check_simplex(row, &format!("tilde_tilde_rho row {}", i + 1))?;
        }
        self.tilde_tilde_rho = Some(rows);
        Ok(self)
    }

    pub fn num_regimes(&self) -> usize {
        self.rho.len()
    }

    pub fn d_min(&self) -> usize {
        self.d_min
    }

    pub fn d_max(&self) -> DMax {
        self.d_max
    }

    pub fn has_custom_tilde_rho(&self) -> bool {
        self.tilde_rho.is_some()
    }

    pub fn has_custom_tilde_tilde_rho(&self) -> bool {
        self.tilde_tilde_rho.is_some()
    }

    /// `rho_{s,d}`; zero outside the support.
    pub fn rho(&self, s: usize, d: usize) -> f64 {
        if d < self.d_min {
            return 0.0;
        }
        if let DMax::Finite(m) = self.d_max {
            if d > m {
                return 0.0;
            }
        }
        let head = &self.rho[s];
        let idx = d - self.d_min;
        if idx < head.len() {
            head[idx]
        } else {
            let last = head[head.len() - 1];
            last * self.tail[s].powi((idx + 1 - head.len()) as i32)
        }
    }

    /// Initial-segment duration `tilde_rho_{s,d}` (equal to `rho` unless replaced).
    pub fn tilde_rho(&self, s: usize, d: usize) -> f64 {
        match &self.tilde_rho {
            Some(rows) => rows[s].get(d.wrapping_sub(1)).copied().unwrap_or(0.0),
            None => self.rho(s, d),
        }
    }

    /// Probability that the first segment, of duration `d`, has `c` steps left at `t = 1`.
    /// Defaults to `[c == d]`, i.e. the first segment starts at the first step.
    pub fn tilde_tilde_rho(&self, d: usize, c: usize) -> f64 {
        if c == 0 || c > d {
            return 0.0;
        }
        match &self.tilde_tilde_rho {
            Some(rows) => rows.get(d - 1).map(|r| r[c - 1]).unwrap_or(0.0),
            None => f64::from(u8::from(c == d)),
        }
    }

    /// Dense `rho_{s,d}` for `d` in `1..=cap`.
    pub fn dense_row(&self, s: usize, cap: usize) -> Vec<f64> {
        (1..=cap).map(|d| self.rho(s, d)).collect()
    }

    /// Tail mass `sum_{k >= d} rho_{s,k}`.
    pub fn survival(&self, s: usize, d: usize) -> f64 {
        let head = &self.rho[s];
        let end = self.d_min + head.len() - 1;
        let d = d.max(self.d_min);
        let tail_after_head = match self.d_max {
            DMax::Finite(_) => 0.0,
            DMax::Unbounded => {
                let q = self.tail[s];
                head[head.len() - 1] * q / (1.0 - q)
            }
        };
        if d <= end {
            head[d - self.d_min..].iter().sum::<f64>() + tail_after_head
        } else {
            match self.d_max {
                DMax::Finite(_) => 0.0,
                DMax::Unbounded => self.rho(s, d) / (1.0 - self.tail[s]),
            }
        }
    }

    /// Converts to the hazard form. Initial tables reset to the defaults.
    pub fn to_hazard(&self) -> HazardModel {
        let s_count = self.num_regimes();
        let len = match self.d_max {
            DMax::Finite(m) => m,
            DMax::Unbounded => self.d_min + self.rho[0].len() - 1,
        };
        let mut lambda = vec![vec![0.0; len]; s_count];
        for (s, row) in lambda.iter_mut().enumerate() {
            for (i, l) in row.iter_mut().enumerate() {
                let c = i + 1;
                *l = if c < self.d_min {
                    1.0
                } else {
                    let surv = self.survival(s, c);
                    // Zero tail mass with zero rho: hazard fixed to 0.
                    if surv <= 0.0 {
                        0.0
                    } else {
                        (1.0 - self.rho(s, c) / surv).clamp(0.0, 1.0)
                    }
                };
            }
            if let DMax::Finite(m) = self.d_max {
                row[m - 1] = 0.0;
            }
        }
        // Heads may differ in length across regimes; pad the hazard tables.
        if !self.d_max.is_finite() {
            let max_len = (0..s_count).map(|s| self.d_min + self.rho[s].len() - 1).max().unwrap();
            for (s, row) in lambda.iter_mut().enumerate() {
                row.clear();
                for c in 1..=max_len {
                    row.push(if c < self.d_min {
                        1.0
                    } else {
                        let surv = self.survival(s, c);
                        if surv <= 0.0 { 0.0 } else { (1.0 - self.rho(s, c) / surv).clamp(0.0, 1.0) }
                    });
                }
            }
        }
        HazardModel {
            d_min: self.d_min,
            d_max: self.d_max,
            lambda,
            tail: self.tail.clone(),
            tilde_lambda: vec![vec![1.0]; s_count],
        }
    }
}

/// Hazard form: `lambda_{s,c} = p(duration > c | duration >= c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardModel {
    d_min: usize,
    d_max: DMax,
    lambda: Vec<Vec<f64>>,
    tail: Vec<f64>,
    tilde_lambda: Vec<Vec<f64>>,
}

impl HazardModel {
    /// `lambda[s][c - 1]` for `c` in `1..=len`; counts beyond the table use `tail[s]`
    /// (only meaningful when `d_max` is unbounded).
    pub fn new(d_min: usize, d_max: DMax, lambda: Vec<Vec<f64>>, tail: Vec<f64>) -> Result<Self> {
        if d_min == 0 {
            return invalid("d_min must be at least 1");
        }
        if let DMax::Finite(m) = d_max {
            if m < d_min {
                return invalid("d_max must be at least d_min");
            }
            if lambda.iter().any(|r| r.len() != m) {
                return Err(Error::Dimension(format!("finite hazard tables need {m} entries")));
            }
        }
        if lambda.is_empty() || lambda.len() != tail.len() {
            return Err(Error::Dimension("lambda and tail need one entry per regime".into()));
        }
        for (s, row) in lambda.iter().enumerate() {
            for (i, &l) in row.iter().enumerate() {
                let c = i + 1;
                if !(0.0..=1.0).contains(&l) {
                    return invalid(format!("lambda[{s}][{c}] outside [0, 1]"));
                }
                if c < d_min && (l - 1.0).abs() > PROB_TOL {
                    return invalid(format!("lambda[{s}][{c}] must be 1 below d_min"));
                }
                if let DMax::Finite(m) = d_max {
                    if c >= m && l.abs() > PROB_TOL {
                        return invalid(format!("lambda[{s}][{c}] must be 0 at d_max"));
                    }
                }
            }
            if !(0.0..1.0).contains(&tail[s]) && !d_max.is_finite() {
                return invalid(format!("tail hazard for regime {s} must lie in [0, 1)"));
            }
        }
        let s = lambda.len();
        Ok(Self { d_min, d_max, lambda, tail, tilde_lambda: vec![vec![1.0]; s] })
    }

    /// Constant hazard `lambda_s` with `d_min = 1` and unbounded `d_max` (geometric durations).
    pub fn constant(lambda: &[f64]) -> Result<Self> {
        Self::new(1, DMax::Unbounded, lambda.iter().map(|&l| vec![l]).collect(), lambda.to_vec())
    }

    /// Replaces the initial-count distribution; `rows[s][c - 1]`.
    pub fn with_tilde_lambda(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != self.lambda.len() {
            return Err(Error::Dimension("tilde_lambda needs one row per regime".into()));
        }
        for (s, row) in rows.iter().enumerate() {
            check_simplex(row, &format!("tilde_lambda row {s}"))?;
            if let DMax::Finite(m) = self.d_max {
                if row.len() > m {
                    return Err(Error::Dimension(format!("tilde_lambda row {s} exceeds d_max")));
                }
            }
        }
        self.tilde_lambda = rows;
        Ok(self)
    }

    pub fn num_regimes(&self) -> usize {
        self.lambda.len()
    }

    pub fn d_min(&self) -> usize {
        self.d_min
    }

    pub fn d_max(&self) -> DMax {
        self.d_max
    }

    /// `lambda_{s,c}` with the support constraints applied.
    pub fn lambda(&self, s: usize, c: usize) -> f64 {
        if c < self.d_min {
            return 1.0;
        }
        if let DMax::Finite(m) = self.d_max {
            if c >= m {
                return 0.0;
            }
        }
        let row = &self.lambda[s];
        if c <= row.len() {
            row[c - 1]
        } else {
            self.tail[s]
        }
    }

    /// Initial-count probability `tilde_lambda_{s,c}`.
    pub fn tilde_lambda(&self, s: usize, c: usize) -> f64 {
        if c == 0 {
            return 0.0;
        }
        self.tilde_lambda[s].get(c - 1).copied().unwrap_or(0.0)
    }

    /// True when the first segment is forced to start at the first step.
    pub fn first_segment_starts_at_one(&self) -> bool {
        self.tilde_lambda.iter().all(|r| (r[0] - 1.0).abs() <= PROB_TOL)
    }

    /// Converts to the pmf form. Initial tables reset to the defaults.
    pub fn to_duration(&self) -> Result<DurationModel> {
        let s_count = self.num_regimes();
        match self.d_max {
            DMax::Finite(m) => {
                let mut rows = vec![Vec::with_capacity(m - self.d_min + 1); s_count];
                for (s, row) in rows.iter_mut().enumerate() {
                    let mut surv = 1.0;
                    for d in 1..=m {
                        let l = self.lambda(s, d);
                        if d >= self.d_min {
                            row.push(if d == m { surv } else { surv * (1.0 - l) });
                        }
                        surv *= l;
                    }
                }
                DurationModel::from_table(self.d_min, m, rows)
            }
            DMax::Unbounded => {
                let len = self.lambda.iter().map(Vec::len).max().unwrap_or(0).max(self.d_min);
                let mut head = vec![Vec::new(); s_count];
                for (s, row) in head.iter_mut().enumerate() {
                    let mut surv = 1.0;
                    for d in 1..=len + 1 {
                        let l = self.lambda(s, d);
                        if d >= self.d_min {
                            row.push(surv * (1.0 - l));
                        }
                        surv *= l;
                    }
                }
                DurationModel::with_geometric_tail(self.d_min, head, self.tail.clone())
            }
        }
    }
}

/// Augmented state; regimes zero-based, counts and durations one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SigmaState {
    Dec { s: usize, c: usize },
    Inc { s: usize, c: usize },
    Cd { s: usize, d: usize, c: usize },
}

impl SigmaState {
    pub fn regime(self) -> usize {
        match self {
            SigmaState::Dec { s, .. } | SigmaState::Inc { s, .. } | SigmaState::Cd { s, .. } => s,
        }
    }

    pub fn count(self) -> usize {
        match self {
            SigmaState::Dec { c, .. } | SigmaState::Inc { c, .. } | SigmaState::Cd { c, .. } => c,
        }
    }

    pub fn encoding(self) -> Encoding {
        match self {
            SigmaState::Dec { .. } => Encoding::Dec,
            SigmaState::Inc { .. } => Encoding::Inc,
            SigmaState::Cd { .. } => Encoding::Cd,
        }
    }

    /// True when a new segment begins at the step of `self`, given the previous state.
    pub fn starts_segment(self, prev: Option<SigmaState>) -> bool {
        match (self, prev) {
            (_, None) => true,
            (SigmaState::Inc { c, .. }, Some(_)) => c == 1,
            (_, Some(p)) => p.count() == 1,
        }
    }
}

/// Chain parameters shared by every encoding.
#[derive(Debug, Clone)]
pub struct EdChain {
    transition: RegimeTransition,
    duration: DurationModel,
    hazard: HazardModel,
}

impl EdChain {
    pub fn new(transition: RegimeTransition, duration: DurationModel) -> Result<Self> {
        if transition.num_regimes() != duration.num_regimes() {
            return Err(Error::Dimension(format!(
                "{} regimes in the transition, {} in the duration model",
                transition.num_regimes(),
                duration.num_regimes()
            )));
        }
        let hazard = duration.to_hazard();
        Ok(Self { transition, duration, hazard })
    }

    /// Builds from the hazard form; a custom `tilde_lambda` is kept.
    pub fn from_hazard(transition: RegimeTransition, hazard: HazardModel) -> Result<Self> {
        let duration = hazard.to_duration()?;
        let mut chain = Self::new(transition, duration)?;
        chain.hazard = hazard;
        Ok(chain)
    }

    pub fn with_tilde_lambda(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        self.hazard = self.hazard.with_tilde_lambda(rows)?;
        Ok(self)
    }

    pub fn transition(&self) -> &RegimeTransition {
        &self.transition
    }

    pub fn duration(&self) -> &DurationModel {
        &self.duration
    }

    pub fn hazard(&self) -> &HazardModel {
        &self.hazard
    }

    pub fn num_regimes(&self) -> usize {
        self.transition.num_regimes()
    }

    pub fn d_min(&self) -> usize {
        self.duration.d_min()
    }

    pub fn d_max(&self) -> DMax {
        self.duration.d_max()
    }

    #[inline]
    pub fn pi(&self, j: usize, i: usize) -> f64 {
        self.transition.pi(j, i)
    }

    #[inline]
    pub fn tilde_pi(&self, s: usize) -> f64 {
        self.transition.tilde_pi()[s]
    }

    #[inline]
    pub fn rho(&self, s: usize, d: usize) -> f64 {
        self.duration.rho(s, d)
    }

    #[inline]
    pub fn lambda(&self, s: usize, c: usize) -> f64 {
        self.hazard.lambda(s, c)
    }

    /// Replaces the regime transition, keeping durations.
    pub fn with_transition(&self, transition: RegimeTransition) -> Result<Self> {
        let mut out = Self::new(transition, self.duration.clone())?;
        out.hazard = self.hazard.clone();
        Ok(out)
    }

    /// Replaces the duration model; the hazard form is recomputed.
    pub fn with_duration(&self, duration: DurationModel) -> Result<Self> {
        Self::new(self.transition.clone(), duration)
    }
}

/// Initial probability of `sigma` at the first step.
pub fn initial_probability(chain: &EdChain, sigma: SigmaState) -> f64 {
    match sigma {
        SigmaState::Dec { s, c } => chain.tilde_pi(s) * chain.duration.tilde_rho(s, c),
        SigmaState::Inc { s, c } => chain.tilde_pi(s) * chain.hazard.tilde_lambda(s, c),
        SigmaState::Cd { s, d, c } => {
            chain.tilde_pi(s) * chain.duration.tilde_rho(s, d) * chain.duration.tilde_tilde_rho(d, c)
        }
    }
}

/// `p(sigma_t = next | sigma_{t-1} = prev)`.
pub fn transition_kernel(encoding: Encoding, prev: SigmaState, next: SigmaState, chain: &EdChain) -> Result<f64> {
    if prev.encoding() != encoding || next.encoding() != encoding {
        let found = if prev.encoding() != encoding { prev.encoding() } else { next.encoding() };
        return Err(Error::EncodingMismatch { expected: encoding.to_string(), found: found.to_string() });
    }
    let p = match (prev, next) {
        (SigmaState::Dec { s: i, c }, SigmaState::Dec { s: j, c: c2 }) => {
            if c > 1 {
                f64::from(u8::from(i == j && c2 + 1 == c))
            } else {
                chain.pi(j, i) * chain.rho(j, c2)
            }
        }
        (SigmaState::Inc { s: i, c }, SigmaState::Inc { s: j, c: c2 }) => {
            let l = chain.lambda(i, c);
            if c2 == c + 1 && i == j {
                l
            } else if c2 == 1 {
                (1.0 - l) * chain.pi(j, i)
            } else {
                0.0
            }
        }
        (SigmaState::Cd { s: i, d, c }, SigmaState::Cd { s: j, d: d2, c: c2 }) => {
            if c > 1 {
                f64::from(u8::from(i == j && d == d2 && c2 + 1 == c))
            } else if c2 == d2 {
                chain.pi(j, i) * chain.rho(j, d2)
            } else {
                0.0
            }
        }
        _ => unreachable!("encodings checked above"),
    };
    Ok(p)
}

/// All states of `encoding` with counts (and durations) up to `cap`.
pub fn enumerate_states(encoding: Encoding, num_regimes: usize, cap: usize) -> Vec<SigmaState> {
    let mut out = Vec::new();
    for s in 0..num_regimes {
        match encoding {
            Encoding::Dec => out.extend((1..=cap).map(|c| SigmaState::Dec { s, c })),
            Encoding::Inc => out.extend((1..=cap).map(|c| SigmaState::Inc { s, c })),
            Encoding::Cd => {
                for d in 1..=cap {
                    out.extend((1..=d).map(|c| SigmaState::Cd { s, d, c }));
                }
            }
        }
    }
    out
}

/// A realized segment of a regime path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub regime: usize,
}

/// Segments of a sampled augmented path.
pub fn segments(path: &[SigmaState]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &sigma) in path.iter().enumerate() {
        let prev = if t == 0 { None } else { Some(path[t - 1]) };
        if sigma.starts_segment(prev) {
            out.push(Segment { start: t, len: 1, regime: sigma.regime() });
        } else if let Some(last) = out.last_mut() {
            last.len += 1;
        }
    }
    out
}

/// Segments of a plain regime path, splitting only where the regime changes.
pub fn runs(regimes: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &s) in regimes.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.regime == s => last.len += 1,
            _ => out.push(Segment { start: t, len: 1, regime: s }),
        }
    }
    out
}

fn sample_categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws a regime from column `prev` of `pi`, or from `tilde_pi` when `prev` is `None`.
pub fn sample_regime<R: Rng>(transition: &RegimeTransition, prev: Option<usize>, rng: &mut R) -> usize {
    match prev {
        None => sample_categorical(transition.tilde_pi(), rng),
        Some(i) => {
            let col: Vec<f64> = transition.matrix().column(i).iter().copied().collect();
            sample_categorical(&col, rng)
        }
    }
}

/// Draws a segment duration for regime `s` by walking the hazard.
pub fn sample_duration<R: Rng>(hazard: &HazardModel, s: usize, rng: &mut R) -> usize {
    let mut d = 1;
    while rng.gen::<f64>() < hazard.lambda(s, d) {
        d += 1;
    }
    d
}

/// Result of [`sample_chain`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub sigma: Vec<SigmaState>,
    pub regimes: Vec<usize>,
}

fn sample_initial_duration<R: Rng>(chain: &EdChain, s: usize, rng: &mut R) -> usize {
    if chain.duration.has_custom_tilde_rho() {
        let cap = chain.d_max().cap(1);
        let w: Vec<f64> = (1..=cap).map(|d| chain.duration.tilde_rho(s, d)).collect();
        sample_categorical(&w, rng) + 1
    } else {
        sample_duration(&chain.hazard, s, rng)
    }
}

/// Samples `sigma_{1:T}` and the induced regimes under `encoding`.
pub fn sample_chain<R: Rng>(encoding: Encoding, chain: &EdChain, t_len: usize, rng: &mut R) -> Result<ChainSample> {
    if t_len == 0 {
        return invalid("T must be at least 1");
    }
    let mut sigma = Vec::with_capacity(t_len);
    let s0 = sample_regime(&chain.transition, None, rng);
    let first = match encoding {
        Encoding::Dec => SigmaState::Dec { s: s0, c: sample_initial_duration(chain, s0, rng) },
        Encoding::Inc => {
            let w = &chain.hazard.tilde_lambda[s0];
            SigmaState::Inc { s: s0, c: sample_categorical(w, rng) + 1 }
        }
        Encoding::Cd => {
            let d = sample_initial_duration(chain, s0, rng);
            let w: Vec<f64> = (1..=d).map(|c| chain.duration.tilde_tilde_rho(d, c)).collect();
            SigmaState::Cd { s: s0, d, c: sample_categorical(&w, rng) + 1 }
        }
    };
    sigma.push(first);
    for _ in 1..t_len {
        let prev = *sigma.last().unwrap();
        let next = match prev {
            SigmaState::Dec { s, c } if c > 1 => SigmaState::Dec { s, c: c - 1 },
            SigmaState::Dec { s, .. } => {
                let j = sample_regime(&chain.transition, Some(s), rng);
                SigmaState::Dec { s: j, c: sample_duration(&chain.hazard, j, rng) }
            }
            SigmaState::Inc { s, c } => {
                if rng.gen::<f64>() < chain.lambda(s, c) {
                    SigmaState::Inc { s, c: c + 1 }
                } else {
                    SigmaState::Inc { s: sample_regime(&chain.transition, Some(s), rng), c: 1 }
                }
            }
            SigmaState::Cd { s, d, c } if c > 1 => SigmaState::Cd { s, d, c: c - 1 },
            SigmaState::Cd { s, .. } => {
                let j = sample_regime(&chain.transition, Some(s), rng);
                let d = sample_duration(&chain.hazard, j, rng);
                SigmaState::Cd { s: j, d, c: d }
            }
        };
        sigma.push(next);
    }
    let regimes = sigma.iter().map(|x| x.regime()).collect();
    Ok(ChainSample { sigma, regimes })
}

/// Draws `n` segment durations of regime `s`.
pub fn sample_durations<R: Rng>(hazard: &HazardModel, s: usize, n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| sample_duration(hazard, s, rng)).collect()
}

/// Geometric duration pmf `pi_ii^(d-1) (1 - pi_ii)` of a self-transition probability.
pub fn geometric_pmf(pi_ii: f64, d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    pi_ii.powi(d as i32 - 1) * (1.0 - pi_ii)
}

/// Negative-binomial duration pmf `C(d-1, d_min-1) pi_ii^(d-d_min) (1-pi_ii)^d_min`.
pub fn negative_binomial_pmf(pi_ii: f64, d_min: usize, d: usize) -> f64 {
    if d < d_min || d_min == 0 {
        return 0.0;
    }
    let mut log_binom = 0.0;
    for k in 0..(d_min - 1) {
        log_binom += ((d - 1 - k) as f64).ln() - ((k + 1) as f64).ln();
    }
    let log_p = log_binom + (d - d_min) as f64 * pi_ii.ln() + d_min as f64 * (1.0 - pi_ii).ln();
    if pi_ii == 0.0 {
        return f64::from(u8::from(d == d_min));
    }
    log_p.exp()
}

/// Replaces each regime `i` by `d_min` ordered copies `i * d_min + r`.
///
/// A copy stays with probability `pi_ii` or advances to the next copy; the last copy
/// stays or jumps to the first copy of regime `j` with probability `pi_ji`. The time
/// spent in the copies of a regime is negative-binomial.
pub fn negative_binomial_expansion(pi_hat: &RegimeTransition, d_min: usize) -> Result<RegimeTransition> {
    if d_min == 0 {
        return invalid("d_min must be at least 1");
    }
    if d_min == 1 {
        return Ok(pi_hat.clone());
    }
    let s = pi_hat.num_regimes();
    let n = s * d_min;
    let mut pi = DMatrix::zeros(n, n);
    let mut tilde = vec![0.0; n];
    for i in 0..s {
        tilde[i * d_min] = pi_hat.tilde_pi()[i];
        let stay = pi_hat.pi(i, i);
        for r in 0..d_min {
            let from = i * d_min + r;
            pi[(from, from)] = stay;
            if r + 1 < d_min {
                pi[(from + 1, from)] = 1.0 - stay;
            } else {
                for j in (0..s).filter(|&j| j != i) {
                    pi[(j * d_min, from)] = pi_hat.pi(j, i);
                }
            }
        }
    }
    RegimeTransition::new(tilde, pi)
}

/// Duration pmf of super-regime `i` of an expanded chain, for `d` in `1..=d_len`,
/// computed by propagating mass through the copies until absorption.
pub fn expanded_duration_pmf(expanded: &RegimeTransition, i: usize, d_min: usize, d_len: usize) -> Vec<f64> {
    let base = i * d_min;
    let mut mass = vec![0.0; d_min];
    mass[0] = 1.0;
    let mut pmf = Vec::with_capacity(d_len);
    for _ in 0..d_len {
        let mut next = vec![0.0; d_min];
        let mut leave = 0.0;
        for r in 0..d_min {
            let from = base + r;
            for (r2, slot) in next.iter_mut().enumerate() {
                *slot += mass[r] * expanded.pi(base + r2, from);
            }
            let inside: f64 = (0..d_min).map(|r2| expanded.pi(base + r2, from)).sum();
            leave += mass[r] * (1.0 - inside);
        }
        pmf.push(leave);
        mass = next;
    }
    pmf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_regime_chain() -> EdChain {
        let tr = RegimeTransition::from_rows(vec![0.3, 0.7], &[vec![0.2, 0.6], vec![0.8, 0.4]]).unwrap();
        let dur = DurationModel::from_table(2, 4, vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        EdChain::new(tr, dur).unwrap()
    }

    #[test]
    fn geometric_hazard_is_constant() {
        let dur = DurationModel::geometric(&[0.7, 0.25], 1).unwrap();
        let hz = dur.to_hazard();
        for c in 1..40 {
            assert!((hz.lambda(0, c) - 0.7).abs() < 1e-12);
            assert!((hz.lambda(1, c) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_hazard() {
        let hz = DurationModel::point_mass(1, 4).unwrap().to_hazard();
        assert_eq!(hz.lambda(0, 1), 1.0);
        assert_eq!(hz.lambda(0, 3), 1.0);
        assert_eq!(hz.lambda(0, 4), 0.0);
    }

    #[test]
    fn finite_round_trip() {
        let chain = two_regime_chain();
        let back = chain.hazard().to_duration().unwrap();
        for s in 0..2 {
            for d in 1..=5 {
                assert!((back.rho(s, d) - chain.rho(s, d)).abs() < 1e-12);
            }
        }
        assert_eq!(chain.lambda(0, 4), 0.0);
    }

    #[test]
    fn unbounded_round_trip() {
        let dur = DurationModel::with_geometric_tail(2, vec![vec![0.3, 0.2, 0.25]], vec![0.5]).unwrap();
        let back = dur.to_hazard().to_duration().unwrap();
        for d in 1..60 {
            assert!((back.rho(0, d) - dur.rho(0, d)).abs() < 1e-12, "d={d}");
        }
    }

    #[test]
    fn kernels_are_stochastic() {
        let chain = two_regime_chain();
        for enc in [Encoding::Dec, Encoding::Inc, Encoding::Cd] {
            let states = enumerate_states(enc, 2, 4);
            for &p in &states {
                let total: f64 = states.iter().map(|&n| transition_kernel(enc, p, n, &chain).unwrap()).sum();
                let reachable = match p {
                    SigmaState::Cd { d, .. } => d >= chain.d_min(),
                    _ => true,
                };
                if reachable {
                    assert!((total - 1.0).abs() < 1e-12, "{enc} {p:?} {total}");
                }
            }
        }
    }

    #[test]
    fn kernel_examples() {
        let chain = two_regime_chain();
        let k = |e, a, b| transition_kernel(e, a, b, &chain).unwrap();
        assert_eq!(k(Encoding::Dec, SigmaState::Dec { s: 1, c: 3 }, SigmaState::Dec { s: 1, c: 2 }), 1.0);
        let l = chain.lambda(0, 2);
        assert_eq!(k(Encoding::Inc, SigmaState::Inc { s: 0, c: 2 }, SigmaState::Inc { s: 0, c: 3 }), l);
        let p = k(Encoding::Cd, SigmaState::Cd { s: 0, d: 3, c: 1 }, SigmaState::Cd { s: 1, d: 2, c: 2 });
        assert!((p - 0.8 * 0.6).abs() < 1e-15);
        assert!(transition_kernel(Encoding::Dec, SigmaState::Inc { s: 0, c: 1 }, SigmaState::Dec { s: 0, c: 1 }, &chain)
            .is_err());
    }

    #[test]
    fn point_mass_boundaries() {
        let tr = RegimeTransition::uniform_switching(2).unwrap();
        let chain = EdChain::new(tr, DurationModel::point_mass(2, 3).unwrap()).unwrap();
        for enc in [Encoding::Dec, Encoding::Inc, Encoding::Cd] {
            let sample = sample_chain(enc, &chain, 9, &mut substream(5, 0)).unwrap();
            let starts: Vec<usize> = segments(&sample.sigma).iter().map(|s| s.start).collect();
            assert_eq!(starts, vec![0, 3, 6], "{enc}");
        }
    }

    #[test]
    fn zero_diagonal_never_repeats() {
        let tr = RegimeTransition::uniform_switching(3).unwrap();
        let chain = EdChain::new(tr, DurationModel::uniform(3, 1, 4).unwrap()).unwrap();
        let sample = sample_chain(Encoding::Dec, &chain, 500, &mut substream(1, 2)).unwrap();
        let segs = segments(&sample.sigma);
        assert!(segs.windows(2).all(|w| w[0].regime != w[1].regime));
    }

    #[test]
    fn expansion_identity_and_closed_form() {
        let tr = RegimeTransition::from_rows(vec![0.5, 0.5], &[vec![0.5, 0.3], vec![0.5, 0.7]]).unwrap();
        assert_eq!(negative_binomial_expansion(&tr, 1).unwrap(), tr);
        assert!((negative_binomial_pmf(0.5, 5, 5) - 0.03125).abs() < 1e-15);
        let big = negative_binomial_expansion(&tr, 5).unwrap();
        let pmf = expanded_duration_pmf(&big, 0, 5, 30);
        for d in 1..=30 {
            assert!((pmf[d - 1] - negative_binomial_pmf(0.5, 5, d)).abs() < 1e-10);
        }
    }
}
