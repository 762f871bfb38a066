//! Exact inference and learning for explicit-duration Markov switching models.
//!
//! [`dec`], [`inc`] and [`cd`] implement the recursions for the decreasing-count,
//! increasing-count and count-duration encodings. All three return an
//! [`EdPosterior`] over [`SigmaState`]s (the count-duration routines through an
//! intermediate segment table), so results are directly comparable.

pub mod cd;
pub mod dec;
pub mod inc;
pub mod segment;

use crate::chains::{DMax, EdChain, Encoding, RegimeTransition, SigmaState};
use crate::error::{invalid, Error, Result};
use crate::hmm::Emission;
use crate::numeric::argmax;

pub use segment::{LgssmSegments, MarkovSegments, SegmentEmission, SegmentMeanGaussian};

/// Inference switches shared by the encodings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdOptions {
    /// Observations in a new segment do not condition on the previous segment.
    pub asi: bool,
    /// Condition on a segment ending exactly at the last step.
    pub condition_end: bool,
}

impl EdOptions {
    pub fn asi(mut self, on: bool) -> Self {
        self.asi = on;
        self
    }

    pub fn condition_end(mut self, on: bool) -> Self {
        self.condition_end = on;
        self
    }
}

/// Dense index over augmented states up to a count cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    pub encoding: Encoding,
    pub num_regimes: usize,
    pub cap: usize,
}

impl StateSpace {
    pub fn new(encoding: Encoding, num_regimes: usize, cap: usize) -> Self {
        Self { encoding, num_regimes, cap }
    }

    fn per_regime(&self) -> usize {
        match self.encoding {
            Encoding::Cd => self.cap * (self.cap + 1) / 2,
            _ => self.cap,
        }
    }

    pub fn len(&self) -> usize {
        self.num_regimes * self.per_regime()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, sigma: SigmaState) -> Option<usize> {
        let (s, off) = match sigma {
            SigmaState::Dec { s, c } | SigmaState::Inc { s, c } => {
                if c == 0 || c > self.cap {
                    return None;
                }
                (s, c - 1)
            }
            SigmaState::Cd { s, d, c } => {
                if c == 0 || c > d || d > self.cap {
                    return None;
                }
                (s, d * (d - 1) / 2 + c - 1)
            }
        };
        if s >= self.num_regimes || sigma.encoding() != self.encoding {
            return None;
        }
        Some(s * self.per_regime() + off)
    }

    pub fn state(&self, i: usize) -> SigmaState {
        let per = self.per_regime();
        let s = i / per;
        let off = i % per;
        match self.encoding {
            Encoding::Dec => SigmaState::Dec { s, c: off + 1 },
            Encoding::Inc => SigmaState::Inc { s, c: off + 1 },
            Encoding::Cd => {
                let mut d = 1;
                while d * (d + 1) / 2 <= off {
                    d += 1;
                }
                SigmaState::Cd { s, d, c: off - d * (d - 1) / 2 + 1 }
            }
        }
    }

    /// Sums a row over counts (and durations) per regime.
    pub fn regime_marginal(&self, row: &[f64]) -> Vec<f64> {
        let per = self.per_regime();
        (0..self.num_regimes).map(|s| row[s * per..(s + 1) * per].iter().sum()).collect()
    }
}

/// Filtered and smoothed tables over augmented states.
///
/// `alpha[t]` is `p(sigma_t | v_{1:t})`, `gamma[t]` is `p(sigma_t | v_{1:T})` (under
/// the end conditioning when requested), `beta` is scaled so that
/// `gamma ∝ alpha * beta` per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EdPosterior {
    pub space: StateSpace,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Option<Vec<Vec<f64>>>,
    pub gamma: Vec<Vec<f64>>,
    /// `log p(v_t | v_{1:t-1})`.
    pub log_norm: Vec<f64>,
    /// `log p(v_{1:T})`, or `log p(v_{1:T}, end at T)` under end conditioning.
    pub log_likelihood: f64,
}

impl EdPosterior {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn filtered_regimes(&self) -> Vec<Vec<f64>> {
        self.alpha.iter().map(|r| self.space.regime_marginal(r)).collect()
    }

    pub fn smoothed_regimes(&self) -> Vec<Vec<f64>> {
        self.gamma.iter().map(|r| self.space.regime_marginal(r)).collect()
    }

    /// Per-step argmax of the smoothed regime marginals.
    pub fn map_regimes(&self) -> Vec<usize> {
        self.smoothed_regimes().iter().map(|r| argmax(r).unwrap_or(0)).collect()
    }

    pub fn smoothed(&self, t: usize, sigma: SigmaState) -> f64 {
        self.space.index(sigma).map_or(0.0, |i| self.gamma[t][i])
    }

    pub fn filtered(&self, t: usize, sigma: SigmaState) -> f64 {
        self.space.index(sigma).map_or(0.0, |i| self.alpha[t][i])
    }
}

/// Decoded augmented path with its log joint probability.
#[derive(Debug, Clone, PartialEq)]
pub struct EdPath {
    pub sigma: Vec<SigmaState>,
    pub regimes: Vec<usize>,
    pub log_joint: f64,
}

impl EdPath {
    pub(crate) fn new(sigma: Vec<SigmaState>, log_joint: f64) -> Self {
        let regimes = sigma.iter().map(|x| x.regime()).collect();
        Self { sigma, regimes, log_joint }
    }
}

/// Per-step log emissions for every window length, shifted by the per-step maximum.
pub(crate) struct ScaledEmissions {
    /// `e[t][s][lags]` in the linear domain after the shift.
    pub e: Vec<Vec<Vec<f64>>>,
    pub log_e: Vec<Vec<Vec<f64>>>,
    pub shift: Vec<f64>,
    pub order: usize,
}

impl ScaledEmissions {
    pub fn new<E: Emission + ?Sized>(em: &E) -> Result<Self> {
        let k = em.order();
        let mut e = Vec::with_capacity(em.len());
        let mut log_e = Vec::with_capacity(em.len());
        let mut shift = Vec::with_capacity(em.len());
        for t in 0..em.len() {
            let rows: Vec<Vec<f64>> = (0..em.num_regimes())
                .map(|s| (0..=k.min(t)).map(|l| em.log_density(s, t, l)).collect())
                .collect();
            let m = rows.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::Numerical(format!("observation {t} has zero density in every regime")));
            }
            e.push(rows.iter().map(|r| r.iter().map(|&x| (x - m).exp()).collect()).collect());
            log_e.push(rows);
            shift.push(m);
        }
        Ok(Self { e, log_e, shift, order: k })
    }

    /// Scaled emission at `t` in regime `s` with `lags` available past observations.
    #[inline]
    pub fn at(&self, t: usize, s: usize, lags: usize) -> f64 {
        self.e[t][s][lags.min(self.order).min(t)]
    }

    #[inline]
    pub fn log_at(&self, t: usize, s: usize, lags: usize) -> f64 {
        self.log_e[t][s][lags.min(self.order).min(t)]
    }
}

pub(crate) fn check_emission<E: Emission + ?Sized>(chain: &EdChain, em: &E) -> Result<()> {
    if em.is_empty() {
        return invalid("T must be at least 1");
    }
    if em.num_regimes() != chain.num_regimes() {
        return Err(Error::Dimension(format!(
            "emission has {} regimes, chain has {}",
            em.num_regimes(),
            chain.num_regimes()
        )));
    }
    Ok(())
}

/// Largest count represented for a series of length `t_len`.
pub(crate) fn count_cap(chain: &EdChain, t_len: usize) -> usize {
    match chain.d_max() {
        DMax::Finite(d) => d,
        DMax::Unbounded => t_len.max(1),
    }
}

/// Geometric-duration representation of an HMM with switch matrix `pi_hat`.
///
/// The regime switch matrix becomes `pi_hat[j][i] / (1 - pi_hat[i][i])` off the
/// diagonal with a zero diagonal, and durations are geometric with continuation
/// probability `pi_hat[i][i]` (`d_min = 1`, unbounded `d_max`).
pub fn hmm_as_explicit_duration(pi_hat: &RegimeTransition) -> Result<EdChain> {
    let s_count = pi_hat.num_regimes();
    if s_count < 2 {
        return invalid("the map needs at least two regimes");
    }
    let mut pi = nalgebra::DMatrix::zeros(s_count, s_count);
    let mut stay = Vec::with_capacity(s_count);
    for i in 0..s_count {
        let p = pi_hat.pi(i, i);
        if p >= 1.0 {
            return invalid(format!("regime {i} is absorbing"));
        }
        stay.push(p);
        for j in (0..s_count).filter(|&j| j != i) {
            pi[(j, i)] = pi_hat.pi(j, i) / (1.0 - p);
        }
    }
    let tr = RegimeTransition::new(pi_hat.tilde_pi().to_vec(), pi)?;
    EdChain::new(tr, crate::chains::DurationModel::geometric(&stay, 1)?)
}

/// Fixed-width tying of a duration-count row over `d_min..=d_max`: counts are pooled per
/// bin and spread evenly inside it before normalizing.
pub(crate) fn tie_and_normalize(counts: &[f64], width: usize) -> Option<Vec<f64>> {
    let width = width.max(1);
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut out = vec![0.0; counts.len()];
    for (b, chunk) in counts.chunks(width).enumerate() {
        let avg = chunk.iter().sum::<f64>() / chunk.len() as f64;
        for i in 0..chunk.len() {
            out[b * width + i] = avg / total;
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_space_round_trip() {
        for enc in [Encoding::Dec, Encoding::Inc, Encoding::Cd] {
            let sp = StateSpace::new(enc, 3, 4);
            let all = crate::chains::enumerate_states(enc, 3, 4);
            assert_eq!(all.len(), sp.len());
            for (i, &st) in all.iter().enumerate() {
                assert_eq!(sp.index(st), Some(i));
                assert_eq!(sp.state(i), st);
            }
        }
    }

    #[test]
    fn tying_pools_bins() {
        let row = tie_and_normalize(&[1.0, 3.0, 2.0, 2.0, 2.0], 2).unwrap();
        assert_eq!(row, vec![0.2, 0.2, 0.2, 0.2, 0.2]);
        assert!(tie_and_normalize(&[0.0, 0.0], 1).is_none());
    }
}
