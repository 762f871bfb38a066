//! Synthetic benchmarks: a switching autoregressive process with long Gaussian
//! durations, and a seven-regime switching linear model with reset segments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chains::{runs, sample_regime, DurationModel, EdChain, Encoding, RegimeTransition, Segment, SigmaState};
use crate::edmsm::{dec, EdOptions};
use crate::edslgssm::{cd_viterbi, SlgssmParams};
use crate::error::{invalid, Error, Result};
use crate::hmm::{self, SarmCoefficients};
use crate::lgssm::{psd_sqrt, LgssmParams};
use crate::numeric::LogDomain;

/// Switching autoregressive generator with shared segment durations.
#[derive(Debug, Clone, PartialEq)]
pub struct SarProcess {
    pub coeffs: SarmCoefficients,
    pub transition: RegimeTransition,
    pub duration: DurationModel,
}

impl SarProcess {
    /// Three order-2 regimes, no self transitions, durations on `{30..120}` from a
    /// Gaussian with mean 75 and variance 500.
    pub fn three_regime(sigma: f64) -> Result<Self> {
        let a = vec![vec![1.8, -0.92], vec![1.75, -0.95], vec![1.8, -0.98]];
        let coeffs = SarmCoefficients::new(a, vec![sigma; 3])?;
        let transition = RegimeTransition::from_rows(vec![1.0 / 3.0; 3], &[vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]])?;
        let duration = DurationModel::discretized_gaussian(3, 75.0, 500.0, 30, 120)?;
        Ok(Self { coeffs, transition, duration })
    }

    pub fn chain(&self) -> Result<EdChain> {
        EdChain::new(self.transition.clone(), self.duration.clone())
    }

    /// Draws `num_segments` whole segments; the series ends at a segment boundary.
    pub fn sample<R: Rng>(&self, num_segments: usize, rng: &mut R) -> Result<SarRun> {
        if num_segments == 0 {
            return invalid("at least one segment is required");
        }
        let hazard = self.duration.to_hazard();
        let mut regimes = Vec::new();
        let mut segments = Vec::with_capacity(num_segments);
        let mut prev = None;
        for _ in 0..num_segments {
            let s = sample_regime(&self.transition, prev, rng);
            let d = crate::chains::sample_duration(&hazard, s, rng);
            segments.push(Segment { start: regimes.len(), len: d, regime: s });
            regimes.extend(std::iter::repeat_n(s, d));
            prev = Some(s);
        }
        let v = self.coeffs.simulate(&regimes, rng);
        Ok(SarRun { v, regimes, segments })
    }
}

/// Sampled series with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SarRun {
    pub v: Vec<f64>,
    pub regimes: Vec<usize>,
    pub segments: Vec<Segment>,
}

/// Maximum-likelihood initial and switching probabilities of a Markov chain
/// estimated from a known regime path.
pub fn ml_transition(regimes: &[usize], num_regimes: usize) -> Result<RegimeTransition> {
    let Some(&first) = regimes.first() else {
        return invalid("empty regime path");
    };
    if regimes.iter().any(|&s| s >= num_regimes) {
        return Err(Error::Dimension(format!("regime index out of range for S = {num_regimes}")));
    }
    let mut tilde = vec![0.0; num_regimes];
    tilde[first] = 1.0;
    let mut counts = DMatrix::zeros(num_regimes, num_regimes);
    for w in regimes.windows(2) {
        counts[(w[1], w[0])] += 1.0;
    }
    for i in 0..num_regimes {
        let col: f64 = counts.column(i).sum();
        for j in 0..num_regimes {
            counts[(j, i)] = if col > 0.0 { counts[(j, i)] / col } else { 1.0 / num_regimes as f64 };
        }
    }
    RegimeTransition::new(tilde, counts)
}

/// Percentage of steps whose estimated regime differs from the truth.
pub fn segmentation_error(estimate: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "paths differ in length");
    if truth.is_empty() {
        return 0.0;
    }
    let wrong = estimate.iter().zip(truth).filter(|(a, b)| a != b).count();
    100.0 * wrong as f64 / truth.len() as f64
}

/// Segmentation errors (percent) of the plain and the explicit-duration models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SarComparison {
    pub sarm_smoothing: f64,
    pub sarm_viterbi: f64,
    pub gsarm_smoothing: f64,
    pub gsarm_viterbi: f64,
}

/// Segments `run` with known coefficients using a plain switching model (transitions
/// estimated from the truth) and the explicit-duration model with the generating law.
pub fn compare_sar(process: &SarProcess, run: &SarRun) -> Result<SarComparison> {
    let s_count = process.coeffs.num_regimes();
    let em = process.coeffs.emission(&run.v, 0);
    let plain = ml_transition(&run.regimes, s_count)?;
    let post = hmm::filter_smooth_sequential(&em, &plain, LogDomain::Auto)?;
    let path = hmm::viterbi(&em, &plain)?;
    let chain = process.chain()?;
    let opts = EdOptions::default().asi(false).condition_end(true);
    let ed_post = dec::smooth_sequential(&em, &chain, opts)?;
    let ed_path = dec::viterbi(&em, &chain, opts)?;
    Ok(SarComparison {
        sarm_smoothing: segmentation_error(&post.map_regimes(), &run.regimes),
        sarm_viterbi: segmentation_error(&path.regimes, &run.regimes),
        gsarm_smoothing: segmentation_error(&ed_post.map_regimes(), &run.regimes),
        gsarm_viterbi: segmentation_error(&ed_path.regimes, &run.regimes),
    })
}

/// Seven-regime switching linear model with two-dimensional hidden state and observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentModel {
    pub regimes: Vec<LgssmParams>,
    pub transition: RegimeTransition,
    pub duration: DurationModel,
}

impl SegmentModel {
    /// Random damped rotations with random starting points; durations uniform on
    /// `{15..50}` for the first four regimes and `{10..25}` for the rest.
    pub fn seven_regime<R: Rng>(rng: &mut R) -> Result<Self> {
        let s_count = 7;
        let mut regimes = Vec::with_capacity(s_count);
        for _ in 0..s_count {
            let theta: f64 = rng.gen_range(-0.6..0.6);
            let r: f64 = rng.gen_range(0.9..0.99);
            let a = DMatrix::from_row_slice(2, 2, &[r * theta.cos(), -r * theta.sin(), r * theta.sin(), r * theta.cos()]);
            let mu = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            regimes.push(LgssmParams::new(
                a,
                DMatrix::from_diagonal_element(2, 2, 0.01),
                DMatrix::identity(2, 2),
                DMatrix::from_diagonal_element(2, 2, 0.1),
                mu,
                DMatrix::from_diagonal_element(2, 2, 0.05),
            )?);
        }
        let rows: Vec<Vec<f64>> = (0..s_count)
            .map(|s| {
                let (lo, hi) = if s < 4 { (15, 50) } else { (10, 25) };
                (10..=50).map(|d| if (lo..=hi).contains(&d) { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        let duration = DurationModel::from_weights(10, 50, rows)?;
        Ok(Self { regimes, transition: RegimeTransition::uniform_switching(s_count)?, duration })
    }

    pub fn chain(&self) -> Result<EdChain> {
        EdChain::new(self.transition.clone(), self.duration.clone())
    }

    /// Count-duration switching model with across-segment independence.
    pub fn params(&self) -> Result<SlgssmParams> {
        Ok(SlgssmParams::from_lgssm(&self.regimes, self.chain()?, Encoding::Cd)?.asi(true).condition_end(true))
    }

    /// Draws `num_segments` whole segments, restarting the hidden state at each boundary.
    pub fn sample<R: Rng>(&self, num_segments: usize, rng: &mut R) -> Result<SegmentRun> {
        if num_segments == 0 {
            return invalid("at least one segment is required");
        }
        let hazard = self.duration.to_hazard();
        let mut regimes = Vec::new();
        let mut hidden = Vec::new();
        let mut v = Vec::new();
        let mut prev = None;
        let normals = |rng: &mut R| DVector::from_iterator(2, (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for _ in 0..num_segments {
            let s = sample_regime(&self.transition, prev, rng);
            let d = crate::chains::sample_duration(&hazard, s, rng);
            let p = &self.regimes[s];
            let l0 = psd_sqrt(&p.sigma)?;
            let lh = psd_sqrt(&p.sigma_h)?;
            let lv = psd_sqrt(&p.sigma_v)?;
            let mut h = &p.mu + &l0 * normals(rng);
            for k in 0..d {
                if k > 0 {
                    h = &p.a * &h + &lh * normals(rng);
                }
                v.push(&p.b * &h + &lv * normals(rng));
                hidden.push(h.clone());
                regimes.push(s);
            }
            prev = Some(s);
        }
        Ok(SegmentRun { v, hidden, regimes })
    }
}

/// Sampled observations with hidden states and regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRun {
    pub v: Vec<DVector<f64>>,
    pub hidden: Vec<DVector<f64>>,
    pub regimes: Vec<usize>,
}

impl SegmentRun {
    pub fn segments(&self) -> Vec<Segment> {
        runs(&self.regimes)
    }
}

/// Draws hidden states and observations of a switching linear model along `path`.
/// With `asi` each segment restarts from its regime prior; otherwise only the first step does.
pub fn simulate_switching_lgssm<R: Rng>(
    regimes: &[LgssmParams],
    path: &[SigmaState],
    asi: bool,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let mut hidden: Vec<DVector<f64>> = Vec::with_capacity(path.len());
    let mut v = Vec::with_capacity(path.len());
    let mut prev: Option<SigmaState> = None;
    for &st in path {
        let Some(p) = regimes.get(st.regime()) else {
            return Err(Error::Dimension(format!("regime {} has no parameters", st.regime())));
        };
        let mut normals = |n: usize| DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let h = match hidden.last() {
            Some(last) if !(asi && st.starts_segment(prev)) => &p.a * last + psd_sqrt(&p.sigma_h)? * normals(p.h_dim()),
            _ => &p.mu + psd_sqrt(&p.sigma)? * normals(p.h_dim()),
        };
        v.push(&p.b * &h + psd_sqrt(&p.sigma_v)? * normals(p.v_dim()));
        hidden.push(h);
        prev = Some(st);
    }
    Ok((hidden, v))
}

/// Draws a switching autoregressive series along `path`; with `asi` each segment
/// conditions only on its own past observations.
pub fn simulate_sarm<R: Rng>(coeffs: &SarmCoefficients, path: &[SigmaState], asi: bool, rng: &mut R) -> Vec<f64> {
    let regimes: Vec<usize> = path.iter().map(|st| st.regime()).collect();
    if !asi {
        return coeffs.simulate(&regimes, rng);
    }
    let mut v = Vec::with_capacity(path.len());
    let mut start = 0;
    for t in 1..=path.len() {
        if t == path.len() || path[t].starts_segment(Some(path[t - 1])) {
            v.extend(coeffs.simulate(&regimes[start..t], rng));
            start = t;
        }
    }
    v
}

/// Frame-level regime accuracy of count-duration extended Viterbi on `run`.
pub fn segment_accuracy(model: &SegmentModel, run: &SegmentRun) -> Result<f64> {
    let path = cd_viterbi(&model.params()?, &run.v)?;
    Ok(1.0 - segmentation_error(&path.regimes, &run.regimes) / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::substream;
    use crate::oracle::{empirical_pmf, total_variation};

    #[test]
    fn sar_durations_follow_the_law() {
        let p = SarProcess::three_regime(1.0).unwrap();
        let mut rng = substream(11, 0);
        let mut lens = Vec::new();
        for _ in 0..20 {
            let run = p.sample(500, &mut rng).unwrap();
            assert!(run.segments.windows(2).all(|w| w[0].regime != w[1].regime));
            lens.extend(run.segments.iter().map(|s| s.len));
        }
        assert!(lens.iter().all(|&d| (30..=120).contains(&d)));
        let emp = empirical_pmf(&lens);
        let law: Vec<f64> = (0..emp.len()).map(|d| if d == 0 { 0.0 } else { p.duration.rho(0, d) }).collect();
        let tv = total_variation(&emp, &law);
        // Sampling noise alone gives an expected distance near 0.04 here.
        assert!(tv < 0.06, "{tv}");
    }

    #[test]
    fn smoothing_beats_viterbi_on_most_seeds() {
        let p = SarProcess::three_regime(1.0).unwrap();
        let mut wins = 0;
        for seed in 0..7 {
            let run = p.sample(60, &mut substream(seed, 4)).unwrap();
            let c = compare_sar(&p, &run).unwrap();
            wins += usize::from(c.gsarm_smoothing <= c.gsarm_viterbi);
        }
        assert!(wins >= 4, "{wins}/7");
    }

    #[test]
    fn ml_transition_counts() {
        let t = ml_transition(&[0, 0, 1, 1, 1, 0], 2).unwrap();
        assert!((t.pi(0, 0) - 0.5).abs() < 1e-15);
        assert!((t.pi(1, 0) - 0.5).abs() < 1e-15);
        assert!((t.pi(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.pi(1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.tilde_pi(), &[1.0, 0.0]);
    }

    #[test]
    fn single_regime_segmentation_is_exact() {
        assert_eq!(segmentation_error(&[0; 10], &[0; 10]), 0.0);
        assert_eq!(segmentation_error(&[0, 1, 1, 0], &[0, 1, 0, 0]), 25.0);
    }

    #[test]
    fn seven_regime_durations_respect_bounds() {
        let mut rng = substream(3, 0);
        let m = SegmentModel::seven_regime(&mut rng).unwrap();
        let run = m.sample(40, &mut rng).unwrap();
        for seg in runs(&run.regimes) {
            let (lo, hi) = if seg.regime < 4 { (15, 50) } else { (10, 25) };
            assert!(seg.len >= lo && seg.len <= hi, "{seg:?}");
        }
    }
}
