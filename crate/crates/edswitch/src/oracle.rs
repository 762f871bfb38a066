//! Brute-force references for desk-scale checks.
//!
//! Nothing here reuses the recursions: regime paths are enumerated exhaustively by
//! walking the transition kernel, and Gaussian posteriors come from conditioning
//! one stacked joint Gaussian.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::chains::{enumerate_states, initial_probability, transition_kernel, DMax, EdChain, Encoding, RegimeTransition, SigmaState};
use crate::edmsm::SegmentEmission;
use crate::error::{invalid, Error, Result};
use crate::hmm::Emission;
use crate::lgssm::LgssmParams;
use crate::numeric::ln;

/// Limits keeping enumeration tractable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_terms: usize,
    pub max_gaussian_dims: usize,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        Self { max_terms: 10_000_000, max_gaussian_dims: 64 }
    }
}

/// Exact regime posteriors of an ordinary switching model.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmExact {
    pub filtered: Vec<Vec<f64>>,
    pub smoothed: Vec<Vec<f64>>,
    pub log_evidence: f64,
    pub map_path: Vec<usize>,
    pub map_log_joint: f64,
}

/// Enumerates all `S^T` regime paths.
pub fn enumerate_hmm<E: Emission + ?Sized>(em: &E, chain: &RegimeTransition) -> Result<HmmExact> {
    let s = chain.num_regimes();
    let t_len = em.len();
    let total = (s as f64).powi(t_len as i32);
    if total > EnumerationBudget::default().max_terms as f64 {
        return Err(Error::Budget(format!("{total} paths")));
    }
    let k = em.order();
    let mut filtered = vec![vec![0.0; s]; t_len];
    let mut smoothed = vec![vec![0.0; s]; t_len];
    let mut evidence = 0.0;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut path = vec![0usize; t_len];
    let n_paths = s.pow(t_len as u32);
    for code in 0..n_paths {
        let mut c = code;
        for t in (0..t_len).rev() {
            path[t] = c % s;
            c /= s;
        }
        let mut lw = 0.0;
        for t in 0..t_len {
            lw += if t == 0 { ln(chain.tilde_pi()[path[0]]) } else { ln(chain.pi(path[t], path[t - 1])) };
            lw += em.log_density(path[t], t, k.min(t));
            // Prefix weights are counted once, at the path whose suffix is all zeros.
            if path[t + 1..].iter().all(|&x| x == 0) {
                filtered[t][path[t]] += lw.exp();
            }
        }
        let w = lw.exp();
        evidence += w;
        for t in 0..t_len {
            smoothed[t][path[t]] += w;
        }
        if lw > best.0 {
            best = (lw, path.clone());
        }
    }
    for row in filtered.iter_mut() {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    for row in smoothed.iter_mut() {
        row.iter_mut().for_each(|x| *x /= evidence);
    }
    Ok(HmmExact { filtered, smoothed, log_evidence: evidence.ln(), map_path: best.1, map_log_joint: best.0 })
}

/// How observations are scored along an augmented path.
#[derive(Clone, Copy)]
pub enum PathEmission<'a> {
    /// Per-step Markovian emission; with `asi` the window restarts at every segment.
    Markov { em: &'a dyn Emission, asi: bool },
    /// Whole-segment likelihoods; the final segment is scored up to the last step.
    Segments(&'a dyn SegmentEmission),
}

impl PathEmission<'_> {
    fn len(&self) -> usize {
        match self {
            PathEmission::Markov { em, .. } => em.len(),
            PathEmission::Segments(se) => se.len(),
        }
    }
}

/// Exact posteriors over augmented states.
#[derive(Debug, Clone, PartialEq)]
pub struct EdExact {
    pub filtered: Vec<BTreeMap<SigmaState, f64>>,
    pub smoothed: Vec<BTreeMap<SigmaState, f64>>,
    pub filtered_regimes: Vec<Vec<f64>>,
    pub smoothed_regimes: Vec<Vec<f64>>,
    pub log_evidence: f64,
    pub map_path: Vec<SigmaState>,
    pub map_log_joint: f64,
}

struct Walker<'a> {
    chain: &'a EdChain,
    encoding: Encoding,
    emission: PathEmission<'a>,
    condition_end: bool,
    succ: BTreeMap<SigmaState, Vec<(SigmaState, f64)>>,
    t_len: usize,
    terms: usize,
    budget: usize,
    filtered: Vec<BTreeMap<SigmaState, f64>>,
    smoothed: Vec<BTreeMap<SigmaState, f64>>,
    evidence: f64,
    best: (f64, Vec<SigmaState>),
}

impl Walker<'_> {
    fn starts_segment(&self, path: &[SigmaState], t: usize) -> bool {
        path[t].starts_segment(if t == 0 { None } else { Some(path[t - 1]) })
    }

    /// Log emission weight contributed when the path reaches step `t`; for segment
    /// emissions, the currently open segment is scored up to `t`.
    fn step_weight(&self, path: &[SigmaState], t: usize, seg_start: usize) -> f64 {
        match self.emission {
            PathEmission::Markov { em, asi } => {
                let k = em.order();
                let lags = if asi { k.min(t - seg_start) } else { k.min(t) };
                em.log_density(path[t].regime(), t, lags)
            }
            PathEmission::Segments(_) => 0.0,
        }
    }

    fn walk(&mut self, path: &mut Vec<SigmaState>, lw: f64, closed: f64, seg_start: usize) -> Result<()> {
        self.terms += 1;
        if self.terms > self.budget {
            return Err(Error::Budget(format!("more than {} enumerated prefixes", self.budget)));
        }
        let t = path.len() - 1;
        let open = match self.emission {
            PathEmission::Segments(se) => se.log_segment(path[t].regime(), seg_start, t - seg_start + 1),
            PathEmission::Markov { .. } => 0.0,
        };
        let prefix = lw + closed + open;
        *self.filtered[t].entry(path[t]).or_insert(0.0) += prefix.exp();
        if t + 1 == self.t_len {
            let mut total = prefix;
            if self.condition_end {
                total += match path[t] {
                    SigmaState::Inc { s, c } => ln(1.0 - self.chain.lambda(s, c)),
                    other => ln(f64::from(u8::from(other.count() == 1))),
                };
            }
            if total == f64::NEG_INFINITY {
                return Ok(());
            }
            let w = total.exp();
            self.evidence += w;
            for (tt, &st) in path.iter().enumerate() {
                *self.smoothed[tt].entry(st).or_insert(0.0) += w;
            }
            if total > self.best.0 {
                self.best = (total, path.clone());
            }
            return Ok(());
        }
        let succ = self.succ.get(&path[t]).cloned().unwrap_or_default();
        for (next, lk) in succ {
            path.push(next);
            let new_seg = self.starts_segment(path, t + 1);
            let (closed2, start2) = if new_seg { (closed + open, t + 1) } else { (closed, seg_start) };
            let w = lw + lk + self.step_weight(path, t + 1, start2);
            if w > f64::NEG_INFINITY {
                self.walk(path, w, closed2, start2)?;
            }
            path.pop();
        }
        Ok(())
    }
}

/// Enumerates every augmented path with nonzero prior probability.
///
/// Under `condition_end` the final state must close a segment (decreasing and
/// count-duration encodings) or the path is weighted by the end probability
/// `1 - lambda` (increasing encoding).
pub fn enumerate_ed(chain: &EdChain, encoding: Encoding, emission: PathEmission<'_>, condition_end: bool) -> Result<EdExact> {
    let t_len = emission.len();
    if t_len == 0 {
        return invalid("T must be at least 1");
    }
    let cap = match chain.d_max() {
        DMax::Finite(d) => d,
        DMax::Unbounded => {
            if encoding == Encoding::Inc || condition_end {
                t_len
            } else {
                return invalid("unbounded durations need end conditioning in this encoding");
            }
        }
    };
    let states = enumerate_states(encoding, chain.num_regimes(), cap);
    let mut succ = BTreeMap::new();
    for &a in &states {
        let mut list = Vec::new();
        for &b in &states {
            let p = transition_kernel(encoding, a, b, chain)?;
            if p > 0.0 {
                list.push((b, p.ln()));
            }
        }
        succ.insert(a, list);
    }
    let mut w = Walker {
        chain,
        encoding,
        emission,
        condition_end,
        succ,
        t_len,
        terms: 0,
        budget: EnumerationBudget::default().max_terms,
        filtered: vec![BTreeMap::new(); t_len],
        smoothed: vec![BTreeMap::new(); t_len],
        evidence: 0.0,
        best: (f64::NEG_INFINITY, Vec::new()),
    };
    let _ = w.encoding;
    for &st in &states {
        let p0 = initial_probability(chain, st);
        if p0 <= 0.0 {
            continue;
        }
        let mut path = vec![st];
        let lw = p0.ln() + w.step_weight(&path, 0, 0);
        if lw > f64::NEG_INFINITY {
            w.walk(&mut path, lw, 0.0, 0)?;
        }
    }
    if !(w.evidence > 0.0) {
        return Err(Error::Numerical("no path has positive probability".into()));
    }
    let s_count = chain.num_regimes();
    let mut filtered = w.filtered;
    for row in filtered.iter_mut() {
        let z: f64 = row.values().sum();
        row.values_mut().for_each(|x| *x /= z);
    }
    let mut smoothed = w.smoothed;
    for row in smoothed.iter_mut() {
        row.values_mut().for_each(|x| *x /= w.evidence);
    }
    let marg = |rows: &[BTreeMap<SigmaState, f64>]| {
        rows.iter()
            .map(|r| {
                let mut m = vec![0.0; s_count];
                for (st, p) in r {
                    m[st.regime()] += p;
                }
                m
            })
            .collect::<Vec<_>>()
    };
    Ok(EdExact {
        filtered_regimes: marg(&filtered),
        smoothed_regimes: marg(&smoothed),
        filtered,
        smoothed,
        log_evidence: w.evidence.ln(),
        map_log_joint: w.best.0,
        map_path: w.best.1,
    })
}

/// Exact Gaussian posteriors from the stacked joint density of `(h_{1:T}, v_{1:T})`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGaussian {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
}

/// Conditions the joint Gaussian of the whole series on all observations.
pub fn batch_gaussian(p: &LgssmParams, v: &[DVector<f64>]) -> Result<BatchGaussian> {
    let steps: Vec<BatchStep<'_>> = (0..v.len()).map(|t| BatchStep { params: p, reset: t == 0 }).collect();
    batch_switching(&steps, v)
}

/// Parameters in force at one step of a switching series.
#[derive(Debug, Clone, Copy)]
pub struct BatchStep<'a> {
    pub params: &'a LgssmParams,
    /// `h_t` is drawn afresh from the prior of `params` instead of from `h_{t-1}`.
    pub reset: bool,
}

/// [`batch_gaussian`] with per-step parameters and resets.
pub fn batch_switching(steps: &[BatchStep<'_>], v: &[DVector<f64>]) -> Result<BatchGaussian> {
    let t_len = v.len();
    if steps.len() != t_len || t_len == 0 {
        return invalid("one step description per observation is required");
    }
    let (h, vd) = (steps[0].params.h_dim(), steps[0].params.v_dim());
    if t_len * h > EnumerationBudget::default().max_gaussian_dims {
        return Err(Error::Budget(format!("{} hidden dimensions", t_len * h)));
    }
    let nh = t_len * h;
    let mut mh = DVector::zeros(nh);
    let mut chh = DMatrix::zeros(nh, nh);
    for t in 0..t_len {
        let p = steps[t].params;
        if t == 0 || steps[t].reset {
            mh.rows_mut(t * h, h).copy_from(&p.mu);
            chh.view_mut((t * h, t * h), (h, h)).copy_from(&p.sigma);
            continue;
        }
        let prev = mh.rows((t - 1) * h, h).into_owned();
        mh.rows_mut(t * h, h).copy_from(&(&p.a * prev));
        // Cov(h_t, h_s) = A_t Cov(h_{t-1}, h_s) for s < t.
        for s in 0..t {
            let blk = &p.a * chh.view(((t - 1) * h, s * h), (h, h));
            chh.view_mut((t * h, s * h), (h, h)).copy_from(&blk);
            chh.view_mut((s * h, t * h), (h, h)).copy_from(&blk.transpose());
        }
        let var = &p.a * chh.view(((t - 1) * h, (t - 1) * h), (h, h)) * p.a.transpose() + &p.sigma_h;
        chh.view_mut((t * h, t * h), (h, h)).copy_from(&var);
    }
    let nv = t_len * vd;
    let mut bbig = DMatrix::zeros(nv, nh);
    let mut noise = DMatrix::zeros(nv, nv);
    for (t, st) in steps.iter().enumerate() {
        bbig.view_mut((t * vd, t * h), (vd, h)).copy_from(&st.params.b);
        noise.view_mut((t * vd, t * vd), (vd, vd)).copy_from(&st.params.sigma_v);
    }
    let cvv = &bbig * &chh * bbig.transpose() + noise;
    let chv = &chh * bbig.transpose();
    let mv = &bbig * &mh;
    let vv = DVector::from_iterator(nv, v.iter().flat_map(|x| x.iter().copied()));
    let r = &vv - &mv;
    let cvv_inv = cvv.clone().try_inverse().ok_or_else(|| Error::Numerical("singular observation covariance".into()))?;
    let post_mean = &mh + &chv * &cvv_inv * &r;
    let post_cov = &chh - &chv * &cvv_inv * chv.transpose();
    let det = cvv.determinant();
    let log_evidence = -0.5 * (nv as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + r.dot(&(&cvv_inv * &r)));
    let means = (0..t_len).map(|t| post_mean.rows(t * h, h).into_owned()).collect();
    let covs = (0..t_len).map(|t| post_cov.view((t * h, t * h), (h, h)).into_owned()).collect();
    Ok(BatchGaussian { means, covs, log_evidence })
}

/// Posterior moments of `h_t` restricted to one augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Exact posteriors of a switching state-space model with explicit durations.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingExact {
    pub filtered: Vec<BTreeMap<SigmaState, StateMoments>>,
    pub smoothed: Vec<BTreeMap<SigmaState, StateMoments>>,
    /// Smoothed mean and covariance of `h_t`, all states pooled.
    pub smoothed_mean: Vec<DVector<f64>>,
    pub smoothed_cov: Vec<DMatrix<f64>>,
    pub log_evidence: f64,
    /// Complete paths with posterior probabilities and per-step conditional moments.
    pub paths: Vec<(Vec<SigmaState>, f64, BatchGaussian)>,
}

#[derive(Default)]
struct Moments {
    w: f64,
    m1: Option<DVector<f64>>,
    m2: Option<DMatrix<f64>>,
}

impl Moments {
    fn add(&mut self, w: f64, mean: &DVector<f64>, cov: &DMatrix<f64>) {
        let outer = cov + mean * mean.transpose();
        self.w += w;
        self.m1 = Some(match self.m1.take() {
            Some(m) => m + mean * w,
            None => mean * w,
        });
        self.m2 = Some(match self.m2.take() {
            Some(m) => m + outer * w,
            None => outer * w,
        });
    }

    fn finish(self, total: f64) -> StateMoments {
        let mean = self.m1.unwrap() / self.w;
        let cov = self.m2.unwrap() / self.w - &mean * mean.transpose();
        StateMoments { weight: self.w / total, mean, cov }
    }
}

/// Enumerates every augmented path and conditions each one exactly.
///
/// Segments start at the first step. With `asi` the hidden state restarts from the
/// regime prior at each segment start; otherwise it evolves through the boundary
/// under the new regime's dynamics.
pub fn enumerate_switching(
    chain: &EdChain,
    encoding: Encoding,
    regimes: &[LgssmParams],
    v: &[DVector<f64>],
    asi: bool,
    condition_end: bool,
) -> Result<SwitchingExact> {
    let t_len = v.len();
    if t_len == 0 {
        return invalid("T must be at least 1");
    }
    let cap = chain.d_max().cap(t_len);
    let states = enumerate_states(encoding, chain.num_regimes(), cap);
    let mut prefixes: Vec<(Vec<SigmaState>, f64)> =
        states.iter().map(|&s| (vec![s], initial_probability(chain, s))).filter(|(_, p)| *p > 0.0).collect();
    let mut filtered: Vec<BTreeMap<SigmaState, Moments>> = (0..t_len).map(|_| BTreeMap::new()).collect();
    let mut terms = 0usize;
    let steps_of = |path: &[SigmaState]| -> Vec<BatchStep<'_>> {
        path.iter()
            .enumerate()
            .map(|(t, st)| BatchStep {
                params: &regimes[st.regime()],
                reset: t == 0 || (asi && st.starts_segment(Some(path[t - 1]))),
            })
            .collect::<Vec<_>>()
    };
    let mut complete = Vec::new();
    for t in 0..t_len {
        let mut next = Vec::new();
        for (path, prior) in prefixes {
            terms += 1;
            if terms > EnumerationBudget::default().max_terms {
                return Err(Error::Budget(format!("more than {terms} enumerated prefixes")));
            }
            let steps = steps_of(&path);
            let bg = batch_switching(&steps, &v[..=t])?;
            let w = prior * bg.log_evidence.exp();
            filtered[t].entry(path[t]).or_default().add(w, &bg.means[t], &bg.covs[t]);
            if t + 1 == t_len {
                let end_w = if condition_end {
                    match path[t] {
                        SigmaState::Inc { s, c } => 1.0 - chain.lambda(s, c),
                        other => f64::from(u8::from(other.count() == 1)),
                    }
                } else {
                    1.0
                };
                if w * end_w > 0.0 {
                    complete.push((path, w * end_w, bg));
                }
                continue;
            }
            for &st in &states {
                let k = transition_kernel(encoding, path[t], st, chain)?;
                if k > 0.0 {
                    let mut p2 = path.clone();
                    p2.push(st);
                    next.push((p2, prior * k));
                }
            }
        }
        prefixes = next;
    }
    let evidence: f64 = complete.iter().map(|c| c.1).sum();
    if !(evidence > 0.0) {
        return Err(Error::Numerical("no path has positive probability".into()));
    }
    let mut smoothed: Vec<BTreeMap<SigmaState, Moments>> = (0..t_len).map(|_| BTreeMap::new()).collect();
    let mut pooled: Vec<Moments> = (0..t_len).map(|_| Moments::default()).collect();
    for (path, w, bg) in &complete {
        for t in 0..t_len {
            smoothed[t].entry(path[t]).or_default().add(*w, &bg.means[t], &bg.covs[t]);
            pooled[t].add(*w, &bg.means[t], &bg.covs[t]);
        }
    }
    let finish = |rows: Vec<BTreeMap<SigmaState, Moments>>, total: Option<f64>| {
        rows.into_iter()
            .map(|row| {
                let z = total.unwrap_or_else(|| row.values().map(|m| m.w).sum());
                row.into_iter().filter(|(_, m)| m.w > 0.0).map(|(k, m)| (k, m.finish(z))).collect()
            })
            .collect::<Vec<_>>()
    };
    let (smoothed_mean, smoothed_cov) = pooled
        .into_iter()
        .map(|m| {
            let f = m.finish(evidence);
            (f.mean, f.cov)
        })
        .unzip();
    Ok(SwitchingExact {
        filtered: finish(filtered, None),
        smoothed: finish(smoothed, Some(evidence)),
        smoothed_mean,
        smoothed_cov,
        log_evidence: evidence.ln(),
        paths: complete.into_iter().map(|(p, w, bg)| (p, w / evidence, bg)).collect(),
    })
}

/// Normalized histogram over `0..=max(samples)`.
pub fn empirical_pmf(samples: &[usize]) -> Vec<f64> {
    let m = samples.iter().copied().max().unwrap_or(0);
    let mut h = vec![0.0; m + 1];
    for &x in samples {
        h[x] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

pub use crate::numeric::total_variation;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::{geometric_pmf, sample_duration, substream, DurationModel};
    use crate::hmm::TableEmission;

    #[test]
    fn single_step_is_prior_times_emission() {
        let chain = RegimeTransition::from_rows(vec![0.25, 0.75], &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let em = TableEmission::from_probs(&[vec![0.2, 0.6]]).unwrap();
        let ex = enumerate_hmm(&em, &chain).unwrap();
        let z = 0.25 * 0.2 + 0.75 * 0.6;
        assert!((ex.filtered[0][0] - 0.05 / z).abs() < 1e-15);
        assert!((ex.log_evidence - z.ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_model_symmetric_posterior() {
        let chain = RegimeTransition::uniform_switching(2).unwrap();
        let ed = EdChain::new(chain, DurationModel::uniform(2, 1, 2).unwrap()).unwrap();
        let em = TableEmission::new(vec![vec![0.0, 0.0]; 4]).unwrap();
        let ex = enumerate_ed(&ed, Encoding::Dec, PathEmission::Markov { em: &em, asi: false }, false).unwrap();
        for r in &ex.smoothed_regimes {
            assert!((r[0] - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_noise_batch_reproduces_observations() {
        let p = LgssmParams::scalar(0.7, 0.5, 2.0, 0.0, 0.0, 1.0).unwrap();
        let v: Vec<DVector<f64>> = [1.0, -0.4, 0.6].iter().map(|&x| DVector::from_element(1, x)).collect();
        let b = batch_gaussian(&p, &v).unwrap();
        for (m, x) in b.means.iter().zip(&v) {
            assert!((2.0 * m[0] - x[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn geometric_histogram() {
        let hz = DurationModel::geometric(&[0.5], 1).unwrap().to_hazard();
        let mut rng = substream(31, 0);
        let samples: Vec<usize> = (0..100_000).map(|_| sample_duration(&hz, 0, &mut rng)).collect();
        let emp = empirical_pmf(&samples);
        let exact: Vec<f64> = (0..emp.len()).map(|d| geometric_pmf(0.5, d)).collect();
        assert!((exact[2] - 0.25).abs() < 1e-15);
        assert!(total_variation(&emp, &exact) <= 0.01);
    }
}
