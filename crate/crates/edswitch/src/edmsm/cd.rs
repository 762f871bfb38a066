//! Count-duration encoding with segment-level recursions.
//!
//! Everything is indexed by segments `(tau, s, d)`: a segment of regime `s` and
//! duration `d` whose last step is `tau`. A segment whose start `tau - d + 1` is not
//! positive is the initial segment; with `c_1 = tau + 1` it carries the weight
//! `tilde_pi * tilde_rho * tilde_tilde_rho`. Without end conditioning the last
//! segment may run past the series, so `tau` extends to `T - 2 + cap` and the
//! segment likelihood is truncated at the last observation.

use nalgebra::DMatrix;

use super::{count_cap, tie_and_normalize, EdOptions, EdPath, EdPosterior, SegmentEmission, StateSpace};
use crate::chains::{DMax, DurationModel, EdChain, Encoding, RegimeTransition, SigmaState};
use crate::error::{invalid, Error, Result};
use crate::hmm::EmTrace;
use crate::numeric::{ln, logsumexp, LogSum};

/// Log-domain segment tables.
#[derive(Debug, Clone)]
pub struct CdTables {
    pub num_regimes: usize,
    pub cap: usize,
    pub len: usize,
    pub condition_end: bool,
    /// Number of segment end positions stored.
    pub n_tau: usize,
    /// `log p(segment (s, d) ends at tau, v_{1:min(tau, T)})`, flat over `(tau, s, d)`.
    la: Vec<f64>,
    /// `F[tau][s]`: some segment of `s` ends at `tau <= T - 2`.
    pub log_end: Vec<Vec<f64>>,
    /// `G[tau][j]`: a segment of `j` starts at `tau + 1` (joint with `v_{1:tau}`).
    pub log_start: Vec<Vec<f64>>,
    /// `log p(v_{tau+1:T} | segment of s ends at tau)`.
    pub log_beta: Vec<Vec<f64>>,
    /// `log p(v_{tau+1:T} | segment of j starts at tau + 1)` for `tau <= T - 2`.
    pub log_beta_start: Vec<Vec<f64>>,
    /// `log p(s_1 = s, v_{1:T})`.
    pub log_initial: Vec<f64>,
    pub log_likelihood: f64,
    log_rho: Vec<Vec<f64>>,
    log_pi: Vec<Vec<f64>>,
    /// `runs[s][a][n - 1] = log p(v_{a:a+n-1} | s)`.
    runs: Vec<Vec<Vec<f64>>>,
    initial: Vec<Vec<Vec<f64>>>,
}

impl CdTables {
    #[inline]
    fn idx(&self, tau: usize, s: usize, d: usize) -> usize {
        (tau * self.num_regimes + s) * self.cap + d - 1
    }

    /// Log joint of the segment `(tau, s, d)` with the observations it covers and all before.
    pub fn log_alpha(&self, tau: usize, s: usize, d: usize) -> f64 {
        self.la[self.idx(tau, s, d)]
    }

    /// Start of the segment, or `None` for the initial segment.
    pub fn segment_start(tau: usize, d: usize) -> Option<usize> {
        (tau + 1 > d).then(|| tau + 1 - d)
    }

    fn seg(&self, s: usize, a: usize, n: usize) -> f64 {
        self.runs[s][a][n - 1]
    }

    fn end_range(&self) -> std::ops::Range<usize> {
        if self.condition_end { self.len - 1..self.len } else { self.len - 1..self.n_tau }
    }

    /// `p(segment (s, d) ends at tau | v)`.
    pub fn segment_posterior(&self, tau: usize, s: usize, d: usize) -> f64 {
        (self.log_alpha(tau, s, d) + self.log_beta[tau][s] - self.log_likelihood).exp()
    }

    /// `p(s_t | v)` by summing every segment covering `t`.
    pub fn smoothed_regimes(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.num_regimes]; self.len];
        for (t, row) in out.iter_mut().enumerate() {
            for (s, x) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for tau in t..(t + self.cap).min(self.n_tau) {
                    for d in (tau - t + 1)..=self.cap {
                        acc += self.segment_posterior(tau, s, d);
                    }
                }
                *x = acc;
            }
        }
        out
    }

    /// `p(s_t | v)` as all segments started by `t` minus all segments ended before `t`.
    pub fn smoothed_regimes_subtractive(&self) -> Vec<Vec<f64>> {
        let s_count = self.num_regimes;
        let mut out = vec![vec![0.0; s_count]; self.len];
        let mut started: Vec<f64> = (0..s_count).map(|j| (self.log_initial[j] - self.log_likelihood).exp()).collect();
        let mut ended = vec![0.0; s_count];
        for (t, row) in out.iter_mut().enumerate() {
            if t > 0 {
                for j in 0..s_count {
                    started[j] += (self.log_start[t - 1][j] + self.log_beta_start[t - 1][j] - self.log_likelihood).exp();
                    ended[j] += (self.log_end[t - 1][j] + self.log_beta[t - 1][j] - self.log_likelihood).exp();
                }
            }
            for j in 0..s_count {
                row[j] = started[j] - ended[j];
            }
        }
        out
    }

    /// Dense filtered and smoothed tables over `(s, d, c)`.
    pub fn expand(&self) -> EdPosterior {
        let sp = StateSpace::new(Encoding::Cd, self.num_regimes, self.cap);
        let mut alpha = vec![vec![0.0; sp.len()]; self.len];
        let mut gamma = vec![vec![0.0; sp.len()]; self.len];
        let mut log_norm = Vec::with_capacity(self.len);
        let mut prev_total = 0.0;
        for t in 0..self.len {
            let mut acc = LogSum::default();
            let mut logs = vec![f64::NEG_INFINITY; sp.len()];
            for s in 0..self.num_regimes {
                for d in 1..=self.cap {
                    for c in 1..=d {
                        let i = sp.index(SigmaState::Cd { s, d, c }).unwrap();
                        let tau = t + c - 1;
                        if tau < self.n_tau {
                            gamma[t][i] = self.segment_posterior(tau, s, d);
                        }
                        let l = self.log_filtered(t, s, d, c);
                        logs[i] = l;
                        acc.add(l);
                    }
                }
            }
            let z = acc.value();
            for (a, l) in alpha[t].iter_mut().zip(&logs) {
                *a = (l - z).exp();
            }
            log_norm.push(z - prev_total);
            prev_total = z;
        }
        EdPosterior { space: sp, alpha, beta: None, gamma, log_norm, log_likelihood: self.log_likelihood }
    }

    /// `log p(sigma_t = (s, d, c), v_{1:t})`.
    fn log_filtered(&self, t: usize, s: usize, d: usize, c: usize) -> f64 {
        let elapsed = d - c;
        if t > elapsed {
            let a = t - elapsed;
            self.log_start[a - 1][s] + self.log_rho[s][d - 1] + self.seg(s, a, t - a + 1)
        } else if c + t <= d {
            self.initial[s][d - 1][c + t - 1] + self.seg(s, 0, t + 1)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Posterior weight that a segment of `j` starts at `a >= 1`.
    fn start_posterior(&self, j: usize, a: usize) -> f64 {
        (1..=self.cap).filter(|&d| a + d - 1 < self.n_tau).map(|d| self.segment_posterior(a + d - 1, j, d)).sum()
    }

    /// Expected duration and switch counts from smoothed segment weights.
    pub fn expected_counts(&self, include_initial: bool) -> SegmentCounts {
        let s_count = self.num_regimes;
        let mut rho = vec![vec![0.0; self.cap]; s_count];
        for tau in 0..self.n_tau {
            for s in 0..s_count {
                for d in 1..=self.cap {
                    if include_initial || Self::segment_start(tau, d).is_some() {
                        rho[s][d - 1] += self.segment_posterior(tau, s, d);
                    }
                }
            }
        }
        let mut pi = vec![vec![0.0; s_count]; s_count];
        for a in 1..self.len {
            let ends: Vec<f64> = (0..s_count).map(|i| self.log_end[a - 1][i]).collect();
            for j in 0..s_count {
                let start = self.start_posterior(j, a);
                if start == 0.0 {
                    continue;
                }
                let den = logsumexp(&(0..s_count).map(|i| self.log_pi[j][i] + ends[i]).collect::<Vec<_>>());
                for i in 0..s_count {
                    pi[j][i] += (self.log_pi[j][i] + ends[i] - den).exp() * start;
                }
            }
        }
        let initial = self.initial_regime_posterior();
        SegmentCounts { rho, pi, initial }
    }

    /// The same counts assembled from start/end forward and backward quantities.
    pub fn expected_counts_start_end(&self, include_initial: bool) -> SegmentCounts {
        let s_count = self.num_regimes;
        let mut rho = vec![vec![0.0; self.cap]; s_count];
        let mut pi = vec![vec![0.0; s_count]; s_count];
        for prev_end in 0..self.len.saturating_sub(1) {
            let a = prev_end + 1;
            for s in 0..s_count {
                for d in 1..=self.cap {
                    let tau = a + d - 1;
                    if tau >= self.n_tau || (self.condition_end && tau > self.len - 1) {
                        continue;
                    }
                    let n = d.min(self.len - a);
                    let w = self.log_start[prev_end][s] + self.log_rho[s][d - 1] + self.seg(s, a, n) + self.log_beta[tau][s];
                    rho[s][d - 1] += (w - self.log_likelihood).exp();
                }
            }
            for j in 0..s_count {
                for i in 0..s_count {
                    let w = self.log_end[prev_end][i] + self.log_pi[j][i] + self.log_beta_start[prev_end][j];
                    pi[j][i] += (w - self.log_likelihood).exp();
                }
            }
        }
        if include_initial {
            for s in 0..s_count {
                for d in 1..=self.cap {
                    for tau in 0..d.min(self.n_tau) {
                        rho[s][d - 1] += self.segment_posterior(tau, s, d);
                    }
                }
            }
        }
        let initial = self.initial_regime_posterior();
        SegmentCounts { rho, pi, initial }
    }

    fn initial_regime_posterior(&self) -> Vec<f64> {
        (0..self.num_regimes)
            .map(|s| {
                (0..self.n_tau)
                    .flat_map(|tau| (tau + 1..=self.cap).map(move |d| (tau, d)))
                    .map(|(tau, d)| self.segment_posterior(tau, s, d))
                    .sum()
            })
            .collect()
    }
}

/// Expected sufficient statistics for the chain parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCounts {
    /// `rho[s][d - 1]`: expected number of segments of `s` with duration `d`.
    pub rho: Vec<Vec<f64>>,
    /// `pi[j][i]`: expected number of switches from `i` to `j`.
    pub pi: Vec<Vec<f64>>,
    /// Posterior of the first regime.
    pub initial: Vec<f64>,
}

fn seg_runs<S: SegmentEmission + ?Sized>(seg: &S, cap: usize) -> Vec<Vec<Vec<f64>>> {
    (0..seg.num_regimes()).map(|s| (0..seg.len()).map(|a| seg.log_segment_run(s, a, cap)).collect()).collect()
}

fn check<S: SegmentEmission + ?Sized>(seg: &S, chain: &EdChain, opts: EdOptions) -> Result<usize> {
    if seg.is_empty() {
        return invalid("T must be at least 1");
    }
    if seg.num_regimes() != chain.num_regimes() {
        return Err(Error::Dimension(format!("emission has {} regimes, chain has {}", seg.num_regimes(), chain.num_regimes())));
    }
    if chain.d_max() == DMax::Unbounded && !opts.condition_end {
        return invalid("unbounded durations with count-duration states need end conditioning");
    }
    Ok(count_cap(chain, seg.len()))
}

/// Initial-state log weights `[s][d - 1][c - 1]`.
fn initial_weights(chain: &EdChain, cap: usize) -> Vec<Vec<Vec<f64>>> {
    let dur = chain.duration();
    (0..chain.num_regimes())
        .map(|s| {
            (1..=cap)
                .map(|d| (1..=d).map(|c| ln(chain.tilde_pi(s)) + ln(dur.tilde_rho(s, d)) + ln(dur.tilde_tilde_rho(d, c))).collect())
                .collect()
        })
        .collect()
}

/// Segment forward and backward tables.
pub fn segmental<S: SegmentEmission + ?Sized>(seg: &S, chain: &EdChain, opts: EdOptions) -> Result<CdTables> {
    let cap = check(seg, chain, opts)?;
    let t_len = seg.len();
    let s_count = chain.num_regimes();
    let n_tau = t_len - 1 + cap;
    let log_rho: Vec<Vec<f64>> = (0..s_count).map(|s| (1..=cap).map(|d| ln(chain.rho(s, d))).collect()).collect();
    let log_pi: Vec<Vec<f64>> = (0..s_count).map(|j| (0..s_count).map(|i| ln(chain.pi(j, i))).collect()).collect();
    let mut tb = CdTables {
        num_regimes: s_count,
        cap,
        len: t_len,
        condition_end: opts.condition_end,
        n_tau,
        la: vec![f64::NEG_INFINITY; n_tau * s_count * cap],
        log_end: vec![vec![f64::NEG_INFINITY; s_count]; t_len.saturating_sub(1)],
        log_start: vec![vec![f64::NEG_INFINITY; s_count]; t_len.saturating_sub(1)],
        log_beta: vec![vec![f64::NEG_INFINITY; s_count]; n_tau],
        log_beta_start: vec![vec![f64::NEG_INFINITY; s_count]; t_len.saturating_sub(1)],
        log_initial: vec![f64::NEG_INFINITY; s_count],
        log_likelihood: f64::NEG_INFINITY,
        log_rho,
        log_pi,
        runs: seg_runs(seg, cap),
        initial: initial_weights(chain, cap),
    };
    let tau_max = if opts.condition_end { t_len } else { n_tau };
    for tau in 0..tau_max {
        for s in 0..s_count {
            for d in 1..=cap {
                let v = match CdTables::segment_start(tau, d) {
                    Some(a) if a < t_len => {
                        let n = d.min(t_len - a);
                        tb.log_start[a - 1][s] + tb.log_rho[s][d - 1] + tb.seg(s, a, n)
                    }
                    Some(_) => f64::NEG_INFINITY,
                    None => tb.initial[s][d - 1][tau] + tb.seg(s, 0, (tau + 1).min(t_len)),
                };
                let i = tb.idx(tau, s, d);
                tb.la[i] = v;
            }
        }
        if tau + 1 < t_len {
            for s in 0..s_count {
                let row: Vec<f64> = (1..=cap).map(|d| tb.la[tb.idx(tau, s, d)]).collect();
                tb.log_end[tau][s] = logsumexp(&row);
            }
            for j in 0..s_count {
                let terms: Vec<f64> = (0..s_count).map(|i| tb.log_pi[j][i] + tb.log_end[tau][i]).collect();
                tb.log_start[tau][j] = logsumexp(&terms);
            }
        }
    }
    let mut total = LogSum::default();
    for tau in tb.end_range() {
        for s in 0..s_count {
            for d in 1..=cap {
                total.add(tb.la[tb.idx(tau, s, d)]);
            }
        }
    }
    tb.log_likelihood = total.value();
    if !tb.log_likelihood.is_finite() {
        return Err(Error::Numerical("observations have zero probability under the model".into()));
    }
    for tau in tb.end_range() {
        tb.log_beta[tau] = vec![0.0; s_count];
    }
    for tau in (0..t_len.saturating_sub(1)).rev() {
        for j in 0..s_count {
            let mut acc = LogSum::default();
            for d in 1..=cap {
                let end = tau + d;
                if opts.condition_end && end > t_len - 1 {
                    break;
                }
                let n = d.min(t_len - 1 - tau);
                acc.add(tb.log_rho[j][d - 1] + tb.seg(j, tau + 1, n) + tb.log_beta[end][j]);
            }
            tb.log_beta_start[tau][j] = acc.value();
        }
        for s in 0..s_count {
            let terms: Vec<f64> = (0..s_count).map(|j| tb.log_pi[j][s] + tb.log_beta_start[tau][j]).collect();
            tb.log_beta[tau][s] = logsumexp(&terms);
        }
    }
    for s in 0..s_count {
        let mut acc = LogSum::default();
        for d in 1..=cap {
            for c in 1..=d {
                let tau = c - 1;
                if opts.condition_end && tau > t_len - 1 {
                    break;
                }
                acc.add(tb.initial[s][d - 1][c - 1] + tb.seg(s, 0, c.min(t_len)) + tb.log_beta[tau][s]);
            }
        }
        tb.log_initial[s] = acc.value();
    }
    Ok(tb)
}

/// Smoothed posterior over count-duration states.
pub fn forward_backward<S: SegmentEmission + ?Sized>(seg: &S, chain: &EdChain, opts: EdOptions) -> Result<EdPosterior> {
    Ok(segmental(seg, chain, opts)?.expand())
}

/// Most likely segmentation; ties resolve to the lowest `(s, d)`.
pub fn viterbi<S: SegmentEmission + ?Sized>(seg: &S, chain: &EdChain, opts: EdOptions) -> Result<EdPath> {
    viterbi_constrained(seg, chain, opts, |_, _| true)
}

/// Viterbi restricted to segments `(start, d)` accepted by `allowed`.
pub fn viterbi_constrained<S, F>(seg: &S, chain: &EdChain, opts: EdOptions, allowed: F) -> Result<EdPath>
where
    S: SegmentEmission + ?Sized,
    F: Fn(usize, usize) -> bool,
{
    let cap = check(seg, chain, opts)?;
    let t_len = seg.len();
    let s_count = chain.num_regimes();
    let n_tau = if opts.condition_end { t_len } else { t_len - 1 + cap };
    let runs = seg_runs(seg, cap);
    let initial = initial_weights(chain, cap);
    let log_pi: Vec<Vec<f64>> = (0..s_count).map(|j| (0..s_count).map(|i| ln(chain.pi(j, i))).collect()).collect();
    let idx = |tau: usize, s: usize, d: usize| (tau * s_count + s) * cap + d - 1;
    let mut xi = vec![f64::NEG_INFINITY; n_tau * s_count * cap];
    // Best predecessor segment entering regime j at tau + 1: (score, flat index).
    let mut best_start: Vec<Vec<(f64, usize)>> = vec![vec![(f64::NEG_INFINITY, usize::MAX); s_count]; t_len.saturating_sub(1)];
    for tau in 0..n_tau {
        for s in 0..s_count {
            for d in 1..=cap {
                let start = CdTables::segment_start(tau, d);
                if !allowed(start.unwrap_or(0), d) {
                    continue;
                }
                xi[idx(tau, s, d)] = match start {
                    Some(a) if a < t_len => best_start[a - 1][s].0 + ln(chain.rho(s, d)) + runs[s][a][d.min(t_len - a) - 1],
                    Some(_) => f64::NEG_INFINITY,
                    None => initial[s][d - 1][tau] + runs[s][0][(tau + 1).min(t_len) - 1],
                };
            }
        }
        if tau + 1 < t_len {
            let mut ends = vec![(f64::NEG_INFINITY, usize::MAX); s_count];
            for (i, e) in ends.iter_mut().enumerate() {
                for d in 1..=cap {
                    let v = xi[idx(tau, i, d)];
                    if v > e.0 {
                        *e = (v, idx(tau, i, d));
                    }
                }
            }
            for j in 0..s_count {
                for (i, e) in ends.iter().enumerate() {
                    let v = log_pi[j][i] + e.0;
                    if v > best_start[tau][j].0 {
                        best_start[tau][j] = (v, e.1);
                    }
                }
            }
        }
    }
    let end_range = if opts.condition_end { t_len - 1..t_len } else { t_len - 1..n_tau };
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for tau in end_range {
        for s in 0..s_count {
            for d in 1..=cap {
                let v = xi[idx(tau, s, d)];
                if v > best.0 {
                    best = (v, idx(tau, s, d));
                }
            }
        }
    }
    if best.1 == usize::MAX {
        return Err(Error::Infeasible("no segmentation satisfies the constraints".into()));
    }
    let mut sigma = vec![SigmaState::Cd { s: 0, d: 1, c: 1 }; t_len];
    let mut cur = best.1;
    loop {
        let tau = cur / (s_count * cap);
        let s = (cur / cap) % s_count;
        let d = cur % cap + 1;
        let first = (tau + 1).saturating_sub(d);
        for (t, slot) in sigma.iter_mut().enumerate().take(tau.min(t_len - 1) + 1).skip(first) {
            *slot = SigmaState::Cd { s, d, c: tau - t + 1 };
        }
        match CdTables::segment_start(tau, d) {
            Some(a) => cur = best_start[a - 1][s].1,
            None => break,
        }
    }
    Ok(EdPath::new(sigma, best.0))
}

/// Duration and transition update from expected counts; bins of `tie_width` share a value.
///
/// Unvisited rows and columns keep their values. The initial segment contributes to
/// `rho` unless it has its own duration table.
pub fn em_update(tables: &CdTables, chain: &EdChain, tie_width: usize) -> Result<EdChain> {
    let dur = chain.duration();
    let counts = tables.expected_counts(!dur.has_custom_tilde_rho());
    apply_counts(&counts, chain, tie_width)
}

pub(crate) fn apply_counts(counts: &SegmentCounts, chain: &EdChain, tie_width: usize) -> Result<EdChain> {
    let DMax::Finite(d_max) = chain.d_max() else {
        return invalid("duration learning needs a finite maximum duration");
    };
    let dur = chain.duration();
    let d_min = dur.d_min();
    let s_count = chain.num_regimes();
    let rows: Vec<Vec<f64>> = (0..s_count)
        .map(|s| {
            tie_and_normalize(&counts.rho[s][d_min - 1..d_max], tie_width).unwrap_or_else(|| {
                log::info!("regime {s} has no expected segments; keeping its durations");
                (d_min..=d_max).map(|d| dur.rho(s, d)).collect()
            })
        })
        .collect();
    let mut new_dur = DurationModel::from_table(d_min, d_max, rows)?;
    if dur.has_custom_tilde_rho() {
        new_dur = new_dur.with_tilde_rho((0..s_count).map(|s| (1..=d_max).map(|d| dur.tilde_rho(s, d)).collect()).collect())?;
    }
    if dur.has_custom_tilde_tilde_rho() {
        new_dur = new_dur.with_tilde_tilde_rho((1..=d_max).map(|d| (1..=d).map(|c| dur.tilde_tilde_rho(d, c)).collect()).collect())?;
    }
    let mut pi = DMatrix::zeros(s_count, s_count);
    for i in 0..s_count {
        let col: f64 = (0..s_count).map(|j| counts.pi[j][i]).sum();
        for j in 0..s_count {
            pi[(j, i)] = if col > 0.0 { counts.pi[j][i] / col } else { chain.pi(j, i) };
        }
    }
    let z: f64 = counts.initial.iter().sum();
    let tilde = if z > 0.0 { counts.initial.iter().map(|x| x / z).collect() } else { chain.transition().tilde_pi().to_vec() };
    EdChain::new(RegimeTransition::new(tilde, pi)?, new_dur)
}

/// EM over the chain parameters with a fixed segment emission.
pub fn em_chain<S: SegmentEmission + ?Sized>(
    seg: &S,
    chain0: &EdChain,
    opts: EdOptions,
    tie_width: usize,
    max_iters: usize,
) -> Result<(EdChain, EmTrace)> {
    let mut chain = chain0.clone();
    let mut trace = EmTrace::default();
    for it in 0..=max_iters {
        let tb = segmental(seg, &chain, opts)?;
        trace.log_likelihood.push(tb.log_likelihood);
        if it == max_iters {
            break;
        }
        chain = em_update(&tb, &chain, tie_width)?;
    }
    Ok((chain, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::substream;
    use crate::edmsm::{inc, MarkovSegments, SegmentMeanGaussian};
    use crate::hmm::TableEmission;
    use crate::numeric::normalize;
    use crate::oracle::{enumerate_ed, PathEmission};
    use rand::Rng;

    fn random_chain(rng: &mut impl Rng, s_count: usize, d_max: usize) -> EdChain {
        let mut w = |n: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            normalize(&mut v);
            v
        };
        let tilde = w(s_count);
        let cols: Vec<Vec<f64>> = (0..s_count).map(|_| w(s_count)).collect();
        let rows: Vec<Vec<f64>> = (0..s_count).map(|_| w(d_max)).collect();
        let pi = DMatrix::from_fn(s_count, s_count, |j, i| cols[i][j]);
        EdChain::new(RegimeTransition::new(tilde, pi).unwrap(), DurationModel::from_table(1, d_max, rows).unwrap()).unwrap()
    }

    fn check_against_oracle(chain: &EdChain, seg: &dyn SegmentEmission, cond: bool) {
        let opts = EdOptions::default().condition_end(cond);
        let ex = enumerate_ed(chain, Encoding::Cd, PathEmission::Segments(seg), cond).unwrap();
        let tb = segmental(seg, chain, opts).unwrap();
        assert!((tb.log_likelihood - ex.log_evidence).abs() < 1e-10);
        let post = tb.expand();
        for t in 0..seg.len() {
            for (&st, &p) in &ex.smoothed[t] {
                assert!((post.smoothed(t, st) - p).abs() < 1e-10, "t={t} {st:?}");
            }
            for (&st, &p) in &ex.filtered[t] {
                assert!((post.filtered(t, st) - p).abs() < 1e-10, "t={t} {st:?}");
            }
        }
        for (a, b) in tb.smoothed_regimes().iter().flatten().zip(ex.smoothed_regimes.iter().flatten()) {
            assert!((a - b).abs() < 1e-10);
        }
        let vp = viterbi(seg, chain, opts).unwrap();
        assert!((vp.log_joint - ex.map_log_joint).abs() < 1e-10);
    }

    #[test]
    fn matches_enumeration_markov_and_segment_mean() {
        let mut rng = substream(31, 0);
        for _ in 0..4 {
            let chain = random_chain(&mut rng, 2, 3);
            let le: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| rng.gen_range(-2.0..0.0)).collect()).collect();
            let em = TableEmission::new(le).unwrap();
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sm = SegmentMeanGaussian { prior_mean: &[0.3, -0.2], tau2: &[1.0, 0.5], sigma2: &[0.4, 0.8], v: &v };
            for cond in [false, true] {
                check_against_oracle(&chain, &MarkovSegments { em: &em, asi: true }, cond);
                check_against_oracle(&chain, &sm, cond);
            }
        }
    }

    #[test]
    fn custom_first_segment_offsets() {
        let mut rng = substream(32, 0);
        let chain = random_chain(&mut rng, 2, 3);
        let dur = chain.duration().clone().with_tilde_tilde_rho(vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.3, 0.5]]).unwrap();
        let chain = chain.with_duration(dur).unwrap();
        let le: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| rng.gen_range(-2.0..0.0)).collect()).collect();
        let em = TableEmission::new(le).unwrap();
        check_against_oracle(&chain, &MarkovSegments { em: &em, asi: true }, false);
    }

    #[test]
    fn agrees_with_increasing_counts() {
        let mut rng = substream(33, 0);
        let chain = random_chain(&mut rng, 3, 4);
        let le: Vec<Vec<f64>> = (0..15).map(|_| (0..3).map(|_| rng.gen_range(-2.0..0.0)).collect()).collect();
        let em = TableEmission::new(le).unwrap();
        for cond in [false, true] {
            let opts = EdOptions::default().condition_end(cond);
            let a = segmental(&MarkovSegments { em: &em, asi: false }, &chain, opts).unwrap().smoothed_regimes();
            let b = inc::smooth_sequential(&em, &chain, opts).unwrap().smoothed_regimes();
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn start_end_forms_agree() {
        let mut rng = substream(34, 0);
        let chain = random_chain(&mut rng, 2, 4);
        let le: Vec<Vec<f64>> = (0..12).map(|_| (0..2).map(|_| rng.gen_range(-2.0..0.0)).collect()).collect();
        let em = TableEmission::new(le).unwrap();
        for cond in [false, true] {
            let tb = segmental(&MarkovSegments { em: &em, asi: true }, &chain, EdOptions::default().condition_end(cond)).unwrap();
            let a = tb.expected_counts(true);
            let b = tb.expected_counts_start_end(true);
            for (x, y) in a.rho.iter().flatten().zip(b.rho.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
            for (x, y) in a.pi.iter().flatten().zip(b.pi.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
            let s1 = tb.smoothed_regimes();
            let s2 = tb.smoothed_regimes_subtractive();
            for (x, y) in s1.iter().flatten().zip(s2.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chain_em_is_monotone() {
        let mut rng = substream(35, 0);
        let chain = random_chain(&mut rng, 2, 6);
        let le: Vec<Vec<f64>> = (0..60).map(|_| (0..2).map(|_| rng.gen_range(-3.0..0.0)).collect()).collect();
        let em = TableEmission::new(le).unwrap();
        let (_, trace) = em_chain(&MarkovSegments { em: &em, asi: true }, &chain, EdOptions::default(), 1, 30).unwrap();
        assert!(trace.max_decrease() <= 1e-9, "{:?}", trace.log_likelihood);
    }

    #[test]
    fn point_mass_grid() {
        let tr = RegimeTransition::from_rows(vec![1.0, 0.0], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let chain = EdChain::new(tr, DurationModel::point_mass(2, 3).unwrap()).unwrap();
        let em = TableEmission::new(vec![vec![0.0, 0.0]; 9]).unwrap();
        let path = viterbi(&MarkovSegments { em: &em, asi: true }, &chain, EdOptions::default().condition_end(true)).unwrap();
        assert_eq!(path.regimes, vec![0, 0, 0, 1, 1, 1, 0, 0, 0]);
    }
}
