//! Count-duration routines driven by per-segment filter banks (ASI).
//!
//! Under ASI the belief over `h_t` given `(s, d, c)` depends only on the segment
//! start `t - (d - c)`, so one Kalman filter per `(start, regime)` serves every
//! duration. The filtered weights factor as `rho_{s,d}` times a table indexed by
//! the elapsed count `d - c`, giving an `O(T S d_max)` forward pass.

use std::collections::HashMap;

use nalgebra::DVector;

use super::filter::require;
use super::{Component, Regime, SlgssmParams, SwitchBelief, SwitchPosterior};
use crate::chains::{Encoding, SigmaState};
use crate::edmsm::{cd, EdOptions, EdPath, SegmentEmission};
use crate::error::{Error, Result};
use crate::lgssm::{rts_smooth_with, GaussianBelief, SegmentFilter};
use crate::numeric::{ln, logsumexp};

/// Filtered beliefs and cumulative log-likelihoods of every segment start.
#[derive(Debug, Clone)]
pub struct SegmentBank {
    cap: usize,
    len: usize,
    /// `beliefs[a][s][k]`: `p(h_{a+k} | v_{a:a+k})` for a segment of `s` starting at `a`.
    beliefs: Vec<Vec<Vec<GaussianBelief>>>,
    /// `log_lik[a][s][k] = log p(v_{a:a+k} | s)`.
    log_lik: Vec<Vec<Vec<f64>>>,
}

impl SegmentBank {
    pub fn new(regimes: &[Regime], v: &[DVector<f64>], cap: usize) -> Result<Self> {
        let len = v.len();
        let mut beliefs = Vec::with_capacity(len);
        let mut log_lik = Vec::with_capacity(len);
        for a in 0..len {
            let n = cap.min(len - a);
            let mut bs = Vec::with_capacity(regimes.len());
            let mut ls = Vec::with_capacity(regimes.len());
            for r in regimes {
                let mut f = SegmentFilter::new(&r.prior, r.dynamics.as_ref(), &r.b, &r.sigma_v);
                let mut b = Vec::with_capacity(n);
                let mut l = Vec::with_capacity(n);
                for x in &v[a..a + n] {
                    l.push(f.push(x)?);
                    b.push(f.belief().expect("pushed").clone());
                }
                bs.push(b);
                ls.push(l);
            }
            beliefs.push(bs);
            log_lik.push(ls);
        }
        Ok(Self { cap, len, beliefs, log_lik })
    }

    /// `p(h_{a+k} | v_{a:a+k})` within a segment of `s` starting at `a`.
    pub fn belief(&self, a: usize, s: usize, k: usize) -> &GaussianBelief {
        &self.beliefs[a][s][k]
    }

    /// `log p(v_{a+k} | v_{a:a+k-1}, s)`.
    fn step_log_lik(&self, a: usize, s: usize, k: usize) -> f64 {
        let l = &self.log_lik[a][s];
        if k == 0 { l[0] } else { l[k] - l[k - 1] }
    }
}

impl SegmentEmission for SegmentBank {
    fn num_regimes(&self) -> usize {
        self.log_lik.first().map_or(0, Vec::len)
    }
    fn len(&self) -> usize {
        self.len
    }
    fn log_segment(&self, s: usize, start: usize, n: usize) -> f64 {
        self.log_lik[start][s][n - 1]
    }
    fn log_segment_run(&self, s: usize, start: usize, max_len: usize) -> Vec<f64> {
        let n = max_len.min(self.cap).min(self.len - start);
        self.log_lik[start][s][..n].to_vec()
    }
}

/// Forward pass over count-duration states through the elapsed-count factorization.
///
/// Falls back to the general recursion without ASI or when pruning is requested.
pub fn cd_filter(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<SwitchPosterior> {
    require(p, Encoding::Cd)?;
    if !p.asi || p.pruning().is_some() {
        return super::filter(p, v);
    }
    let sp = p.validate(v)?;
    let (s_count, cap, t_len) = (sp.num_regimes, sp.cap, v.len());
    let bank = SegmentBank::new(&p.regimes, v, cap)?;
    let chain = &p.chain;
    let dur = chain.duration();
    let log_rho: Vec<Vec<f64>> = (0..s_count).map(|s| (1..=cap).map(|d| ln(chain.rho(s, d))).collect()).collect();
    // reg[s][k]: segment of s started at t - k >= 1, without its duration factor.
    let mut reg = vec![vec![f64::NEG_INFINITY; cap]; s_count];
    // init[s]: the segment present at the first step, without its initial-duration factors.
    let mut init: Vec<f64> = (0..s_count).map(|s| ln(chain.tilde_pi(s)) + bank.step_log_lik(0, s, 0)).collect();
    let init_log = |s: usize, d: usize, c: usize, t: usize| ln(dur.tilde_rho(s, d)) + ln(dur.tilde_tilde_rho(d, c + t));

    let mut steps = Vec::with_capacity(t_len);
    let mut log_norm = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t > 0 {
            let ends: Vec<f64> = (0..s_count)
                .map(|i| {
                    let mut terms: Vec<f64> = (0..cap.min(t)).map(|k| log_rho[i][k] + reg[i][k]).collect();
                    terms.extend((t..=cap).map(|d| init_log(i, d, 1, t - 1) + init[i]));
                    logsumexp(&terms)
                })
                .collect();
            for s in 0..s_count {
                for k in (1..cap.min(t)).rev() {
                    reg[s][k] = reg[s][k - 1] + bank.step_log_lik(t - k, s, k);
                }
                let enter = logsumexp(&(0..s_count).map(|i| ln(chain.pi(s, i)) + ends[i]).collect::<Vec<_>>());
                reg[s][0] = enter + bank.step_log_lik(t, s, 0);
                init[s] = if t < cap { init[s] + bank.step_log_lik(0, s, t) } else { f64::NEG_INFINITY };
            }
        }
        let mut logs = vec![f64::NEG_INFINITY; sp.len()];
        let mut mixtures: Vec<Vec<Component>> = vec![Vec::new(); sp.len()];
        for s in 0..s_count {
            for d in 1..=cap {
                for c in 1..=d {
                    let k = d - c;
                    let i = sp.index(SigmaState::Cd { s, d, c }).expect("in range");
                    let (l, a) = if k < t {
                        (log_rho[s][d - 1] + reg[s][k], t - k)
                    } else if c + t <= d {
                        (init_log(s, d, c, t) + init[s], 0)
                    } else {
                        continue;
                    };
                    if l > f64::NEG_INFINITY {
                        logs[i] = l;
                        let b = bank.belief(a, s, t - a).clone();
                        mixtures[i] = vec![Component { weight: 1.0, belief: b, start: Some(a), end: Some(t + c - 1) }];
                    }
                }
            }
        }
        let z = logsumexp(&logs);
        if !z.is_finite() {
            return Err(Error::Numerical(format!("filtered weights vanished at step {t}")));
        }
        for s in 0..s_count {
            reg[s].iter_mut().for_each(|x| *x -= z);
            init[s] -= z;
        }
        let weights: Vec<f64> = logs.iter().map(|l| (l - z).exp()).collect();
        for (w, m) in weights.iter().zip(mixtures.iter_mut()) {
            if *w <= 0.0 {
                m.clear();
            }
        }
        steps.push(SwitchBelief { weights, mixtures });
        log_norm.push(z);
    }
    let mut log_likelihood: f64 = log_norm.iter().sum();
    if p.condition_end {
        let last = steps.last().expect("T >= 1");
        let end: f64 = (0..sp.len()).filter(|&i| sp.state(i).count() == 1).map(|i| last.weights[i]).sum();
        if !(end > 0.0) {
            return Err(Error::Numerical("no segment can end at the last step".into()));
        }
        log_likelihood += end.ln();
    }
    Ok(SwitchPosterior { space: sp, steps, log_norm, log_likelihood, pruned_mass: vec![0.0; t_len] })
}

/// Smoothed posterior over count-duration states from segment posteriors and per-segment RTS.
///
/// Without ASI this runs the general filter and expectation correction.
pub fn cd_smooth(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<SwitchPosterior> {
    require(p, Encoding::Cd)?;
    if !p.asi || p.pruning().is_some() || p.collapse != super::Collapse::None {
        let f = super::filter(p, v)?;
        return super::smooth::expectation_correction(p, &f);
    }
    let sp = p.validate(v)?;
    let (s_count, cap, t_len) = (sp.num_regimes, sp.cap, v.len());
    let bank = SegmentBank::new(&p.regimes, v, cap)?;
    let tables = cd::segmental(&bank, &p.chain, EdOptions::default().asi(true).condition_end(p.condition_end))?;
    let mut smoothed: HashMap<(usize, usize, usize), Vec<GaussianBelief>> = HashMap::new();
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut weights = vec![0.0; sp.len()];
        let mut mixtures: Vec<Vec<Component>> = vec![Vec::new(); sp.len()];
        for s in 0..s_count {
            for d in 1..=cap {
                for c in 1..=d {
                    let tau = t + c - 1;
                    if tau >= tables.n_tau {
                        continue;
                    }
                    let g = tables.segment_posterior(tau, s, d);
                    if !(g > 0.0) {
                        continue;
                    }
                    let a = t.saturating_sub(d - c);
                    let n = tau.min(t_len - 1) - a + 1;
                    let run = match smoothed.entry((a, s, n)) {
                        std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                        std::collections::hash_map::Entry::Vacant(e) => {
                            let filt = (0..n).map(|k| bank.belief(a, s, k).clone()).collect::<Vec<_>>();
                            e.insert(rts_smooth_with(&filt, p.regimes[s].dynamics.as_ref())?)
                        }
                    };
                    let i = sp.index(SigmaState::Cd { s, d, c }).expect("in range");
                    weights[i] = g;
                    mixtures[i] = vec![Component { weight: 1.0, belief: run[t - a].clone(), start: Some(a), end: Some(tau) }];
                }
            }
        }
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        steps.push(SwitchBelief { weights, mixtures });
    }
    let log_norm = tables.expand().log_norm;
    Ok(SwitchPosterior { space: sp, steps, log_norm, log_likelihood: tables.log_likelihood, pruned_mass: vec![0.0; t_len] })
}

/// Most likely segmentation under ASI.
pub fn cd_viterbi(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<EdPath> {
    if !p.asi {
        return Err(Error::InvalidParameter("segment decoding needs across-segment independence".into()));
    }
    let cap = p.validate(v)?.cap;
    let bank = SegmentBank::new(&p.regimes, v, cap)?;
    cd::viterbi(&bank, &p.chain, EdOptions::default().asi(true).condition_end(p.condition_end))
}
