//! Backward recursions over `(sigma_t, h_t)`.
//!
//! With ASI and uncollapsed filtered mixtures the decreasing-count pass groups
//! components by segment start and the increasing-count pass builds a mixture
//! over segment ends; both are exact. Every other combination uses expectation
//! correction: the backward weight of each predecessor is evaluated at the
//! collapsed smoothed mean of the successor, and each conditional is RTS-stepped
//! (or kept filtered across an independent boundary) and collapsed to one Gaussian.

use nalgebra::DVector;

use super::filter::require;
use super::{end_weight, moments, predecessors, segmental, Component, SlgssmParams, SwitchBelief, SwitchPosterior};
use crate::chains::{Encoding, SigmaState};
use crate::edmsm::StateSpace;
use crate::error::{Error, Result};
use crate::lgssm::{log_gaussian, rts_step, GaussianBelief};
use crate::numeric::{ln, logsumexp};

/// Smoothed posterior `p(sigma_t, h_t | v_{1:T})`, choosing the exact pass when one applies.
pub fn smooth(p: &SlgssmParams, v: &[DVector<f64>], filtered: &SwitchPosterior) -> Result<SwitchPosterior> {
    let exact = p.asi && p.collapse == super::Collapse::None;
    match p.encoding {
        Encoding::Dec if exact => grouped_dec(p, filtered),
        Encoding::Inc if exact => end_mixture_inc(p, filtered),
        Encoding::Cd if exact && p.pruning().is_none() => segmental::cd_smooth(p, v),
        _ => expectation_correction(p, filtered),
    }
}

/// Smoother restricted to decreasing counts.
pub fn dec_smooth(p: &SlgssmParams, v: &[DVector<f64>], filtered: &SwitchPosterior) -> Result<SwitchPosterior> {
    require(p, Encoding::Dec)?;
    smooth(p, v, filtered)
}

/// Smoother restricted to increasing counts.
pub fn inc_smooth(p: &SlgssmParams, v: &[DVector<f64>], filtered: &SwitchPosterior) -> Result<SwitchPosterior> {
    require(p, Encoding::Inc)?;
    smooth(p, v, filtered)
}

/// Filtering followed by smoothing.
pub fn filter_smooth(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<(SwitchPosterior, SwitchPosterior)> {
    let f = if p.encoding == Encoding::Cd && p.asi && p.pruning().is_none() {
        segmental::cd_filter(p, v)?
    } else {
        super::filter(p, v)?
    };
    let s = smooth(p, v, &f)?;
    Ok((f, s))
}

/// Last smoothed step: filtered weights times the end condition.
fn last_step(p: &SlgssmParams, filtered: &SwitchPosterior) -> Result<SwitchBelief> {
    let sp = &filtered.space;
    let last = filtered.steps.last().expect("T >= 1");
    let t_end = filtered.len() - 1;
    let mut weights: Vec<f64> = last
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| if p.condition_end { w * end_weight(&p.chain, sp.state(i)) } else { *w })
        .collect();
    let z: f64 = weights.iter().sum();
    if !(z > 0.0) {
        return Err(Error::Numerical("no segment can end at the last step".into()));
    }
    weights.iter_mut().for_each(|w| *w /= z);
    let mixtures = weights
        .iter()
        .zip(&last.mixtures)
        .map(|(w, m)| {
            if *w > 0.0 {
                m.iter().map(|c| Component { end: p.condition_end.then_some(t_end).or(c.end), ..c.clone() }).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(SwitchBelief { weights, mixtures })
}

fn assemble(filtered: &SwitchPosterior, mut rev: Vec<SwitchBelief>) -> SwitchPosterior {
    rev.reverse();
    SwitchPosterior {
        space: filtered.space.clone(),
        steps: rev,
        log_norm: filtered.log_norm.clone(),
        log_likelihood: filtered.log_likelihood,
        pruned_mass: filtered.pruned_mass.clone(),
    }
}

/// Exact decreasing-count smoother under ASI with components labelled by segment start.
fn grouped_dec(p: &SlgssmParams, filtered: &SwitchPosterior) -> Result<SwitchPosterior> {
    let sp = &filtered.space;
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let t_len = filtered.len();
    let mut out = vec![last_step(p, filtered)?];
    for t in (0..t_len - 1).rev() {
        let next = out.last().unwrap();
        let fa = &filtered.steps[t];
        // Mass of segments of s' that start at t + 1.
        let fresh: Vec<f64> = (0..s_count)
            .map(|s2| {
                (1..=cap)
                    .map(|c| {
                        let i = s2 * cap + c - 1;
                        next.mixtures[i].iter().filter(|x| x.start == Some(t + 1)).map(|x| next.weights[i] * x.weight).sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        let ending: Vec<f64> = (0..s_count)
            .map(|s2| (0..s_count).map(|i| p.chain.pi(s2, i) * fa.weights[i * cap]).sum())
            .collect();
        let mut weights = vec![0.0; sp.len()];
        let mut mixtures: Vec<Vec<Component>> = vec![Vec::new(); sp.len()];
        for s in 0..s_count {
            let reg = &p.regimes[s];
            let i1 = s * cap;
            if fa.weights[i1] > 0.0 {
                let f: f64 = (0..s_count)
                    .filter(|&s2| ending[s2] > 0.0)
                    .map(|s2| p.chain.pi(s2, s) * fresh[s2] / ending[s2])
                    .sum();
                let g = fa.weights[i1] * f;
                if g > 0.0 {
                    weights[i1] = g;
                    mixtures[i1] = fa.mixtures[i1].iter().map(|c| Component { end: Some(t), ..c.clone() }).collect();
                }
            }
            for c in 2..=cap {
                let (i, j) = (s * cap + c - 1, s * cap + c - 2);
                let mut comps = Vec::new();
                for x in next.mixtures[j].iter().filter(|x| x.start.is_some_and(|a| a <= t)) {
                    let w = next.weights[j] * x.weight;
                    let src = fa.mixtures[i].iter().find(|y| y.start == x.start).ok_or_else(|| {
                        Error::Numerical(format!("missing filtered component for segment start {:?} at step {t}", x.start))
                    })?;
                    let b = rts_step(&src.belief, &x.belief, reg.dynamics.as_ref())?;
                    comps.push(Component { weight: w, belief: b, start: x.start, end: x.end });
                }
                let g: f64 = comps.iter().map(|x| x.weight).sum();
                if g > 0.0 {
                    comps.iter_mut().for_each(|x| x.weight /= g);
                    weights[i] = g;
                    mixtures[i] = comps;
                }
            }
        }
        normalize_step(&mut weights, &mut mixtures, t)?;
        out.push(SwitchBelief { weights, mixtures });
    }
    Ok(assemble(filtered, out))
}

/// Exact increasing-count smoother under ASI with components labelled by segment end.
fn end_mixture_inc(p: &SlgssmParams, filtered: &SwitchPosterior) -> Result<SwitchPosterior> {
    let sp = &filtered.space;
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let t_len = filtered.len();
    let mut out = vec![last_step(p, filtered)?];
    for t in (0..t_len - 1).rev() {
        let next = out.last().unwrap();
        let fa = &filtered.steps[t];
        let ends: Vec<f64> = (0..s_count)
            .map(|i| (1..=cap).map(|c| (1.0 - p.chain.lambda(i, c)) * fa.weights[i * cap + c - 1]).sum())
            .collect();
        let ratio: Vec<f64> = (0..s_count)
            .map(|j| {
                let d: f64 = (0..s_count).map(|i| p.chain.pi(j, i) * ends[i]).sum();
                if d > 0.0 { next.weights[j * cap] / d } else { 0.0 }
            })
            .collect();
        let mut weights = vec![0.0; sp.len()];
        let mut mixtures: Vec<Vec<Component>> = vec![Vec::new(); sp.len()];
        for s in 0..s_count {
            let reg = &p.regimes[s];
            let back: f64 = (0..s_count).map(|j| p.chain.pi(j, s) * ratio[j]).sum();
            for c in 1..=cap {
                let i = s * cap + c - 1;
                let a = fa.weights[i];
                if a <= 0.0 {
                    continue;
                }
                let own = super::moments(&fa.mixtures[i])?;
                let end_w = (1.0 - p.chain.lambda(s, c)) * a * back;
                let stay_w = if c < cap { next.weights[i + 1] } else { 0.0 };
                let mut comps = Vec::new();
                if end_w > 0.0 {
                    comps.push(Component { weight: end_w, belief: own.clone(), start: Some(t + 1 - c), end: Some(t) });
                }
                if stay_w > 0.0 {
                    for x in &next.mixtures[i + 1] {
                        let b = rts_step(&own, &x.belief, reg.dynamics.as_ref())?;
                        comps.push(Component { weight: stay_w * x.weight, belief: b, start: Some(t + 1 - c), end: x.end });
                    }
                }
                let g = end_w + stay_w;
                if g > 0.0 {
                    comps.iter_mut().for_each(|x| x.weight /= g);
                    weights[i] = g;
                    mixtures[i] = comps;
                }
            }
        }
        normalize_step(&mut weights, &mut mixtures, t)?;
        out.push(SwitchBelief { weights, mixtures });
    }
    Ok(assemble(filtered, out))
}

fn normalize_step(weights: &mut [f64], mixtures: &mut [Vec<Component>], t: usize) -> Result<()> {
    let z: f64 = weights.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Numerical(format!("smoothed weights vanished at step {t}")));
    }
    for (w, m) in weights.iter_mut().zip(mixtures.iter_mut()) {
        *w /= z;
        if *w <= 0.0 {
            m.clear();
        }
    }
    Ok(())
}

/// Expectation-correction smoother; every smoothed conditional is a single Gaussian.
pub(crate) fn expectation_correction(p: &SlgssmParams, filtered: &SwitchPosterior) -> Result<SwitchPosterior> {
    let sp: &StateSpace = &filtered.space;
    let states: Vec<SigmaState> = (0..sp.len()).map(|i| sp.state(i)).collect();
    let preds: Vec<Vec<super::Pred>> = states.iter().map(|&st| predecessors(sp, &p.chain, st)).collect();
    let t_len = filtered.len();
    let collapsed = |b: &SwitchBelief| -> Result<Vec<Option<GaussianBelief>>> {
        b.weights
            .iter()
            .zip(&b.mixtures)
            .map(|(w, m)| if *w > 0.0 && !m.is_empty() { moments(m).map(Some) } else { Ok(None) })
            .collect()
    };
    let last = last_step(p, filtered)?;
    let mut next_h = collapsed(&last)?;
    let mut out = vec![single(&last, &next_h)];
    for t in (0..t_len - 1).rev() {
        let fa = &filtered.steps[t];
        let fh = collapsed(fa)?;
        let next = out.last().unwrap();
        let mut weights = vec![0.0; sp.len()];
        let mut parts: Vec<(Vec<f64>, Vec<GaussianBelief>)> = vec![(Vec::new(), Vec::new()); sp.len()];
        for (j, st) in states.iter().enumerate() {
            let g_next = next.weights[j];
            let Some(h_next) = next_h[j].as_ref().filter(|_| g_next > 0.0) else { continue };
            let reg = &p.regimes[st.regime()];
            let live: Vec<&super::Pred> = preds[j].iter().filter(|pr| fa.weights[pr.index] > 0.0).collect();
            let mut log_q = Vec::with_capacity(live.len());
            for pr in &live {
                let mut lq = ln(pr.prob) + ln(fa.weights[pr.index]);
                if live.len() > 1 {
                    let pred = if pr.new_segment && p.asi {
                        reg.prior.clone()
                    } else {
                        reg.dynamics.propagate(fh[pr.index].as_ref().expect("weighted state has a belief"))?.belief
                    };
                    lq += log_gaussian(&h_next.mean, &pred.mean, &(&pred.cov + &h_next.cov))?;
                }
                log_q.push(lq);
            }
            let lz = logsumexp(&log_q);
            if !lz.is_finite() {
                log::debug!("no predecessor supports state {st:?} at step {}", t + 1);
                continue;
            }
            for (pr, lq) in live.iter().zip(&log_q) {
                let joint = g_next * (lq - lz).exp();
                if joint <= 0.0 {
                    continue;
                }
                let own = fh[pr.index].as_ref().expect("weighted state has a belief");
                let b = if pr.new_segment && p.asi { own.clone() } else { rts_step(own, h_next, reg.dynamics.as_ref())? };
                weights[pr.index] += joint;
                parts[pr.index].0.push(joint);
                parts[pr.index].1.push(b);
            }
        }
        let z: f64 = weights.iter().sum();
        if !(z > 0.0) {
            return Err(Error::Numerical(format!("smoothed weights vanished at step {t}")));
        }
        let mut h = Vec::with_capacity(sp.len());
        let mut mixtures = Vec::with_capacity(sp.len());
        for (i, (w, comps)) in parts.iter().enumerate() {
            weights[i] /= z;
            if weights[i] > 0.0 {
                let b = crate::lgssm::collapse_parts(w, comps)?;
                mixtures.push(vec![Component::new(1.0, b.clone(), None)]);
                h.push(Some(b));
            } else {
                mixtures.push(Vec::new());
                h.push(None);
            }
        }
        next_h = h;
        out.push(SwitchBelief { weights, mixtures });
    }
    Ok(assemble(filtered, out))
}

fn single(b: &SwitchBelief, h: &[Option<GaussianBelief>]) -> SwitchBelief {
    let mixtures = h.iter().map(|x| x.iter().map(|g| Component::new(1.0, g.clone(), None)).collect()).collect();
    SwitchBelief { weights: b.weights.clone(), mixtures }
}
