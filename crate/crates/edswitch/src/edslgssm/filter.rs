//! Forward recursion over `(sigma_t, h_t)` for every encoding.
//!
//! Each state's mixture gathers one group of components per predecessor. A
//! continuing predecessor propagates its components through the regime dynamics
//! and corrects them on `v_t`. Segment starts share one entry mixture per regime:
//! under ASI it is the regime prior corrected on `v_t`, weighted by the total
//! ending mass; otherwise every ending component is propagated and corrected.

use nalgebra::DVector;

use super::{continuing, end_weight, enders, entry_factor, reduce, Component, Regime, SlgssmParams, SwitchBelief, SwitchPosterior};
use crate::approx::prune_row;
use crate::chains::{initial_probability, Encoding, SigmaState};
use crate::edmsm::StateSpace;
use crate::error::{invalid, Error, Result};
use crate::lgssm::{correct, GaussianBelief};
use crate::numeric::{ln, logsumexp};

/// Component with an unnormalized log weight.
type Weighted = (f64, Component);

/// Filtered posterior `p(sigma_t, h_t | v_{1:t})` for every `t`.
pub fn filter(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<SwitchPosterior> {
    let sp = p.validate(v)?;
    let states: Vec<SigmaState> = (0..sp.len()).map(|i| sp.state(i)).collect();
    let mut steps: Vec<SwitchBelief> = Vec::with_capacity(v.len());
    let mut log_norm = Vec::with_capacity(v.len());
    let mut pruned_mass = Vec::with_capacity(v.len());

    let first: Vec<(GaussianBelief, f64)> =
        p.regimes.iter().map(|r| correct(&r.prior, &r.b, &r.sigma_v, &v[0])).collect::<Result<_>>()?;
    let groups: Vec<Vec<Weighted>> = states
        .iter()
        .map(|&st| {
            let p0 = initial_probability(&p.chain, st);
            if p0 > 0.0 {
                let (b, ll) = &first[st.regime()];
                vec![(ln(p0) + ll, Component::new(1.0, b.clone(), Some(0)))]
            } else {
                Vec::new()
            }
        })
        .collect();
    push_step(p, &sp, 0, groups, &mut steps, &mut log_norm, &mut pruned_mass)?;

    for t in 1..v.len() {
        let prev = &steps[t - 1];
        let entries: Vec<Vec<Weighted>> =
            (0..p.num_regimes()).map(|s| entry_mixture(p, &sp, prev, s, t, &v[t])).collect::<Result<_>>()?;
        let mut groups = Vec::with_capacity(sp.len());
        for &st in &states {
            let reg = &p.regimes[st.regime()];
            let mut g: Vec<Weighted> = Vec::new();
            if let Some(pr) = continuing(&sp, &p.chain, st) {
                let a = prev.weights[pr.index];
                if a > 0.0 {
                    let base = ln(pr.prob) + ln(a);
                    for c in &prev.mixtures[pr.index] {
                        let (b, ll) = step(reg, &c.belief, &v[t])?;
                        g.push((base + ln(c.weight) + ll, Component::new(1.0, b, c.start)));
                    }
                }
            }
            let f = entry_factor(&p.chain, st);
            if f > 0.0 {
                let lf = ln(f);
                g.extend(entries[st.regime()].iter().map(|(lw, c)| (lw + lf, c.clone())));
            }
            groups.push(g);
        }
        push_step(p, &sp, t, groups, &mut steps, &mut log_norm, &mut pruned_mass)?;
    }

    let last = steps.last().expect("T >= 1");
    let mut log_likelihood: f64 = log_norm.iter().sum();
    if p.condition_end {
        let end: f64 = states.iter().zip(&last.weights).map(|(&st, w)| w * end_weight(&p.chain, st)).sum();
        if !(end > 0.0) {
            return Err(Error::Numerical("no segment can end at the last step".into()));
        }
        log_likelihood += end.ln();
    }
    Ok(SwitchPosterior { space: sp, steps, log_norm, log_likelihood, pruned_mass })
}

/// Filter restricted to decreasing counts.
pub fn dec_filter(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<SwitchPosterior> {
    require(p, Encoding::Dec)?;
    filter(p, v)
}

/// Filter restricted to increasing counts.
pub fn inc_filter(p: &SlgssmParams, v: &[DVector<f64>]) -> Result<SwitchPosterior> {
    require(p, Encoding::Inc)?;
    filter(p, v)
}

pub(crate) fn require(p: &SlgssmParams, e: Encoding) -> Result<()> {
    if p.encoding != e {
        return Err(Error::EncodingMismatch { expected: e.to_string(), found: p.encoding.to_string() });
    }
    Ok(())
}

/// Predict with the regime dynamics, then correct on `v`.
fn step(reg: &Regime, belief: &GaussianBelief, v: &DVector<f64>) -> Result<(GaussianBelief, f64)> {
    let pred = reg.dynamics.propagate(belief)?.belief;
    correct(&pred, &reg.b, &reg.sigma_v, v)
}

/// Components for a segment of `s` starting at `t`, before the `sigma_t`-only factor.
fn entry_mixture(p: &SlgssmParams, sp: &StateSpace, prev: &SwitchBelief, s: usize, t: usize, v: &DVector<f64>) -> Result<Vec<Weighted>> {
    let reg = &p.regimes[s];
    let from: Vec<(usize, f64)> =
        enders(sp, &p.chain, s).into_iter().filter(|&(i, _)| prev.weights[i] > 0.0).collect();
    if from.is_empty() {
        return Ok(Vec::new());
    }
    if p.asi {
        let mass: f64 = from.iter().map(|&(i, k)| k * prev.weights[i]).sum();
        let (b, ll) = correct(&reg.prior, &reg.b, &reg.sigma_v, v)?;
        return Ok(vec![(ln(mass) + ll, Component::new(1.0, b, Some(t)))]);
    }
    let mut out = Vec::new();
    for (i, k) in from {
        let base = ln(k) + ln(prev.weights[i]);
        for c in &prev.mixtures[i] {
            let (b, ll) = step(reg, &c.belief, v)?;
            out.push((base + ln(c.weight) + ll, Component::new(1.0, b, Some(t))));
        }
    }
    Ok(out)
}

/// Normalizes one step, prunes and collapses it, and appends it.
fn push_step(
    p: &SlgssmParams,
    sp: &StateSpace,
    t: usize,
    groups: Vec<Vec<Weighted>>,
    steps: &mut Vec<SwitchBelief>,
    log_norm: &mut Vec<f64>,
    pruned_mass: &mut Vec<f64>,
) -> Result<()> {
    let masses: Vec<f64> = groups.iter().map(|g| logsumexp(&g.iter().map(|x| x.0).collect::<Vec<_>>())).collect();
    let z = logsumexp(&masses);
    if !z.is_finite() {
        return Err(Error::Numerical(format!("filtered weights vanished at step {t}")));
    }
    let mut weights: Vec<f64> = masses.iter().map(|m| (m - z).exp()).collect();
    let dropped = match p.pruning() {
        Some(cfg) => prune_row(&mut weights, sp.len() / sp.num_regimes, cfg),
        None => 0.0,
    };
    let mut mixtures = Vec::with_capacity(groups.len());
    for ((g, m), w) in groups.into_iter().zip(&masses).zip(&weights) {
        if *w > 0.0 {
            let comps = g.into_iter().map(|(lw, c)| Component { weight: (lw - m).exp(), ..c }).collect();
            mixtures.push(reduce(comps, p.collapse)?);
        } else {
            mixtures.push(Vec::new());
        }
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return invalid(format!("pruning removed every state at step {t}"));
    }
    steps.push(SwitchBelief { weights, mixtures });
    log_norm.push(z);
    pruned_mass.push(dropped);
    Ok(())
}
