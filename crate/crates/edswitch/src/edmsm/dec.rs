//! Decreasing-count encoding: `c_t` is the number of steps left in the segment.

use nalgebra::DMatrix;

use super::{check_emission, count_cap, tie_and_normalize, EdOptions, EdPath, EdPosterior, ScaledEmissions, StateSpace};
use crate::chains::{DMax, DurationModel, EdChain, Encoding, RegimeTransition};
use crate::error::{invalid, Error, Result};
use crate::hmm::em::weighted_ar_fit;
use crate::hmm::{Emission, SarmCoefficients};
use crate::numeric::{ln, normalize};

/// Emissions at each step for a continuing and for a freshly started segment.
struct DecEmissions {
    scaled: ScaledEmissions,
    asi: bool,
}

impl DecEmissions {
    fn new<E: Emission + ?Sized>(em: &E, opts: EdOptions) -> Result<Self> {
        if opts.asi && em.order() > 1 {
            return invalid("across-segment independence with decreasing counts needs order <= 1");
        }
        Ok(Self { scaled: ScaledEmissions::new(em)?, asi: opts.asi })
    }

    fn cont(&self, t: usize, s: usize) -> f64 {
        self.scaled.at(t, s, t)
    }

    fn new_seg(&self, t: usize, s: usize) -> f64 {
        self.scaled.at(t, s, if self.asi { 0 } else { t })
    }

    fn log_cont(&self, t: usize, s: usize) -> f64 {
        self.scaled.log_at(t, s, t)
    }

    fn log_new(&self, t: usize, s: usize) -> f64 {
        self.scaled.log_at(t, s, if self.asi { 0 } else { t })
    }
}

fn setup<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<(DecEmissions, StateSpace)> {
    check_emission(chain, em)?;
    if chain.d_max() == DMax::Unbounded && !opts.condition_end {
        return invalid("unbounded durations with decreasing counts need end conditioning");
    }
    let cap = count_cap(chain, em.len());
    Ok((DecEmissions::new(em, opts)?, StateSpace::new(Encoding::Dec, chain.num_regimes(), cap)))
}

/// Unnormalized forward row at `t >= 1` from the normalized row at `t - 1`.
fn forward_row(prev: &[f64], t: usize, chain: &EdChain, e: &DecEmissions, sp: &StateSpace) -> Vec<f64> {
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let mut out = vec![0.0; sp.len()];
    for s in 0..s_count {
        let pre: f64 = (0..s_count).map(|i| chain.pi(s, i) * prev[i * cap]).sum();
        let (ec, en) = (e.cont(t, s), e.new_seg(t, s));
        for c in 1..=cap {
            let cont = if c < cap { prev[s * cap + c] } else { 0.0 };
            out[s * cap + c - 1] = ec * cont + en * chain.rho(s, c) * pre;
        }
    }
    out
}

struct Forward {
    alpha: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
}

fn forward(chain: &EdChain, e: &DecEmissions, sp: &StateSpace, t_len: usize) -> Result<Forward> {
    let cap = sp.cap;
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut log_norm = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = if t == 0 {
            let mut r = vec![0.0; sp.len()];
            for s in 0..sp.num_regimes {
                for c in 1..=cap {
                    r[s * cap + c - 1] = chain.tilde_pi(s) * chain.duration().tilde_rho(s, c) * e.new_seg(0, s);
                }
            }
            r
        } else {
            forward_row(&alpha[t - 1], t, chain, e, sp)
        };
        let z = normalize(&mut row);
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Numerical(format!("forward pass vanished at step {t}")));
        }
        log_norm.push(z.ln() + e.scaled.shift[t]);
        alpha.push(row);
    }
    Ok(Forward { alpha, log_norm })
}

fn end_mask(sp: &StateSpace, row: &[f64], condition_end: bool) -> Vec<f64> {
    row.iter()
        .enumerate()
        .map(|(i, &x)| if !condition_end || sp.state(i).count() == 1 { x } else { 0.0 })
        .collect()
}

fn log_likelihood(fw: &Forward, sp: &StateSpace, condition_end: bool) -> Result<f64> {
    let base: f64 = fw.log_norm.iter().sum();
    if !condition_end {
        return Ok(base);
    }
    let end: f64 = end_mask(sp, fw.alpha.last().unwrap(), true).iter().sum();
    if !(end > 0.0) {
        return Err(Error::Numerical("no segment can end at the last step".into()));
    }
    Ok(base + end.ln())
}

/// Forward and backward passes computed independently, combined into `gamma`.
pub fn forward_backward<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<EdPosterior> {
    let (e, sp) = setup(em, chain, opts)?;
    let t_len = em.len();
    let fw = forward(chain, &e, &sp, t_len)?;
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let mut beta = vec![vec![0.0; sp.len()]; t_len];
    beta[t_len - 1] = end_mask(&sp, &vec![1.0; sp.len()], opts.condition_end);
    for t in (0..t_len - 1).rev() {
        let z = (fw.log_norm[t + 1] - e.scaled.shift[t + 1]).exp();
        let next = &beta[t + 1];
        let restart: Vec<f64> = (0..s_count)
            .map(|j| e.new_seg(t + 1, j) * (1..=cap).map(|c| chain.rho(j, c) * next[j * cap + c - 1]).sum::<f64>())
            .collect();
        let mut row = vec![0.0; sp.len()];
        for s in 0..s_count {
            row[s * cap] = (0..s_count).map(|j| chain.pi(j, s) * restart[j]).sum::<f64>() / z;
            let ec = e.cont(t + 1, s);
            for c in 2..=cap {
                row[s * cap + c - 1] = ec * next[s * cap + c - 2] / z;
            }
        }
        beta[t] = row;
    }
    let gamma = fw
        .alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let mut g: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
            normalize(&mut g);
            g
        })
        .collect();
    let log_likelihood = log_likelihood(&fw, &sp, opts.condition_end)?;
    Ok(EdPosterior { space: sp, alpha: fw.alpha, beta: Some(beta), gamma, log_norm: fw.log_norm, log_likelihood })
}

/// Filtering followed by a backward sweep over `p(sigma_t | sigma_{t+1}, v_{1:t+1})`.
pub fn smooth_sequential<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<EdPosterior> {
    let (e, sp) = setup(em, chain, opts)?;
    let t_len = em.len();
    let fw = forward(chain, &e, &sp, t_len)?;
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let mut gamma = vec![vec![0.0; sp.len()]; t_len];
    let mut last = end_mask(&sp, &fw.alpha[t_len - 1], opts.condition_end);
    normalize(&mut last);
    gamma[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        let a = &fw.alpha[t];
        let d = forward_row(a, t + 1, chain, &e, &sp);
        let g_next = &gamma[t + 1];
        let ratio = |i: usize| if d[i] > 0.0 { g_next[i] / d[i] } else { 0.0 };
        let restart: Vec<f64> = (0..s_count)
            .map(|j| e.new_seg(t + 1, j) * (1..=cap).map(|c| chain.rho(j, c) * ratio(j * cap + c - 1)).sum::<f64>())
            .collect();
        let mut row = vec![0.0; sp.len()];
        for s in 0..s_count {
            row[s * cap] = a[s * cap] * (0..s_count).map(|j| chain.pi(j, s) * restart[j]).sum::<f64>();
            let ec = e.cont(t + 1, s);
            for c in 2..=cap {
                row[s * cap + c - 1] = ratio(s * cap + c - 2) * a[s * cap + c - 1] * ec;
            }
        }
        gamma[t] = row;
    }
    let log_likelihood = log_likelihood(&fw, &sp, opts.condition_end)?;
    Ok(EdPosterior { space: sp, alpha: fw.alpha, beta: None, gamma, log_norm: fw.log_norm, log_likelihood })
}

/// Most likely augmented path; ties resolve to the lowest state index.
pub fn viterbi<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<EdPath> {
    let (e, sp) = setup(em, chain, opts)?;
    let t_len = em.len();
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let n = sp.len();
    let mut delta = vec![f64::NEG_INFINITY; n];
    for s in 0..s_count {
        for c in 1..=cap {
            delta[s * cap + c - 1] = ln(chain.tilde_pi(s)) + ln(chain.duration().tilde_rho(s, c)) + e.log_new(0, s);
        }
    }
    let mut psi = vec![vec![usize::MAX; n]; t_len];
    for t in 1..t_len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for s in 0..s_count {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..s_count {
                let v = ln(chain.pi(s, i)) + delta[i * cap];
                if v > best.0 {
                    best = (v, i * cap);
                }
            }
            let (lc, ln_new) = (e.log_cont(t, s), e.log_new(t, s));
            for c in 1..=cap {
                let idx = s * cap + c - 1;
                let restart = ln_new + ln(chain.rho(s, c)) + best.0;
                let cont = if c < cap { lc + delta[idx + 1] } else { f64::NEG_INFINITY };
                let (v, from) = if cont > restart { (cont, idx + 1) } else { (restart, best.1) };
                next[idx] = v;
                psi[t][idx] = from;
            }
        }
        delta = next;
    }
    let mut end = (f64::NEG_INFINITY, usize::MAX);
    for (i, &v) in delta.iter().enumerate() {
        if opts.condition_end && sp.state(i).count() != 1 {
            continue;
        }
        if v > end.0 {
            end = (v, i);
        }
    }
    if end.1 == usize::MAX {
        return Err(Error::Infeasible("no path has positive probability".into()));
    }
    let mut idx = vec![end.1; t_len];
    for t in (1..t_len).rev() {
        idx[t - 1] = psi[t][idx[t]];
    }
    Ok(EdPath::new(idx.into_iter().map(|i| sp.state(i)).collect(), end.0))
}

/// Posterior restart weights `p(c_{t-1} = 1, sigma_t | v)` (row 0 holds the initial segment).
pub fn restart_weights<E: Emission + ?Sized>(post: &EdPosterior, em: &E, chain: &EdChain, opts: EdOptions) -> Result<Vec<Vec<f64>>> {
    let e = DecEmissions::new(em, opts)?;
    let sp = &post.space;
    let cap = sp.cap;
    let mut out = vec![post.gamma[0].clone()];
    for t in 1..post.len() {
        let a = &post.alpha[t - 1];
        let d = forward_row(a, t, chain, &e, sp);
        let mut row = vec![0.0; sp.len()];
        for s in 0..sp.num_regimes {
            let pre: f64 = (0..sp.num_regimes).map(|i| chain.pi(s, i) * a[i * cap]).sum();
            let en = e.new_seg(t, s);
            for c in 1..=cap {
                let i = s * cap + c - 1;
                if d[i] > 0.0 {
                    row[i] = post.gamma[t][i] * en * chain.rho(s, c) * pre / d[i];
                }
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Expected switch counts `sum_t p(s_{t-1} = i, c_{t-1} = 1, s_t = j | v)`, indexed `[j][i]`.
pub fn expected_switches<E: Emission + ?Sized>(post: &EdPosterior, em: &E, chain: &EdChain, opts: EdOptions) -> Result<Vec<Vec<f64>>> {
    let e = DecEmissions::new(em, opts)?;
    let sp = &post.space;
    let (s_count, cap) = (sp.num_regimes, sp.cap);
    let mut counts = vec![vec![0.0; s_count]; s_count];
    for t in 1..post.len() {
        let a = &post.alpha[t - 1];
        let d = forward_row(a, t, chain, &e, sp);
        for j in 0..s_count {
            let en = e.new_seg(t, j);
            let w: f64 = (1..=cap)
                .map(|c| {
                    let i = j * cap + c - 1;
                    if d[i] > 0.0 { post.gamma[t][i] * chain.rho(j, c) / d[i] } else { 0.0 }
                })
                .sum();
            for i in 0..s_count {
                counts[j][i] += w * en * chain.pi(j, i) * a[i * cap];
            }
        }
    }
    Ok(counts)
}

/// Duration update from restart weights; bins of `tie_width` counts share one value.
///
/// The initial segment contributes unless it has its own duration table.
pub fn learn_rho<E: Emission + ?Sized>(
    post: &EdPosterior,
    em: &E,
    chain: &EdChain,
    opts: EdOptions,
    tie_width: usize,
) -> Result<DurationModel> {
    let DMax::Finite(d_max) = chain.d_max() else {
        return invalid("duration learning needs a finite maximum duration");
    };
    let w = restart_weights(post, em, chain, opts)?;
    let dur = chain.duration();
    let d_min = dur.d_min();
    let cap = post.space.cap;
    let first = usize::from(dur.has_custom_tilde_rho());
    let mut rows = Vec::with_capacity(chain.num_regimes());
    for s in 0..chain.num_regimes() {
        let counts: Vec<f64> = (d_min..=d_max).map(|c| w[first..].iter().map(|r| r[s * cap + c - 1]).sum()).collect();
        rows.push(match tie_and_normalize(&counts, tie_width) {
            Some(r) => r,
            None => {
                log::info!("regime {s} never starts a segment; keeping its durations");
                (d_min..=d_max).map(|d| dur.rho(s, d)).collect()
            }
        });
    }
    let mut out = DurationModel::from_table(d_min, d_max, rows)?;
    if dur.has_custom_tilde_rho() {
        out = out.with_tilde_rho((0..chain.num_regimes()).map(|s| (1..=d_max).map(|d| dur.tilde_rho(s, d)).collect()).collect())?;
    }
    Ok(out)
}

/// Explicit-duration switching autoregressive model.
#[derive(Debug, Clone)]
pub struct GsarmParams {
    pub coeffs: SarmCoefficients,
    pub chain: EdChain,
}

/// Full EM (autoregressive coefficients, noise, durations, switches, initial regime)
/// with decreasing counts; the first `k` observations condition but are not scored.
pub fn em_gsarm(
    params0: &GsarmParams,
    v: &[f64],
    opts: EdOptions,
    tie_width: usize,
    max_iters: usize,
    rel_tol: f64,
) -> Result<(GsarmParams, crate::hmm::EmTrace)> {
    if opts.asi {
        return invalid("EM is implemented for across-segment dependence only");
    }
    let k = params0.coeffs.a.first().map_or(0, Vec::len);
    if v.len() <= k {
        return invalid("EM needs more observations than the autoregressive order");
    }
    let mut p = params0.clone();
    let mut trace = crate::hmm::EmTrace::default();
    for it in 0..=max_iters {
        let em = p.coeffs.emission(v, k);
        let post = smooth_sequential(&em, &p.chain, opts)?;
        let ll = post.log_likelihood;
        let done = trace.log_likelihood.last().is_some_and(|&prev: &f64| (ll - prev).abs() <= rel_tol * prev.abs().max(1e-300));
        trace.log_likelihood.push(ll);
        if done {
            trace.converged = true;
            break;
        }
        if it == max_iters {
            break;
        }
        let gamma = post.smoothed_regimes();
        let s_count = p.chain.num_regimes();
        let mut a = Vec::with_capacity(s_count);
        let mut sigma = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let w: Vec<f64> = gamma.iter().map(|g| g[s]).collect();
            if w[k..].iter().sum::<f64>() <= 0.0 {
                a.push(p.coeffs.a[s].clone());
                sigma.push(p.coeffs.sigma[s]);
                continue;
            }
            let (coef, var) = weighted_ar_fit(v, k, &w);
            a.push(coef);
            sigma.push(var.sqrt());
        }
        let duration = learn_rho(&post, &em, &p.chain, opts, tie_width)?;
        let sw = expected_switches(&post, &em, &p.chain, opts)?;
        let mut pi = DMatrix::zeros(s_count, s_count);
        for i in 0..s_count {
            let col: f64 = (0..s_count).map(|j| sw[j][i]).sum();
            for j in 0..s_count {
                pi[(j, i)] = if col > 0.0 { sw[j][i] / col } else { p.chain.pi(j, i) };
            }
        }
        let mut tilde = gamma[0].clone();
        normalize(&mut tilde);
        let chain = EdChain::new(RegimeTransition::new(tilde, pi)?, duration)?;
        p = GsarmParams { coeffs: SarmCoefficients::new(a, sigma)?, chain };
    }
    Ok((p, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::{sample_chain, substream, DurationModel, SigmaState};
    use crate::hmm::TableEmission;
    use crate::oracle::{enumerate_ed, PathEmission};
    use rand::Rng;

    fn random_case(seed: u64, t_len: usize, s_count: usize, d_max: usize) -> (EdChain, TableEmission) {
        let mut rng = substream(seed, 0);
        let mut w = |n: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            normalize(&mut v);
            v
        };
        let tilde = w(s_count);
        let cols: Vec<Vec<f64>> = (0..s_count).map(|_| w(s_count)).collect();
        let rows: Vec<Vec<f64>> = (0..s_count).map(|_| w(d_max)).collect();
        let em: Vec<Vec<f64>> = (0..t_len).map(|_| w(s_count)).collect();
        let pi = DMatrix::from_fn(s_count, s_count, |j, i| cols[i][j]);
        let chain = EdChain::new(RegimeTransition::new(tilde, pi).unwrap(), DurationModel::from_table(1, d_max, rows).unwrap()).unwrap();
        (chain, TableEmission::from_probs(&em).unwrap())
    }

    #[test]
    fn matches_enumeration() {
        for seed in 0..6 {
            let (chain, em) = random_case(seed, 6, 2, 3);
            for cond in [false, true] {
                let opts = EdOptions::default().condition_end(cond);
                let ex = enumerate_ed(&chain, Encoding::Dec, PathEmission::Markov { em: &em, asi: false }, cond).unwrap();
                let fb = forward_backward(&em, &chain, opts).unwrap();
                let sq = smooth_sequential(&em, &chain, opts).unwrap();
                assert!((fb.log_likelihood - ex.log_evidence).abs() < 1e-10);
                for t in 0..6 {
                    for (&st, &p) in &ex.smoothed[t] {
                        assert!((fb.smoothed(t, st) - p).abs() < 1e-10);
                        assert!((sq.smoothed(t, st) - p).abs() < 1e-10);
                    }
                    for (&st, &p) in &ex.filtered[t] {
                        assert!((fb.filtered(t, st) - p).abs() < 1e-10);
                    }
                }
                let vp = viterbi(&em, &chain, opts).unwrap();
                assert!((vp.log_joint - ex.map_log_joint).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn point_mass_ladder() {
        let chain = EdChain::new(RegimeTransition::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap(), DurationModel::point_mass(1, 3).unwrap()).unwrap();
        let em = TableEmission::new(vec![vec![0.0]; 7]).unwrap();
        let post = smooth_sequential(&em, &chain, EdOptions::default()).unwrap();
        for t in 0..7 {
            let c = 3 - t % 3;
            assert!((post.smoothed(t, SigmaState::Dec { s: 0, c }) - 1.0).abs() < 1e-15);
        }
        let path = viterbi(&em, &chain, EdOptions::default()).unwrap();
        assert_eq!(path.sigma[3], SigmaState::Dec { s: 0, c: 3 });
    }

    #[test]
    fn asi_rejects_high_order() {
        let coeffs = SarmCoefficients::new(vec![vec![0.5, 0.1]], vec![1.0]).unwrap();
        let v = vec![0.0; 5];
        let em = coeffs.emission(&v, 0);
        let chain = EdChain::new(RegimeTransition::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap(), DurationModel::uniform(1, 1, 2).unwrap()).unwrap();
        assert!(forward_backward(&em, &chain, EdOptions::default().asi(true)).is_err());
    }

    #[test]
    fn asi_matches_enumeration() {
        let coeffs = SarmCoefficients::new(vec![vec![0.9], vec![-0.4]], vec![0.7, 1.2]).unwrap();
        let (chain, _) = random_case(3, 6, 2, 3);
        let mut rng = substream(4, 0);
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let em = coeffs.emission(&v, 0);
        let opts = EdOptions::default().asi(true);
        let ex = enumerate_ed(&chain, Encoding::Dec, PathEmission::Markov { em: &em, asi: true }, false).unwrap();
        let fb = forward_backward(&em, &chain, opts).unwrap();
        let sq = smooth_sequential(&em, &chain, opts).unwrap();
        assert!((fb.log_likelihood - ex.log_evidence).abs() < 1e-10);
        for t in 0..6 {
            for (&st, &p) in &ex.smoothed[t] {
                assert!((sq.smoothed(t, st) - p).abs() < 1e-10);
            }
        }
        assert!((viterbi(&em, &chain, opts).unwrap().log_joint - ex.map_log_joint).abs() < 1e-10);
    }

    #[test]
    fn single_segment_duration_recovered() {
        // One segment of length 4 observed exactly: regime 0 explains it, regime 1 never fits.
        let tr = RegimeTransition::from_rows(vec![1.0, 0.0], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let chain = EdChain::new(tr, DurationModel::uniform(2, 1, 6).unwrap()).unwrap();
        let em = TableEmission::new(vec![vec![0.0, f64::NEG_INFINITY]; 4]).unwrap();
        let opts = EdOptions::default().condition_end(true);
        let mut ch = chain;
        for _ in 0..3 {
            let post = smooth_sequential(&em, &ch, opts).unwrap();
            let d = learn_rho(&post, &em, &ch, opts, 1).unwrap();
            ch = ch.with_duration(d).unwrap();
        }
        assert!((ch.rho(0, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gsarm_em_monotone() {
        let truth = SarmCoefficients::new(vec![vec![0.9], vec![-0.6]], vec![0.5, 1.0]).unwrap();
        let tr = RegimeTransition::from_rows(vec![0.5, 0.5], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let chain = EdChain::new(tr.clone(), DurationModel::uniform(2, 5, 15).unwrap()).unwrap();
        let mut rng = substream(12, 0);
        let path = sample_chain(Encoding::Dec, &chain, 300, &mut rng).unwrap();
        let v = truth.simulate(&path.regimes, &mut rng);
        let start = GsarmParams {
            coeffs: SarmCoefficients::new(vec![vec![0.2], vec![-0.1]], vec![1.0, 1.0]).unwrap(),
            chain: EdChain::new(tr, DurationModel::uniform(2, 1, 20).unwrap()).unwrap(),
        };
        let (_, trace) = em_gsarm(&start, &v, EdOptions::default(), 1, 15, 0.0).unwrap();
        assert!(trace.max_decrease() <= 1e-9, "{:?}", trace.log_likelihood);
    }
}
