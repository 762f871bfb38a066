//! Increasing-count encoding: `c_t` is the number of steps since the segment started.

use super::{check_emission, count_cap, EdOptions, EdPath, EdPosterior, ScaledEmissions, StateSpace};
use crate::chains::{DMax, EdChain, Encoding};
use crate::error::{invalid, Error, Result};
use crate::hmm::Emission;
use crate::numeric::{ln, normalize};

struct IncModel<'a> {
    chain: &'a EdChain,
    e: ScaledEmissions,
    sp: StateSpace,
    asi: bool,
}

impl IncModel<'_> {
    fn lags(&self, t: usize, c: usize) -> usize {
        if self.asi { t.min(c - 1) } else { t }
    }

    fn em(&self, t: usize, s: usize, c: usize) -> f64 {
        self.e.at(t, s, self.lags(t, c))
    }

    fn log_em(&self, t: usize, s: usize, c: usize) -> f64 {
        self.e.log_at(t, s, self.lags(t, c))
    }

    fn lambda(&self, s: usize, c: usize) -> f64 {
        self.chain.lambda(s, c)
    }

    /// `A_s = sum_c (1 - lambda_{s,c}) alpha^{s,c}`.
    fn ending(&self, row: &[f64]) -> Vec<f64> {
        let cap = self.sp.cap;
        (0..self.sp.num_regimes)
            .map(|s| (1..=cap).map(|c| (1.0 - self.lambda(s, c)) * row[s * cap + c - 1]).sum())
            .collect()
    }

    /// Unnormalized forward row at `t >= 1`.
    fn forward_row(&self, prev: &[f64], t: usize) -> Vec<f64> {
        let (s_count, cap) = (self.sp.num_regimes, self.sp.cap);
        let ends = self.ending(prev);
        let mut out = vec![0.0; self.sp.len()];
        for s in 0..s_count {
            let enter: f64 = (0..s_count).map(|i| self.chain.pi(s, i) * ends[i]).sum();
            out[s * cap] = self.em(t, s, 1) * enter;
            for c in 2..=cap {
                out[s * cap + c - 1] = self.em(t, s, c) * self.lambda(s, c - 1) * prev[s * cap + c - 2];
            }
        }
        out
    }

    fn end_weight(&self, i: usize, condition_end: bool) -> f64 {
        if condition_end {
            let st = self.sp.state(i);
            1.0 - self.lambda(st.regime(), st.count())
        } else {
            1.0
        }
    }
}

fn setup<'a, E: Emission + ?Sized>(em: &E, chain: &'a EdChain, opts: EdOptions) -> Result<IncModel<'a>> {
    check_emission(chain, em)?;
    if chain.d_max() == DMax::Unbounded && !chain.hazard().first_segment_starts_at_one() {
        return invalid("unbounded durations with increasing counts need the first segment to start at the first step");
    }
    let cap = count_cap(chain, em.len());
    Ok(IncModel {
        chain,
        e: ScaledEmissions::new(em)?,
        sp: StateSpace::new(Encoding::Inc, chain.num_regimes(), cap),
        asi: opts.asi,
    })
}

struct Forward {
    alpha: Vec<Vec<f64>>,
    log_norm: Vec<f64>,
}

fn forward(m: &IncModel<'_>, t_len: usize) -> Result<Forward> {
    let cap = m.sp.cap;
    let hz = m.chain.hazard();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut log_norm = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut row = if t == 0 {
            let mut r = vec![0.0; m.sp.len()];
            for s in 0..m.sp.num_regimes {
                for c in 1..=cap {
                    r[s * cap + c - 1] = m.chain.tilde_pi(s) * hz.tilde_lambda(s, c) * m.em(0, s, c);
                }
            }
            r
        } else {
            m.forward_row(&alpha[t - 1], t)
        };
        let z = normalize(&mut row);
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Numerical(format!("forward pass vanished at step {t}")));
        }
        log_norm.push(z.ln() + m.e.shift[t]);
        alpha.push(row);
    }
    Ok(Forward { alpha, log_norm })
}

fn final_row(m: &IncModel<'_>, fw: &Forward, condition_end: bool) -> Result<(Vec<f64>, f64)> {
    let last = fw.alpha.last().unwrap();
    let mut row: Vec<f64> = last.iter().enumerate().map(|(i, &a)| a * m.end_weight(i, condition_end)).collect();
    let end = normalize(&mut row);
    if !(end > 0.0) {
        return Err(Error::Numerical("no segment can end at the last step".into()));
    }
    Ok((row, fw.log_norm.iter().sum::<f64>() + end.ln()))
}

/// Forward and backward passes computed independently, combined into `gamma`.
pub fn forward_backward<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<EdPosterior> {
    let m = setup(em, chain, opts)?;
    let t_len = em.len();
    let fw = forward(&m, t_len)?;
    let (s_count, cap) = (m.sp.num_regimes, m.sp.cap);
    let mut beta = vec![vec![0.0; m.sp.len()]; t_len];
    beta[t_len - 1] = (0..m.sp.len()).map(|i| m.end_weight(i, opts.condition_end)).collect();
    for t in (0..t_len - 1).rev() {
        let z = (fw.log_norm[t + 1] - m.e.shift[t + 1]).exp();
        let next = &beta[t + 1];
        let enter: Vec<f64> = (0..s_count).map(|j| m.em(t + 1, j, 1) * next[j * cap]).collect();
        let mut row = vec![0.0; m.sp.len()];
        for s in 0..s_count {
            let switch: f64 = (0..s_count).map(|j| chain.pi(j, s) * enter[j]).sum();
            for c in 1..=cap {
                let l = m.lambda(s, c);
                let stay = if c < cap { l * m.em(t + 1, s, c + 1) * next[s * cap + c] } else { 0.0 };
                row[s * cap + c - 1] = (stay + (1.0 - l) * switch) / z;
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
    let (_, log_likelihood) = final_row(&m, &fw, opts.condition_end)?;
    Ok(EdPosterior { space: m.sp, alpha: fw.alpha, beta: Some(beta), gamma, log_norm: fw.log_norm, log_likelihood })
}

/// Filtering followed by the backward sweep; a zero filtered entry stays zero.
pub fn smooth_sequential<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<EdPosterior> {
    let m = setup(em, chain, opts)?;
    let t_len = em.len();
    let fw = forward(&m, t_len)?;
    let (last, log_likelihood) = final_row(&m, &fw, opts.condition_end)?;
    let gamma = backward_sequential(&m, &fw.alpha, last);
    Ok(EdPosterior { space: m.sp, alpha: fw.alpha, beta: None, gamma, log_norm: fw.log_norm, log_likelihood })
}

fn backward_sequential(m: &IncModel<'_>, alpha: &[Vec<f64>], last: Vec<f64>) -> Vec<Vec<f64>> {
    let (s_count, cap) = (m.sp.num_regimes, m.sp.cap);
    let t_len = alpha.len();
    let mut gamma = vec![Vec::new(); t_len];
    gamma[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        let a = &alpha[t];
        let ends = m.ending(a);
        let g_next = &gamma[t + 1];
        // p(s_{t+1} = j, c_{t+1} = 1 | v) divided by the predictive entry mass into j.
        let ratio: Vec<f64> = (0..s_count)
            .map(|j| {
                let den: f64 = (0..s_count).map(|i| m.chain.pi(j, i) * ends[i]).sum();
                if den > 0.0 { g_next[j * cap] / den } else { 0.0 }
            })
            .collect();
        let mut row = vec![0.0; m.sp.len()];
        for s in 0..s_count {
            let switch: f64 = (0..s_count).map(|j| m.chain.pi(j, s) * ratio[j]).sum();
            for c in 1..=cap {
                let i = s * cap + c - 1;
                let stay = if c < cap && a[i] > 0.0 { g_next[i + 1] } else { 0.0 };
                row[i] = stay + (1.0 - m.lambda(s, c)) * a[i] * switch;
            }
        }
        gamma[t] = row;
    }
    gamma
}

/// Most likely augmented path; ties resolve to the lowest state index.
pub fn viterbi<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions) -> Result<EdPath> {
    let m = setup(em, chain, opts)?;
    let t_len = em.len();
    let (s_count, cap) = (m.sp.num_regimes, m.sp.cap);
    let n = m.sp.len();
    let hz = chain.hazard();
    let mut delta = vec![f64::NEG_INFINITY; n];
    for s in 0..s_count {
        for c in 1..=cap {
            delta[s * cap + c - 1] = ln(chain.tilde_pi(s)) + ln(hz.tilde_lambda(s, c)) + m.log_em(0, s, c);
        }
    }
    let mut psi = vec![vec![usize::MAX; n]; t_len];
    for t in 1..t_len {
        // Best segment to leave from each regime.
        let mut leave = vec![(f64::NEG_INFINITY, usize::MAX); s_count];
        for (i, best) in leave.iter_mut().enumerate() {
            for c in 1..=cap {
                let v = ln(1.0 - m.lambda(i, c)) + delta[i * cap + c - 1];
                if v > best.0 {
                    *best = (v, i * cap + c - 1);
                }
            }
        }
        let mut next = vec![f64::NEG_INFINITY; n];
        for s in 0..s_count {
            let mut enter = (f64::NEG_INFINITY, usize::MAX);
            for (i, &(v, from)) in leave.iter().enumerate() {
                let w = ln(chain.pi(s, i)) + v;
                if w > enter.0 {
                    enter = (w, from);
                }
            }
            next[s * cap] = m.log_em(t, s, 1) + enter.0;
            psi[t][s * cap] = enter.1;
            for c in 2..=cap {
                let i = s * cap + c - 1;
                next[i] = m.log_em(t, s, c) + ln(m.lambda(s, c - 1)) + delta[i - 1];
                psi[t][i] = i - 1;
            }
        }
        delta = next;
    }
    let mut end = (f64::NEG_INFINITY, usize::MAX);
    for (i, &v) in delta.iter().enumerate() {
        let w = v + ln(m.end_weight(i, opts.condition_end));
        if w > end.0 {
            end = (w, i);
        }
    }
    if end.1 == usize::MAX {
        return Err(Error::Infeasible("no path has positive probability".into()));
    }
    let mut idx = vec![end.1; t_len];
    for t in (1..t_len).rev() {
        idx[t - 1] = psi[t][idx[t]];
    }
    Ok(EdPath::new(idx.into_iter().map(|i| m.sp.state(i)).collect(), end.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::{DurationModel, HazardModel, RegimeTransition, SigmaState};
    use crate::edmsm::dec;
    use crate::hmm::{SarmCoefficients, TableEmission};
    use crate::oracle::{enumerate_ed, PathEmission};
    use nalgebra::DMatrix;
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

    #[test]
    fn matches_enumeration_with_and_without_asi() {
        let mut rng = crate::chains::substream(21, 0);
        for _ in 0..4 {
            let chain = random_chain(&mut rng, 2, 3);
            let coeffs = SarmCoefficients::new(vec![vec![0.8, -0.2], vec![-0.3, 0.4]], vec![0.6, 1.1]).unwrap();
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let em = coeffs.emission(&v, 0);
            for asi in [false, true] {
                for cond in [false, true] {
                    let opts = EdOptions { asi, condition_end: cond };
                    let ex = enumerate_ed(&chain, Encoding::Inc, PathEmission::Markov { em: &em, asi }, cond).unwrap();
                    let fb = forward_backward(&em, &chain, opts).unwrap();
                    let sq = smooth_sequential(&em, &chain, opts).unwrap();
                    assert!((fb.log_likelihood - ex.log_evidence).abs() < 1e-10);
                    for t in 0..6 {
                        for (&st, &p) in &ex.smoothed[t] {
                            assert!((fb.smoothed(t, st) - p).abs() < 1e-10);
                            assert!((sq.smoothed(t, st) - p).abs() < 1e-10);
                        }
                        for (&st, &p) in &ex.filtered[t] {
                            assert!((sq.filtered(t, st) - p).abs() < 1e-10);
                        }
                    }
                    assert!((viterbi(&em, &chain, opts).unwrap().log_joint - ex.map_log_joint).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn agrees_with_decreasing_counts() {
        let mut rng = crate::chains::substream(22, 0);
        let chain = random_chain(&mut rng, 3, 4);
        let em: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.gen_range(-2.0..0.0)).collect()).collect();
        let em = TableEmission::new(em).unwrap();
        for cond in [false, true] {
            let opts = EdOptions::default().condition_end(cond);
            let a = smooth_sequential(&em, &chain, opts).unwrap().smoothed_regimes();
            let b = dec::smooth_sequential(&em, &chain, opts).unwrap().smoothed_regimes();
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
            // Unconditioned decreasing counts also fix the unfinished duration.
            if cond {
                let va = viterbi(&em, &chain, opts).unwrap();
                let vb = dec::viterbi(&em, &chain, opts).unwrap();
                assert!((va.log_joint - vb.log_joint).abs() < 1e-10);
                assert_eq!(va.regimes, vb.regimes);
            }
        }
    }

    #[test]
    fn zero_filtered_entries_propagate() {
        // Regime 1 cannot explain step 2, so no regime-1 segment covers it.
        let hz = HazardModel::constant(&[0.7, 0.6]).unwrap();
        let tr = RegimeTransition::from_rows(vec![0.5, 0.5], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let chain = EdChain::from_hazard(tr, hz).unwrap();
        let mut le = vec![vec![0.0, 0.0]; 6];
        le[2][1] = f64::NEG_INFINITY;
        let em = TableEmission::new(le).unwrap();
        let post = smooth_sequential(&em, &chain, EdOptions::default()).unwrap();
        for c in 1..=6 {
            assert_eq!(post.filtered(2, SigmaState::Inc { s: 1, c }), 0.0);
            for k in 0..3 {
                assert_eq!(post.smoothed(2 + k, SigmaState::Inc { s: 1, c: c + k }), 0.0);
            }
        }
    }

    #[test]
    fn unbounded_needs_first_segment_at_start() {
        let hz = HazardModel::constant(&[0.5]).unwrap().with_tilde_lambda(vec![vec![0.5, 0.5]]).unwrap();
        let tr = RegimeTransition::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let chain = EdChain::from_hazard(tr, hz).unwrap();
        let em = TableEmission::new(vec![vec![0.0]; 3]).unwrap();
        assert!(forward_backward(&em, &chain, EdOptions::default()).is_err());
    }
}
