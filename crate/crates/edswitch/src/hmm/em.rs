//! Expectation maximization for the switching autoregressive model.

use nalgebra::{DMatrix, DVector};

use super::{expected_transitions, filter_smooth_sequential, SarmCoefficients, SarmParams};
use crate::chains::RegimeTransition;
use crate::error::{invalid, Result};
use crate::numeric::LogDomain;

/// Jitter added to a singular normal-equation matrix.
pub const NORMAL_EQUATION_JITTER: f64 = 1e-10;

/// Log-likelihood per iteration, evaluated before each M-step, plus the final value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl EmTrace {
    /// Largest decrease between consecutive entries (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihood.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max)
    }
}

/// Solves `x a = y` for symmetric PSD `x`, adding jitter when the Cholesky factorization fails.
pub(crate) fn solve_normal_equations(x: DMatrix<f64>, y: DVector<f64>) -> DVector<f64> {
    if let Some(ch) = x.clone().cholesky() {
        return ch.solve(&y);
    }
    log::warn!("singular normal equations, adding {NORMAL_EQUATION_JITTER} jitter");
    let n = x.nrows();
    let mut jitter = NORMAL_EQUATION_JITTER;
    loop {
        let xj = &x + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = xj.clone().cholesky() {
            return ch.solve(&y);
        }
        jitter *= 10.0;
        if jitter > 1.0 {
            return xj.pseudo_inverse(1e-12).map(|p| p * &y).unwrap_or_else(|_| DVector::zeros(n));
        }
    }
}

/// Weighted autoregressive fit of regime `s`: coefficients and noise variance.
pub(crate) fn weighted_ar_fit(v: &[f64], k: usize, weights: &[f64]) -> (Vec<f64>, f64) {
    let mut x = DMatrix::zeros(k, k);
    let mut y = DVector::zeros(k);
    let mut wsum = 0.0;
    for t in k..v.len() {
        let w = weights[t];
        if w == 0.0 {
            continue;
        }
        wsum += w;
        for i in 0..k {
            y[i] += w * v[t] * v[t - 1 - i];
            for j in 0..k {
                x[(i, j)] += w * v[t - 1 - i] * v[t - 1 - j];
            }
        }
    }
    let a: Vec<f64> = if k == 0 { Vec::new() } else { solve_normal_equations(x, y).iter().copied().collect() };
    let mut sse = 0.0;
    for t in k..v.len() {
        let pred: f64 = (0..k).map(|i| a[i] * v[t - 1 - i]).sum();
        sse += weights[t] * (v[t] - pred).powi(2);
    }
    let var = if wsum > 0.0 { (sse / wsum).max(1e-12) } else { 1.0 };
    (a, var)
}

/// One M-step from smoothed regime marginals and pairwise transition counts.
fn m_step(params: &SarmParams, v: &[f64], gamma: &[Vec<f64>], trans: &[Vec<f64>]) -> Result<SarmParams> {
    let s_count = params.coeffs.num_regimes();
    let k = params.k();
    let mut a = Vec::with_capacity(s_count);
    let mut sigma = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let w: Vec<f64> = gamma.iter().map(|g| g[s]).collect();
        if w[k..].iter().sum::<f64>() <= 0.0 {
            log::info!("regime {s} carries no posterior mass; keeping its coefficients");
            a.push(params.coeffs.a[s].clone());
            sigma.push(params.coeffs.sigma[s]);
            continue;
        }
        let (coef, var) = weighted_ar_fit(v, k, &w);
        a.push(coef);
        sigma.push(var.sqrt());
    }
    let tilde_pi = gamma[0].clone();
    let mut pi = DMatrix::zeros(s_count, s_count);
    for i in 0..s_count {
        let col: f64 = (0..s_count).map(|j| trans[j][i]).sum();
        for j in 0..s_count {
            pi[(j, i)] = if col > 0.0 { trans[j][i] / col } else { params.chain.pi(j, i) };
        }
    }
    let chain = RegimeTransition::new(renormalized(tilde_pi), pi)?;
    SarmParams::new(SarmCoefficients::new(a, sigma)?, chain)
}

fn renormalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Runs EM from `params0`; the first `k` observations condition but are not scored.
///
/// Stops when the relative log-likelihood change drops below `rel_tol` or after
/// `max_iters` M-steps.
pub fn em_sarm(params0: &SarmParams, v: &[f64], max_iters: usize, rel_tol: f64) -> Result<(SarmParams, EmTrace)> {
    let k = params0.k();
    if v.len() <= k {
        return invalid("EM needs more observations than the autoregressive order");
    }
    let mut params = params0.clone();
    let mut trace = EmTrace::default();
    for _ in 0..max_iters {
        let em = params.coeffs.emission(v, k);
        let post = filter_smooth_sequential(&em, &params.chain, LogDomain::Auto)?;
        let ll = post.log_likelihood;
        if let Some(&prev) = trace.log_likelihood.last() {
            if (ll - prev).abs() <= rel_tol * prev.abs().max(1e-300) {
                trace.log_likelihood.push(ll);
                trace.converged = true;
                return Ok((params, trace));
            }
        }
        trace.log_likelihood.push(ll);
        let gamma = post.smoothed();
        let trans = expected_transitions(&post, &params.chain);
        params = m_step(&params, v, &gamma, &trans)?;
    }
    let em = params.coeffs.emission(v, k);
    trace.log_likelihood.push(filter_smooth_sequential(&em, &params.chain, LogDomain::Auto)?.log_likelihood);
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::{sample_chain, substream, DurationModel, EdChain, Encoding};

    #[test]
    fn single_regime_matches_least_squares() {
        let coeffs = SarmCoefficients::new(vec![vec![0.6, -0.2]], vec![1.0]).unwrap();
        let mut rng = substream(8, 0);
        let v = coeffs.simulate(&vec![0; 400], &mut rng);
        let chain = RegimeTransition::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let start = SarmParams::new(SarmCoefficients::new(vec![vec![0.0, 0.0]], vec![2.0]).unwrap(), chain).unwrap();
        let (fit, _) = em_sarm(&start, &v, 1, 0.0).unwrap();
        // Independent least squares through a QR solve of the design matrix.
        let n = v.len() - 2;
        let x = DMatrix::from_fn(n, 2, |r, c| v[r + 1 - c]);
        let y = DVector::from_fn(n, |r, _| v[r + 2]);
        let qr = x.qr();
        let ls = qr.r().solve_upper_triangular(&(qr.q().transpose() * y)).unwrap();
        assert!((fit.coeffs.a[0][0] - ls[0]).abs() < 1e-8);
        assert!((fit.coeffs.a[0][1] - ls[1]).abs() < 1e-8);
    }

    #[test]
    fn em_is_monotone_and_columns_normalized() {
        let truth = SarmCoefficients::new(vec![vec![0.9], vec![-0.5]], vec![0.5, 1.0]).unwrap();
        let tr = RegimeTransition::from_rows(vec![0.5, 0.5], &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let chain = EdChain::new(tr, DurationModel::uniform(2, 20, 40).unwrap()).unwrap();
        let mut rng = substream(9, 0);
        let path = sample_chain(Encoding::Dec, &chain, 600, &mut rng).unwrap();
        let v = truth.simulate(&path.regimes, &mut rng);
        let start_chain = RegimeTransition::from_rows(vec![0.5, 0.5], &[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let start = SarmParams::new(SarmCoefficients::new(vec![vec![0.3], vec![-0.1]], vec![1.0, 1.0]).unwrap(), start_chain).unwrap();
        let (fit, trace) = em_sarm(&start, &v, 30, 0.0).unwrap();
        assert!(trace.max_decrease() <= 1e-9, "{:?}", trace.log_likelihood);
        for i in 0..2 {
            let col: f64 = (0..2).map(|j| fit.chain.pi(j, i)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }
}
