//! Markov switching models with Markovian emissions.
//!
//! The regime chain is first order; the observation at `t` depends on the regime
//! and on up to `k` previous observations. The switching autoregressive model
//! ([`SarmParams`]) is the main instance.

pub mod em;

use serde::{Deserialize, Serialize};

use crate::chains::RegimeTransition;
use crate::error::{invalid, Error, Result};
use crate::numeric::{argmax, ln, log_normal, log_normalize, logsumexp, normalize, LogDomain};

pub use em::{em_sarm, EmTrace};

/// Per-step emission density `log p(v_t | s_t = s, v_{t-lags:t-1})`.
///
/// `t` is zero-based and `lags <= min(order, t)`. Implementations decide how a
/// shortened window is treated; for the autoregressive family it drops the
/// missing regressors.
pub trait Emission {
    fn num_regimes(&self) -> usize;
    fn len(&self) -> usize;
    fn order(&self) -> usize;
    fn log_density(&self, s: usize, t: usize, lags: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Emission + ?Sized> Emission for &E {
    fn num_regimes(&self) -> usize {
        (**self).num_regimes()
    }
    fn len(&self) -> usize {
        (**self).len()
    }
    fn order(&self) -> usize {
        (**self).order()
    }
    fn log_density(&self, s: usize, t: usize, lags: usize) -> f64 {
        (**self).log_density(s, t, lags)
    }
}

/// Precomputed order-0 emissions, `log_e[t][s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEmission {
    log_e: Vec<Vec<f64>>,
}

impl TableEmission {
    pub fn new(log_e: Vec<Vec<f64>>) -> Result<Self> {
        let s = log_e.first().map_or(0, Vec::len);
        if s == 0 || log_e.iter().any(|r| r.len() != s) {
            return Err(Error::Dimension("emission table must be a nonempty T x S array".into()));
        }
        Ok(Self { log_e })
    }

    /// Builds from linear-domain probabilities.
    pub fn from_probs(p: &[Vec<f64>]) -> Result<Self> {
        Self::new(p.iter().map(|r| r.iter().map(|&x| ln(x)).collect()).collect())
    }

    /// Discrete observations `obs[t]` under per-regime symbol pmfs `b[s][symbol]`.
    pub fn discrete(obs: &[usize], b: &[Vec<f64>]) -> Result<Self> {
        let rows = obs
            .iter()
            .map(|&o| b.iter().map(|row| ln(row.get(o).copied().unwrap_or(0.0))).collect())
            .collect();
        Self::new(rows)
    }
}

impl Emission for TableEmission {
    fn num_regimes(&self) -> usize {
        self.log_e[0].len()
    }
    fn len(&self) -> usize {
        self.log_e.len()
    }
    fn order(&self) -> usize {
        0
    }
    fn log_density(&self, s: usize, t: usize, _lags: usize) -> f64 {
        self.log_e[t][s]
    }
}

/// Independent Gaussian emissions with a regime-specific mean and standard deviation.
#[derive(Debug, Clone)]
pub struct GaussianEmission<'a> {
    pub means: &'a [f64],
    pub sds: &'a [f64],
    pub v: &'a [f64],
}

impl Emission for GaussianEmission<'_> {
    fn num_regimes(&self) -> usize {
        self.means.len()
    }
    fn len(&self) -> usize {
        self.v.len()
    }
    fn order(&self) -> usize {
        0
    }
    fn log_density(&self, s: usize, t: usize, _lags: usize) -> f64 {
        log_normal(self.v[t], self.means[s], self.sds[s] * self.sds[s])
    }
}

/// Switching autoregressive model `v_t = sum_i a^s_i v_{t-i} + eta_t`, `eta_t ~ N(0, sigma_s^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarmCoefficients {
    pub k: usize,
    /// `a[s][i - 1] = a^s_i`.
    pub a: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

impl SarmCoefficients {
    pub fn new(a: Vec<Vec<f64>>, sigma: Vec<f64>) -> Result<Self> {
        let k = a.first().map_or(0, Vec::len);
        if a.is_empty() || a.len() != sigma.len() {
            return Err(Error::Dimension("one coefficient row and one sigma per regime".into()));
        }
        if a.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("coefficient rows must share the order k".into()));
        }
        if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return invalid("sigma must be positive and finite");
        }
        Ok(Self { k, a, sigma })
    }

    pub fn num_regimes(&self) -> usize {
        self.a.len()
    }

    /// Predicted mean of `v_t` in regime `s` from the last `lags` observations.
    #[inline]
    pub fn predict(&self, s: usize, v: &[f64], t: usize, lags: usize) -> f64 {
        (1..=lags).map(|i| self.a[s][i - 1] * v[t - i]).sum()
    }

    /// Emission over `v`; observations before `score_from` contribute a unit density.
    pub fn emission<'a>(&'a self, v: &'a [f64], score_from: usize) -> SarmEmission<'a> {
        SarmEmission { coeffs: self, v, score_from }
    }

    /// Draws `v_{1:T}` given a regime path; the `k` pre-sample values are zero.
    pub fn simulate<R: rand::Rng>(&self, regimes: &[usize], rng: &mut R) -> Vec<f64> {
        use rand_distr::{Distribution, Normal};
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut v: Vec<f64> = Vec::with_capacity(regimes.len());
        for (t, &s) in regimes.iter().enumerate() {
            let lags = self.k.min(t);
            let mean = self.predict(s, &v, t, lags);
            v.push(mean + self.sigma[s] * std_normal.sample(rng));
        }
        v
    }
}

/// [`Emission`] view of [`SarmCoefficients`] over a series.
#[derive(Debug, Clone, Copy)]
pub struct SarmEmission<'a> {
    coeffs: &'a SarmCoefficients,
    v: &'a [f64],
    score_from: usize,
}

impl Emission for SarmEmission<'_> {
    fn num_regimes(&self) -> usize {
        self.coeffs.num_regimes()
    }
    fn len(&self) -> usize {
        self.v.len()
    }
    fn order(&self) -> usize {
        self.coeffs.k
    }
    fn log_density(&self, s: usize, t: usize, lags: usize) -> f64 {
        if t < self.score_from {
            return 0.0;
        }
        let mean = self.coeffs.predict(s, self.v, t, lags);
        let sd = self.coeffs.sigma[s];
        log_normal(self.v[t], mean, sd * sd)
    }
}

/// Switching autoregressive model: coefficients plus regime chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SarmParams {
    pub coeffs: SarmCoefficients,
    pub chain: RegimeTransition,
}

impl SarmParams {
    pub fn new(coeffs: SarmCoefficients, chain: RegimeTransition) -> Result<Self> {
        if coeffs.num_regimes() != chain.num_regimes() {
            return Err(Error::Dimension("coefficients and chain disagree on S".into()));
        }
        Ok(Self { coeffs, chain })
    }

    pub fn k(&self) -> usize {
        self.coeffs.k
    }
}

/// Filtered, smoothed and backward tables over `(t, s)`.
///
/// In the log domain the rows hold logarithms; `alpha` and `gamma` rows are
/// normalized in either domain. `log_norm[t] = log p(v_t | v_{1:t-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub log_domain: bool,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Option<Vec<Vec<f64>>>,
    pub gamma: Vec<Vec<f64>>,
    pub log_norm: Vec<f64>,
    pub log_likelihood: f64,
}

impl PosteriorTable {
    fn linear(rows: &[Vec<f64>], log: bool) -> Vec<Vec<f64>> {
        if log {
            rows.iter().map(|r| r.iter().map(|x| x.exp()).collect()).collect()
        } else {
            rows.to_vec()
        }
    }

    /// Filtered `p(s_t | v_{1:t})` in the linear domain.
    pub fn filtered(&self) -> Vec<Vec<f64>> {
        Self::linear(&self.alpha, self.log_domain)
    }

    /// Smoothed `p(s_t | v_{1:T})` in the linear domain.
    pub fn smoothed(&self) -> Vec<Vec<f64>> {
        Self::linear(&self.gamma, self.log_domain)
    }

    /// Per-step argmax of the smoothed marginals.
    pub fn map_regimes(&self) -> Vec<usize> {
        self.gamma.iter().map(|r| argmax(r).unwrap_or(0)).collect()
    }
}

pub(crate) fn check_inputs<E: Emission + ?Sized>(em: &E, chain: &RegimeTransition) -> Result<()> {
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
    if em.order() > em.len() {
        return invalid("emission order exceeds series length");
    }
    Ok(())
}

/// `log_e[t][s]` with the available window `min(k, t)`.
pub fn emission_table<E: Emission + ?Sized>(em: &E) -> Vec<Vec<f64>> {
    let k = em.order();
    (0..em.len())
        .map(|t| (0..em.num_regimes()).map(|s| em.log_density(s, t, k.min(t))).collect())
        .collect()
}

struct Underflow;

/// Scaled linear forward pass; `Err(Underflow)` if a row vanishes.
fn forward_scaled(le: &[Vec<f64>], chain: &RegimeTransition) -> std::result::Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>), Underflow> {
    let s_count = chain.num_regimes();
    let mut alpha = Vec::with_capacity(le.len());
    let mut scaled_e = Vec::with_capacity(le.len());
    let mut log_norm = Vec::with_capacity(le.len());
    for (t, row) in le.iter().enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Underflow);
        }
        let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let mut a: Vec<f64> = if t == 0 {
            (0..s_count).map(|s| chain.tilde_pi()[s] * e[s]).collect()
        } else {
            let prev: &Vec<f64> = &alpha[t - 1];
            (0..s_count)
                .map(|s| e[s] * (0..s_count).map(|i| chain.pi(s, i) * prev[i]).sum::<f64>())
                .collect()
        };
        let z = normalize(&mut a);
        if !(z > 0.0) || !z.is_finite() {
            return Err(Underflow);
        }
        log_norm.push(z.ln() + m);
        alpha.push(a);
        scaled_e.push(e);
    }
    Ok((alpha, scaled_e, log_norm))
}

fn forward_log(le: &[Vec<f64>], chain: &RegimeTransition) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let s_count = chain.num_regimes();
    let log_pi: Vec<Vec<f64>> = (0..s_count).map(|j| (0..s_count).map(|i| ln(chain.pi(j, i))).collect()).collect();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(le.len());
    let mut log_norm = Vec::with_capacity(le.len());
    let mut buf = vec![0.0; s_count];
    for (t, row) in le.iter().enumerate() {
        let mut a: Vec<f64> = if t == 0 {
            (0..s_count).map(|s| ln(chain.tilde_pi()[s]) + row[s]).collect()
        } else {
            let prev = &alpha[t - 1];
            (0..s_count)
                .map(|s| {
                    for i in 0..s_count {
                        buf[i] = log_pi[s][i] + prev[i];
                    }
                    row[s] + logsumexp(&buf)
                })
                .collect()
        };
        let z = log_normalize(&mut a);
        if !z.is_finite() {
            return Err(Error::Numerical(format!("observation {t} has zero probability under the model")));
        }
        log_norm.push(z);
        alpha.push(a);
    }
    Ok((alpha, log_norm))
}

/// Forward-backward with `alpha` and `beta` computed independently and combined.
///
/// Use [`forward_backward`] for the log-domain default.
pub fn forward_backward_parallel<E: Emission + ?Sized>(
    em: &E,
    chain: &RegimeTransition,
    mode: LogDomain,
) -> Result<PosteriorTable> {
    check_inputs(em, chain)?;
    let le = emission_table(em);
    let s_count = chain.num_regimes();
    let t_len = le.len();
    if mode != LogDomain::On {
        match forward_scaled(&le, chain) {
            Ok((alpha, e, log_norm)) => {
                let mut beta = vec![vec![1.0; s_count]; t_len];
                for t in (0..t_len - 1).rev() {
                    let z = (log_norm[t + 1] - le[t + 1].iter().copied().fold(f64::NEG_INFINITY, f64::max)).exp();
                    for s in 0..s_count {
                        beta[t][s] = (0..s_count).map(|j| chain.pi(j, s) * e[t + 1][j] * beta[t + 1][j]).sum::<f64>() / z;
                    }
                }
                let gamma = alpha
                    .iter()
                    .zip(&beta)
                    .map(|(a, b)| {
                        let mut g: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
                        normalize(&mut g);
                        g
                    })
                    .collect();
                let log_likelihood = log_norm.iter().sum();
                return Ok(PosteriorTable { log_domain: false, alpha, beta: Some(beta), gamma, log_norm, log_likelihood });
            }
            Err(Underflow) if mode == LogDomain::Auto => {
                log::warn!("linear-domain underflow, retrying in the log domain");
            }
            Err(Underflow) => return Err(Error::Numerical("linear-domain underflow".into())),
        }
    }
    let (alpha, log_norm) = forward_log(&le, chain)?;
    let mut beta = vec![vec![0.0; s_count]; t_len];
    let mut buf = vec![0.0; s_count];
    for t in (0..t_len - 1).rev() {
        for s in 0..s_count {
            for j in 0..s_count {
                buf[j] = ln(chain.pi(j, s)) + le[t + 1][j] + beta[t + 1][j];
            }
            beta[t][s] = logsumexp(&buf);
        }
    }
    let gamma = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let mut g: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
            log_normalize(&mut g);
            g
        })
        .collect();
    let log_likelihood = log_norm.iter().sum();
    Ok(PosteriorTable { log_domain: true, alpha, beta: Some(beta), gamma, log_norm, log_likelihood })
}

/// Log-domain forward-backward.
pub fn forward_backward<E: Emission + ?Sized>(em: &E, chain: &RegimeTransition) -> Result<PosteriorTable> {
    forward_backward_parallel(em, chain, LogDomain::On)
}

/// Filtering followed by the backward correction `p(s_t | s_{t+1}, v_{1:t})`; no `beta` is formed.
pub fn filter_smooth_sequential<E: Emission + ?Sized>(
    em: &E,
    chain: &RegimeTransition,
    mode: LogDomain,
) -> Result<PosteriorTable> {
    check_inputs(em, chain)?;
    let le = emission_table(em);
    let s_count = chain.num_regimes();
    let t_len = le.len();
    let (alpha, log_norm, log_domain) = if mode == LogDomain::On {
        let (a, n) = forward_log(&le, chain)?;
        (a, n, true)
    } else {
        match forward_scaled(&le, chain) {
            Ok((a, _, n)) => (a, n, false),
            Err(Underflow) if mode == LogDomain::Auto => {
                log::warn!("linear-domain underflow, retrying in the log domain");
                let (a, n) = forward_log(&le, chain)?;
                (a, n, true)
            }
            Err(Underflow) => return Err(Error::Numerical("linear-domain underflow".into())),
        }
    };
    let mut gamma = vec![vec![0.0; s_count]; t_len];
    gamma[t_len - 1] = alpha[t_len - 1].clone();
    for t in (0..t_len - 1).rev() {
        if log_domain {
            let log_den: Vec<f64> = (0..s_count)
                .map(|j| logsumexp(&(0..s_count).map(|i| ln(chain.pi(j, i)) + alpha[t][i]).collect::<Vec<_>>()))
                .collect();
            for s in 0..s_count {
                let terms: Vec<f64> = (0..s_count)
                    .filter(|&j| log_den[j].is_finite())
                    .map(|j| ln(chain.pi(j, s)) + alpha[t][s] - log_den[j] + gamma[t + 1][j])
                    .collect();
                gamma[t][s] = logsumexp(&terms);
            }
            log_normalize(&mut gamma[t]);
        } else {
            let den: Vec<f64> = (0..s_count).map(|j| (0..s_count).map(|i| chain.pi(j, i) * alpha[t][i]).sum()).collect();
            for s in 0..s_count {
                gamma[t][s] = (0..s_count)
                    .map(|j| {
                        if den[j] > 0.0 {
                            chain.pi(j, s) * alpha[t][s] / den[j] * gamma[t + 1][j]
                        } else {
                            if gamma[t + 1][j] > 0.0 {
                                log::debug!("unreachable regime {j} at step {} carries smoothed mass", t + 1);
                            }
                            0.0
                        }
                    })
                    .sum();
            }
        }
    }
    let log_likelihood = log_norm.iter().sum();
    Ok(PosteriorTable { log_domain, alpha, beta: None, gamma, log_norm, log_likelihood })
}

/// Most likely regime path and its log joint probability.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmPath {
    pub regimes: Vec<usize>,
    pub log_joint: f64,
}

/// Max-product recursion with backtracking; ties go to the lowest regime index.
pub fn viterbi<E: Emission + ?Sized>(em: &E, chain: &RegimeTransition) -> Result<HmmPath> {
    check_inputs(em, chain)?;
    let le = emission_table(em);
    let s_count = chain.num_regimes();
    let t_len = le.len();
    let mut xi = vec![vec![f64::NEG_INFINITY; s_count]; t_len];
    let mut psi = vec![vec![0usize; s_count]; t_len];
    for s in 0..s_count {
        xi[0][s] = ln(chain.tilde_pi()[s]) + le[0][s];
    }
    let mut cand = vec![0.0; s_count];
    for t in 1..t_len {
        for s in 0..s_count {
            for i in 0..s_count {
                cand[i] = ln(chain.pi(s, i)) + xi[t - 1][i];
            }
            let best = argmax(&cand).unwrap_or(0);
            psi[t][s] = best;
            xi[t][s] = le[t][s] + cand[best];
        }
    }
    let last = argmax(&xi[t_len - 1]).ok_or_else(|| Error::Numerical("no path has positive probability".into()))?;
    let log_joint = xi[t_len - 1][last];
    let mut regimes = vec![last; t_len];
    for t in (1..t_len).rev() {
        regimes[t - 1] = psi[t][regimes[t]];
    }
    Ok(HmmPath { regimes, log_joint })
}

/// Pairwise smoothed marginals `p(s_{t-1} = i, s_t = j | v)` summed over `t`, as `[j][i]`.
pub fn expected_transitions(post: &PosteriorTable, chain: &RegimeTransition) -> Vec<Vec<f64>> {
    let s_count = chain.num_regimes();
    let alpha = post.filtered();
    let gamma = post.smoothed();
    let mut counts = vec![vec![0.0; s_count]; s_count];
    for t in 1..alpha.len() {
        let a = &alpha[t - 1];
        for j in 0..s_count {
            let den: f64 = (0..s_count).map(|i| chain.pi(j, i) * a[i]).sum();
            if den <= 0.0 {
                continue;
            }
            for i in 0..s_count {
                counts[j][i] += chain.pi(j, i) * a[i] / den * gamma[t][j];
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::substream;
    use crate::oracle;
    use rand::Rng;

    fn random_chain<R: Rng>(s: usize, rng: &mut R) -> RegimeTransition {
        let mut tp: Vec<f64> = (0..s).map(|_| rng.gen_range(0.05..1.0)).collect();
        normalize(&mut tp);
        let mut pi = nalgebra::DMatrix::zeros(s, s);
        for i in 0..s {
            let mut col: Vec<f64> = (0..s).map(|_| rng.gen_range(0.05..1.0)).collect();
            normalize(&mut col);
            for j in 0..s {
                pi[(j, i)] = col[j];
            }
        }
        RegimeTransition::new(tp, pi).unwrap()
    }

    fn random_table<R: Rng>(t: usize, s: usize, rng: &mut R) -> TableEmission {
        TableEmission::new((0..t).map(|_| (0..s).map(|_| rng.gen_range(-3.0..0.0)).collect()).collect()).unwrap()
    }

    #[test]
    fn single_regime_is_certain() {
        let chain = RegimeTransition::new(vec![1.0], nalgebra::DMatrix::from_element(1, 1, 1.0)).unwrap();
        let em = random_table(7, 1, &mut substream(1, 0));
        let post = forward_backward(&em, &chain).unwrap();
        assert!(post.smoothed().iter().all(|r| (r[0] - 1.0).abs() < 1e-12));
        assert_eq!(viterbi(&em, &chain).unwrap().regimes, vec![0; 7]);
    }

    #[test]
    fn parallel_sequential_and_oracle_agree() {
        let mut rng = substream(2, 0);
        for _ in 0..40 {
            let s = rng.gen_range(1..=3);
            let t = rng.gen_range(1..=6);
            let chain = random_chain(s, &mut rng);
            let em = random_table(t, s, &mut rng);
            let exact = oracle::enumerate_hmm(&em, &chain).unwrap();
            for mode in [LogDomain::On, LogDomain::Off] {
                let par = forward_backward_parallel(&em, &chain, mode).unwrap();
                let seq = filter_smooth_sequential(&em, &chain, mode).unwrap();
                for (tt, (g1, g2)) in par.smoothed().iter().zip(seq.smoothed()).enumerate() {
                    for j in 0..s {
                        assert!((g1[j] - exact.smoothed[tt][j]).abs() < 1e-10);
                        assert!((g2[j] - exact.smoothed[tt][j]).abs() < 1e-10);
                        assert!((par.filtered()[tt][j] - exact.filtered[tt][j]).abs() < 1e-10);
                    }
                }
                assert!((par.log_likelihood - exact.log_evidence).abs() < 1e-10);
            }
            let path = viterbi(&em, &chain).unwrap();
            assert!((path.log_joint - exact.map_log_joint).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_emissions_give_prior_marginals() {
        let mut rng = substream(3, 0);
        let chain = random_chain(3, &mut rng);
        let em = TableEmission::new(vec![vec![0.0; 3]; 5]).unwrap();
        let post = filter_smooth_sequential(&em, &chain, LogDomain::Off).unwrap();
        let mut prior = chain.tilde_pi().to_vec();
        for g in post.smoothed() {
            for j in 0..3 {
                assert!((g[j] - prior[j]).abs() < 1e-12);
            }
            prior = (0..3).map(|j| (0..3).map(|i| chain.pi(j, i) * prior[i]).sum()).collect();
        }
    }

    #[test]
    fn deterministic_chain_gives_delta() {
        let pi = nalgebra::DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let chain = RegimeTransition::new(vec![1.0, 0.0, 0.0], pi).unwrap();
        let em = random_table(6, 3, &mut substream(4, 0));
        let post = filter_smooth_sequential(&em, &chain, LogDomain::Off).unwrap();
        for (t, g) in post.smoothed().iter().enumerate() {
            assert!((g[t % 3] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auto_mode_recovers_from_underflow() {
        let chain = RegimeTransition::from_rows(vec![1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let em = TableEmission::new(vec![vec![-2000.0, 0.0]; 4]).unwrap();
        assert!(forward_backward_parallel(&em, &chain, LogDomain::Off).is_err());
        let post = forward_backward_parallel(&em, &chain, LogDomain::Auto).unwrap();
        assert!(post.log_domain);
        assert!((post.log_likelihood + 8000.0).abs() < 1e-9);
    }

    #[test]
    fn sarm_viterbi_recovers_low_noise_path() {
        let mut rng = substream(5, 0);
        // Discrimination is scale free for a stationary AR process, so separation comes from the coefficients.
        let coeffs = SarmCoefficients::new(vec![vec![0.9, 0.0], vec![-0.9, 0.0], vec![0.0, -0.9]], vec![0.01; 3]).unwrap();
        let chain = RegimeTransition::from_rows(
            vec![1.0 / 3.0; 3],
            &[vec![0.98, 0.01, 0.01], vec![0.01, 0.98, 0.01], vec![0.01, 0.01, 0.98]],
        )
        .unwrap();
        let mut regimes = Vec::new();
        for seg in 0..12 {
            regimes.extend(std::iter::repeat_n(seg % 3, 100));
        }
        let mut v = vec![0.0, 0.0];
        for (t, &s) in regimes.iter().enumerate().skip(2) {
            let mean = coeffs.predict(s, &v, t, 2);
            v.push(mean + 0.01 * rng.gen_range(-1.7..1.7));
        }
        let path = viterbi(&coeffs.emission(&v, 2), &chain).unwrap();
        let acc = path.regimes.iter().zip(&regimes).filter(|(a, b)| a == b).count() as f64 / regimes.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }
}
