//! Linear Gaussian state-space models.
//!
//! `h_t = A h_{t-1} + eta^h_t`, `eta^h_t ~ N(0, Sigma_H)`, `h_1 ~ N(mu, Sigma)`,
//! `v_t = B h_t + eta^v_t`, `eta^v_t ~ N(0, Sigma_V)`.
//!
//! Smoothing is written against the [`Dynamics`] trait so the same backward pass
//! serves linear and unscented propagation.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter ladder used when a covariance fails to factorize.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Model matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssmParams {
    pub a: DMatrix<f64>,
    pub sigma_h: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl LgssmParams {
    pub fn new(
        a: DMatrix<f64>,
        sigma_h: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma_v: DMatrix<f64>,
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        let h = a.nrows();
        let v = b.nrows();
        let square = |m: &DMatrix<f64>, n: usize| m.nrows() == n && m.ncols() == n;
        if !square(&a, h) || !square(&sigma_h, h) || !square(&sigma, h) || mu.len() != h || b.ncols() != h || !square(&sigma_v, v) {
            return Err(Error::Dimension(format!("inconsistent LGSSM dimensions (H = {h}, V = {v})")));
        }
        for (name, m) in [("Sigma_H", &sigma_h), ("Sigma_V", &sigma_v), ("Sigma", &sigma)] {
            if (m - m.transpose()).amax() > 1e-9 * m.amax().max(1.0) {
                return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
            }
            if m.clone().symmetric_eigenvalues().iter().any(|&e| e < -1e-9) {
                return Err(Error::InvalidParameter(format!("{name} is not positive semi-definite")));
            }
        }
        Ok(Self { a, sigma_h, b, sigma_v, mu, sigma })
    }

    /// One-dimensional model.
    pub fn scalar(a: f64, q: f64, b: f64, r: f64, mu: f64, p: f64) -> Result<Self> {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        Self::new(m(a), m(q), m(b), m(r), DVector::from_element(1, mu), m(p))
    }

    pub fn h_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn v_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn prior(&self) -> GaussianBelief {
        GaussianBelief::new(self.mu.clone(), self.sigma.clone())
    }

    pub fn dynamics(&self) -> LinearDynamics {
        LinearDynamics { a: self.a.clone(), sigma_h: self.sigma_h.clone() }
    }
}

/// Mean and covariance of a Gaussian over `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov: symmetrize(cov) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Weighted Gaussian components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureBelief {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianBelief>,
}

impl GaussianMixtureBelief {
    pub fn single(b: GaussianBelief) -> Self {
        Self { weights: vec![1.0], components: vec![b] }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Mixture mean.
    pub fn mean(&self) -> DVector<f64> {
        let total: f64 = self.weights.iter().sum();
        let mut m = DVector::zeros(self.components[0].dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            m += &c.mean * (*w / total);
        }
        m
    }
}

/// `(m + m^T) / 2`.
pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix, escalating jitter on failure.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let n = m.nrows();
    for j in JITTER_LADDER {
        if let Some(c) = (m + DMatrix::identity(n, n) * j).cholesky() {
            log::debug!("cholesky needed jitter {j}");
            return Ok(c);
        }
    }
    Err(Error::Numerical("covariance is not positive definite after jitter".into()))
}

/// Factor `L` with `L L^T = m` for a symmetric positive semi-definite `m`; used for sampling.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let e = symmetrize(m.clone()).symmetric_eigen();
    if e.eigenvalues.iter().any(|&x| x < -1e-9 * m.amax().max(1.0)) {
        return Err(Error::Numerical("covariance is not positive semi-definite".into()));
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt())))
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// `log N(x; mean, cov)`.
pub fn log_gaussian(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let ch = cholesky_jittered(cov)?;
    let r = x - mean;
    let sol = ch.solve(&r);
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + log_det(&ch) + r.dot(&sol)))
}

/// Result of propagating a belief one step forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub belief: GaussianBelief,
    /// `Cov(h_t, h_{t+1})`.
    pub cross: DMatrix<f64>,
}

/// One-step transition `p(h_{t+1} | h_t)` handled in Gaussian form.
pub trait Dynamics: Send + Sync {
    fn propagate(&self, belief: &GaussianBelief) -> Result<Propagated>;
}

/// `h_{t+1} = A h_t + N(0, Sigma_H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub sigma_h: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn propagate(&self, b: &GaussianBelief) -> Result<Propagated> {
        Ok(Propagated {
            belief: GaussianBelief::new(&self.a * &b.mean, &self.a * &b.cov * self.a.transpose() + &self.sigma_h),
            cross: &b.cov * self.a.transpose(),
        })
    }
}

/// Scaling parameters of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnscentedParams {
    pub alpha: f64,
    pub beta: f64,
    /// `None` selects `3 - H`.
    pub kappa: Option<f64>,
}

impl Default for UnscentedParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.0, kappa: None }
    }
}

/// Boxed nonlinear map `h -> f(h)`.
pub type StateMap = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// `h_{t+1} = f(h_t) + N(0, Sigma_H)` propagated with sigma points.
pub struct UnscentedDynamics {
    pub f: StateMap,
    pub sigma_h: DMatrix<f64>,
    pub params: UnscentedParams,
}

impl std::fmt::Debug for UnscentedDynamics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnscentedDynamics").field("sigma_h", &self.sigma_h).field("params", &self.params).finish()
    }
}

impl Dynamics for UnscentedDynamics {
    fn propagate(&self, b: &GaussianBelief) -> Result<Propagated> {
        let (mean, cov, cross) = unscented_transform(&self.f, b, self.params)?;
        Ok(Propagated { belief: GaussianBelief::new(mean, cov + &self.sigma_h), cross })
    }
}

/// Sigma-point mean, covariance and input-output cross-covariance of `f(h)`.
pub fn unscented_transform(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    b: &GaussianBelief,
    p: UnscentedParams,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = b.dim();
    let kappa = p.kappa.unwrap_or(3.0 - n as f64);
    let lambda = p.alpha * p.alpha * (n as f64 + kappa) - n as f64;
    let scale = n as f64 + lambda;
    if !(scale > 0.0) {
        return Err(Error::InvalidParameter("unscented scaling n + lambda must be positive".into()));
    }
    let l = cholesky_jittered(&(&b.cov * scale))?.l();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(b.mean.clone());
    for i in 0..n {
        points.push(&b.mean + l.column(i));
    }
    for i in 0..n {
        points.push(&b.mean - l.column(i));
    }
    let wm0 = lambda / scale;
    let wc0 = wm0 + (1.0 - p.alpha * p.alpha + p.beta);
    let wi = 0.5 / scale;
    let ys: Vec<DVector<f64>> = points.iter().map(f).collect();
    if ys.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("nonlinear map returned a non-finite value".into()));
    }
    let out = ys[0].len();
    let mut mean = &ys[0] * wm0;
    for y in &ys[1..] {
        mean += y * wi;
    }
    let mut cov = DMatrix::zeros(out, out);
    let mut cross = DMatrix::zeros(n, out);
    for (i, (x, y)) in points.iter().zip(&ys).enumerate() {
        let w = if i == 0 { wc0 } else { wi };
        let dy = y - &mean;
        let dx = x - &b.mean;
        cov += &dy * dy.transpose() * w;
        cross += &dx * dy.transpose() * w;
    }
    Ok((mean, symmetrize(cov), cross))
}

/// Unscented propagation with additive process noise.
pub fn unscented_propagate(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    belief: &GaussianBelief,
    sigma_h: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let (mean, cov, _) = unscented_transform(f, belief, UnscentedParams::default())?;
    Ok(GaussianBelief::new(mean, cov + sigma_h))
}

/// Conditions a predicted belief on `v` (Joseph form); returns the posterior and
/// `log p(v | past) = log N(v; B mean, B P B^T + Sigma_V)`.
pub fn correct(pred: &GaussianBelief, b: &DMatrix<f64>, sigma_v: &DMatrix<f64>, v: &DVector<f64>) -> Result<(GaussianBelief, f64)> {
    let s = symmetrize(b * &pred.cov * b.transpose() + sigma_v);
    let ch = cholesky_jittered(&s)?;
    let resid = v - b * &pred.mean;
    let sol = ch.solve(&resid);
    let ll = -0.5 * (v.len() as f64 * (2.0 * PI).ln() + log_det(&ch) + resid.dot(&sol));
    // K^T = S^{-1} B P
    let k = ch.solve(&(b * &pred.cov)).transpose();
    let n = pred.dim();
    let ikb = DMatrix::identity(n, n) - &k * b;
    let cov = &ikb * &pred.cov * ikb.transpose() + &k * sigma_v * k.transpose();
    Ok((GaussianBelief::new(&pred.mean + &k * resid, cov), ll))
}

/// Filtering output: corrected beliefs and per-step `log p(v_t | v_{1:t-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub filtered: Vec<GaussianBelief>,
    pub log_liks: Vec<f64>,
}

impl FilterOutput {
    pub fn log_likelihood(&self) -> f64 {
        self.log_liks.iter().sum()
    }
}

/// Filters `v` starting from `prior` at the first step.
pub fn filter_from(
    prior: &GaussianBelief,
    dynamics: &dyn Dynamics,
    b: &DMatrix<f64>,
    sigma_v: &DMatrix<f64>,
    v: &[DVector<f64>],
) -> Result<FilterOutput> {
    let mut filtered = Vec::with_capacity(v.len());
    let mut log_liks = Vec::with_capacity(v.len());
    for (t, vt) in v.iter().enumerate() {
        let pred = if t == 0 { prior.clone() } else { dynamics.propagate(&filtered[t - 1])?.belief };
        let (post, ll) = correct(&pred, b, sigma_v, vt)?;
        filtered.push(post);
        log_liks.push(ll);
    }
    Ok(FilterOutput { filtered, log_liks })
}

/// Predictor-corrector filtering.
pub fn filter(params: &LgssmParams, v: &[DVector<f64>]) -> Result<FilterOutput> {
    filter_from(&params.prior(), &params.dynamics(), &params.b, &params.sigma_v, v)
}

/// One backward step: combines the filtered belief at `t` with the smoothed belief at `t + 1`.
pub fn rts_step(filtered: &GaussianBelief, smoothed_next: &GaussianBelief, dynamics: &dyn Dynamics) -> Result<GaussianBelief> {
    let prop = dynamics.propagate(filtered)?;
    let ch = cholesky_jittered(&prop.belief.cov)?;
    // J = cross P^{-1}  =>  J^T = P^{-1} cross^T
    let j = ch.solve(&prop.cross.transpose()).transpose();
    let mean = &filtered.mean + &j * (&smoothed_next.mean - &prop.belief.mean);
    let cov = &filtered.cov + &j * (&smoothed_next.cov - &prop.belief.cov) * j.transpose();
    Ok(GaussianBelief::new(mean, cov))
}

/// Rauch-Tung-Striebel smoothing of a filtered sequence.
pub fn rts_smooth_with(filtered: &[GaussianBelief], dynamics: &dyn Dynamics) -> Result<Vec<GaussianBelief>> {
    let mut out = filtered.to_vec();
    for t in (0..filtered.len().saturating_sub(1)).rev() {
        out[t] = rts_step(&filtered[t], &out[t + 1], dynamics)?;
    }
    Ok(out)
}

pub fn rts_smooth(params: &LgssmParams, filtered: &[GaussianBelief]) -> Result<Vec<GaussianBelief>> {
    rts_smooth_with(filtered, &params.dynamics())
}

/// Per-step `log p(v_t | v_{a:t-1})` for a segment that starts from the prior.
pub fn innovations_loglik(params: &LgssmParams, v: &[DVector<f64>]) -> Result<Vec<f64>> {
    Ok(filter(params, v)?.log_liks)
}

/// Incremental segment likelihood: each [`SegmentFilter::push`] adds one observation.
#[derive(Debug, Clone)]
pub struct SegmentFilter<'a> {
    prior: &'a GaussianBelief,
    dynamics: &'a dyn Dynamics,
    b: &'a DMatrix<f64>,
    sigma_v: &'a DMatrix<f64>,
    current: Option<GaussianBelief>,
    log_lik: f64,
}

impl<'a> SegmentFilter<'a> {
    pub fn new(prior: &'a GaussianBelief, dynamics: &'a dyn Dynamics, b: &'a DMatrix<f64>, sigma_v: &'a DMatrix<f64>) -> Self {
        Self { prior, dynamics, b, sigma_v, current: None, log_lik: 0.0 }
    }

    /// Adds `v_t`; returns the cumulative segment log-likelihood.
    pub fn push(&mut self, v: &DVector<f64>) -> Result<f64> {
        let pred = match &self.current {
            None => self.prior.clone(),
            Some(b) => self.dynamics.propagate(b)?.belief,
        };
        let (post, ll) = correct(&pred, self.b, self.sigma_v, v)?;
        self.current = Some(post);
        self.log_lik += ll;
        Ok(self.log_lik)
    }

    pub fn belief(&self) -> Option<&GaussianBelief> {
        self.current.as_ref()
    }
}

impl std::fmt::Debug for dyn Dynamics + '_ {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Dynamics")
    }
}

/// Moment-matched single Gaussian of a mixture.
pub fn collapse(mix: &GaussianMixtureBelief) -> Result<GaussianBelief> {
    collapse_parts(&mix.weights, &mix.components)
}

/// [`collapse`] over parallel weight and component slices.
pub fn collapse_parts(weights: &[f64], comps: &[GaussianBelief]) -> Result<GaussianBelief> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || comps.is_empty() {
        return Err(Error::InvalidParameter("cannot collapse a mixture with zero total weight".into()));
    }
    if comps.len() == 1 {
        return Ok(comps[0].clone());
    }
    let n = comps[0].dim();
    let mut mean = DVector::zeros(n);
    for (w, c) in weights.iter().zip(comps) {
        mean += &c.mean * (*w / total);
    }
    let mut cov = DMatrix::zeros(n, n);
    for (w, c) in weights.iter().zip(comps) {
        let d = &c.mean - &mean;
        cov += (&c.cov + &d * d.transpose()) * (*w / total);
    }
    Ok(GaussianBelief::new(mean, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::substream;
    use crate::oracle::batch_gaussian;
    use rand::Rng;

    fn random_psd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn random_model<R: Rng>(h: usize, v: usize, rng: &mut R) -> LgssmParams {
        LgssmParams::new(
            DMatrix::from_fn(h, h, |_, _| rng.gen_range(-0.8..0.8)),
            random_psd(h, rng),
            DMatrix::from_fn(v, h, |_, _| rng.gen_range(-1.0..1.0)),
            random_psd(v, rng),
            DVector::from_fn(h, |_, _| rng.gen_range(-1.0..1.0)),
            random_psd(h, rng),
        )
        .unwrap()
    }

    #[test]
    fn filter_and_smoother_match_batch_conditioning() {
        let mut rng = substream(21, 0);
        for _ in 0..30 {
            let h = rng.gen_range(1..=3);
            let vd = rng.gen_range(1..=3);
            let t = rng.gen_range(1..=5);
            let p = random_model(h, vd, &mut rng);
            let v: Vec<DVector<f64>> = (0..t).map(|_| DVector::from_fn(vd, |_, _| rng.gen_range(-2.0..2.0))).collect();
            let f = filter(&p, &v).unwrap();
            let s = rts_smooth(&p, &f.filtered).unwrap();
            let exact = batch_gaussian(&p, &v).unwrap();
            assert!((f.log_likelihood() - exact.log_evidence).abs() < 1e-8);
            for tt in 0..t {
                assert!((&s[tt].mean - &exact.means[tt]).amax() < 1e-8);
                assert!((&s[tt].cov - &exact.covs[tt]).amax() < 1e-8);
                let pre = batch_gaussian(&p, &v[..=tt]).unwrap();
                assert!((&f.filtered[tt].mean - &pre.means[tt]).amax() < 1e-8);
                assert!((&f.filtered[tt].cov - &pre.covs[tt]).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn running_mean_limit() {
        let p = LgssmParams::scalar(1.0, 0.0, 1.0, 1.0, 0.0, 1e12).unwrap();
        let obs = [2.0, 4.0, 3.0, 7.0];
        let v: Vec<DVector<f64>> = obs.iter().map(|&x| DVector::from_element(1, x)).collect();
        let f = filter(&p, &v).unwrap();
        let mut sum = 0.0;
        for (t, b) in f.filtered.iter().enumerate() {
            sum += obs[t];
            assert!((b.mean[0] - sum / (t + 1) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn uninformative_observation_keeps_prior() {
        let p = LgssmParams::scalar(0.9, 0.3, 1.0, 1e12, 0.5, 2.0).unwrap();
        let f = filter(&p, &[DVector::from_element(1, 10.0)]).unwrap();
        assert!((f.filtered[0].mean[0] - 0.5).abs() < 1e-6 * 0.5 + 1e-9);
        assert!((f.filtered[0].cov[(0, 0)] - 2.0).abs() < 1e-6 * 2.0);
    }

    #[test]
    fn collapse_moments() {
        let c = GaussianBelief::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::identity(2, 2) * 0.5);
        assert_eq!(collapse(&GaussianMixtureBelief::single(c.clone())).unwrap(), c);
        let m = DVector::from_vec(vec![1.0, 2.0]);
        let p = DMatrix::identity(2, 2);
        let mix = GaussianMixtureBelief {
            weights: vec![0.5, 0.5],
            components: vec![GaussianBelief::new(m.clone(), p.clone()), GaussianBelief::new(-&m, p.clone())],
        };
        let out = collapse(&mix).unwrap();
        assert!(out.mean.amax() < 1e-15);
        assert!((&out.cov - (&p + &m * m.transpose())).amax() < 1e-14);
        let zero = GaussianMixtureBelief { weights: vec![0.0], components: vec![c] };
        assert!(collapse(&zero).is_err());
    }

    #[test]
    fn unscented_is_exact_for_linear_maps() {
        let mut rng = substream(22, 0);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let q = random_psd(3, &mut rng);
        let b = GaussianBelief::new(DVector::from_vec(vec![0.3, -1.0, 2.0]), random_psd(3, &mut rng));
        let lin = LinearDynamics { a: a.clone(), sigma_h: q.clone() }.propagate(&b).unwrap();
        let a2 = a.clone();
        let ukf = UnscentedDynamics { f: Box::new(move |h| &a2 * h), sigma_h: q.clone(), params: UnscentedParams::default() }
            .propagate(&b)
            .unwrap();
        assert!((&lin.belief.mean - &ukf.belief.mean).amax() < 1e-10);
        assert!((&lin.belief.cov - &ukf.belief.cov).amax() < 1e-10);
        assert!((&lin.cross - &ukf.cross).amax() < 1e-10);
        let id = unscented_propagate(&|h: &DVector<f64>| h.clone(), &b, &q).unwrap();
        assert!((&id.cov - (&b.cov + &q)).amax() < 1e-10);
    }

    #[test]
    fn incremental_segment_likelihood() {
        let mut rng = substream(23, 0);
        let p = random_model(2, 1, &mut rng);
        let v: Vec<DVector<f64>> = (0..6).map(|_| DVector::from_element(1, rng.gen_range(-1.0..1.0))).collect();
        let direct = innovations_loglik(&p, &v).unwrap();
        let prior = p.prior();
        let dynamics = p.dynamics();
        let mut seg = SegmentFilter::new(&prior, &dynamics, &p.b, &p.sigma_v);
        let mut cum = 0.0;
        for (t, vt) in v.iter().enumerate() {
            cum += direct[t];
            assert!((seg.push(vt).unwrap() - cum).abs() < 1e-10);
        }
    }
}
