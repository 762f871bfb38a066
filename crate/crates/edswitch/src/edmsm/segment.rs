//! Whole-segment emission densities `log p(v_{a:a+n-1} | s)` for segments that
//! start afresh at `a` (no conditioning on earlier segments).

use nalgebra::DVector;
use std::f64::consts::PI;

use crate::hmm::Emission;
use crate::lgssm::{LgssmParams, SegmentFilter};

/// Segment likelihood contract; independent of the segment's total duration.
pub trait SegmentEmission {
    fn num_regimes(&self) -> usize;
    fn len(&self) -> usize;

    /// `log p(v_{start..start+n} | s)` with `n >= 1`.
    fn log_segment(&self, s: usize, start: usize, n: usize) -> f64;

    /// Cumulative log-likelihoods for lengths `1..=max_len`, truncated at the series end.
    fn log_segment_run(&self, s: usize, start: usize, max_len: usize) -> Vec<f64> {
        let n = max_len.min(self.len() - start);
        (1..=n).map(|len| self.log_segment(s, start, len)).collect()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: SegmentEmission + ?Sized> SegmentEmission for &T {
    fn num_regimes(&self) -> usize {
        (**self).num_regimes()
    }
    fn len(&self) -> usize {
        (**self).len()
    }
    fn log_segment(&self, s: usize, start: usize, n: usize) -> f64 {
        (**self).log_segment(s, start, n)
    }
    fn log_segment_run(&self, s: usize, start: usize, max_len: usize) -> Vec<f64> {
        (**self).log_segment_run(s, start, max_len)
    }
}

/// Markovian emission scored segment by segment.
///
/// With `asi` the window restarts at the segment start (`min(k, offset)`);
/// otherwise it reaches into earlier segments (`min(k, t)`).
#[derive(Debug, Clone, Copy)]
pub struct MarkovSegments<E> {
    pub em: E,
    pub asi: bool,
}

impl<E: Emission> MarkovSegments<E> {
    fn lags(&self, start: usize, i: usize) -> usize {
        self.em.order().min(if self.asi { i } else { start + i })
    }
}

impl<E: Emission> SegmentEmission for MarkovSegments<E> {
    fn num_regimes(&self) -> usize {
        self.em.num_regimes()
    }
    fn len(&self) -> usize {
        self.em.len()
    }
    fn log_segment(&self, s: usize, start: usize, n: usize) -> f64 {
        (0..n).map(|i| self.em.log_density(s, start + i, self.lags(start, i))).sum()
    }
    fn log_segment_run(&self, s: usize, start: usize, max_len: usize) -> Vec<f64> {
        let n = max_len.min(self.len() - start);
        let mut acc = 0.0;
        (0..n)
            .map(|i| {
                acc += self.em.log_density(s, start + i, self.lags(start, i));
                acc
            })
            .collect()
    }
}

/// Non-Markovian segment model: `v_i = m + eps_i` with a segment-level mean
/// `m ~ N(prior_mean_s, tau2_s)` and `eps_i ~ N(0, sigma2_s)`.
#[derive(Debug, Clone)]
pub struct SegmentMeanGaussian<'a> {
    pub prior_mean: &'a [f64],
    pub tau2: &'a [f64],
    pub sigma2: &'a [f64],
    pub v: &'a [f64],
}

impl SegmentMeanGaussian<'_> {
    fn closed_form(&self, s: usize, n: usize, sum: f64, sum_sq: f64) -> f64 {
        let (s2, t2) = (self.sigma2[s], self.tau2[s]);
        let nf = n as f64;
        let denom = s2 + nf * t2;
        -0.5 * (nf * (2.0 * PI).ln() + (nf - 1.0) * s2.ln() + denom.ln() + (sum_sq - t2 * sum * sum / denom) / s2)
    }
}

impl SegmentEmission for SegmentMeanGaussian<'_> {
    fn num_regimes(&self) -> usize {
        self.prior_mean.len()
    }
    fn len(&self) -> usize {
        self.v.len()
    }
    fn log_segment(&self, s: usize, start: usize, n: usize) -> f64 {
        let r = self.v[start..start + n].iter().map(|x| x - self.prior_mean[s]);
        let (sum, sum_sq) = r.fold((0.0, 0.0), |(a, b), x| (a + x, b + x * x));
        self.closed_form(s, n, sum, sum_sq)
    }
    fn log_segment_run(&self, s: usize, start: usize, max_len: usize) -> Vec<f64> {
        let n = max_len.min(self.len() - start);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        (0..n)
            .map(|i| {
                let x = self.v[start + i] - self.prior_mean[s];
                sum += x;
                sum_sq += x * x;
                self.closed_form(s, i + 1, sum, sum_sq)
            })
            .collect()
    }
}

/// Per-regime linear Gaussian state-space segments, each started from its prior.
#[derive(Debug, Clone, Copy)]
pub struct LgssmSegments<'a> {
    pub regimes: &'a [LgssmParams],
    pub v: &'a [DVector<f64>],
}

impl SegmentEmission for LgssmSegments<'_> {
    fn num_regimes(&self) -> usize {
        self.regimes.len()
    }
    fn len(&self) -> usize {
        self.v.len()
    }
    fn log_segment(&self, s: usize, start: usize, n: usize) -> f64 {
        *self.log_segment_run(s, start, n).last().unwrap_or(&0.0)
    }
    fn log_segment_run(&self, s: usize, start: usize, max_len: usize) -> Vec<f64> {
        let p = &self.regimes[s];
        let prior = p.prior();
        let dynamics = p.dynamics();
        let mut f = SegmentFilter::new(&prior, &dynamics, &p.b, &p.sigma_v);
        let n = max_len.min(self.len() - start);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            match f.push(&self.v[start + i]) {
                Ok(ll) => out.push(ll),
                Err(e) => {
                    log::warn!("segment filter failed: {e}");
                    out.push(f64::NEG_INFINITY);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn segment_mean_matches_dense_gaussian() {
        let v = [0.3, -1.2, 2.0, 0.7];
        let seg = SegmentMeanGaussian { prior_mean: &[0.5], tau2: &[2.0], sigma2: &[0.4], v: &v };
        let n = 4;
        let cov = DMatrix::from_fn(n, n, |i, j| 2.0 + if i == j { 0.4 } else { 0.0 });
        let x = DVector::from_column_slice(&v);
        let m = DVector::from_element(n, 0.5);
        let dense = crate::lgssm::log_gaussian(&x, &m, &cov).unwrap();
        assert!((seg.log_segment(0, 0, 4) - dense).abs() < 1e-12);
        let run = seg.log_segment_run(0, 1, 10);
        assert_eq!(run.len(), 3);
        assert!((run[2] - seg.log_segment(0, 1, 3)).abs() < 1e-12);
    }

    #[test]
    fn lgssm_run_matches_direct() {
        let p = vec![LgssmParams::scalar(0.9, 0.1, 1.0, 0.5, 0.0, 1.0).unwrap()];
        let v: Vec<DVector<f64>> = [0.1, 0.4, -0.3, 0.8].iter().map(|&x| DVector::from_element(1, x)).collect();
        let seg = LgssmSegments { regimes: &p, v: &v };
        let run = seg.log_segment_run(0, 1, 3);
        let direct: f64 = crate::lgssm::innovations_loglik(&p[0], &v[1..4]).unwrap().iter().sum();
        assert!((run[2] - direct).abs() < 1e-10);
    }
}
