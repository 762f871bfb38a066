//! Pruned recursions and constrained decoding.
//!
//! Increasing counts (and count-duration states) are forced chains: a zero
//! filtered entry stays zero along its continuation, so a row with at most `D`
//! nonzero counts per regime produces at most `D + 1` at the next step. Pruning
//! back to `D` keeps filtering and smoothing at `O(T D)` per regime.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chains::{DMax, EdChain};
use crate::edmsm::{cd, check_emission, count_cap, EdOptions, EdPath, ScaledEmissions, SegmentEmission};
use crate::error::{invalid, Error, Result};
use crate::hmm::Emission;
use crate::numeric::argmax;

/// Which entries to discard once a regime exceeds its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneStrategy {
    /// No pruning.
    #[default]
    None,
    /// Keep the `D` largest entries of each regime.
    KeepTopD,
    /// Remove the single smallest entry of each regime per step while over budget.
    DropLowest,
}

impl FromStr for PruneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "keep-top-d" | "top-d" => Ok(Self::KeepTopD),
            "drop-lowest" => Ok(Self::DropLowest),
            other => Err(Error::InvalidParameter(format!("unknown prune strategy '{other}'"))),
        }
    }
}

/// Budget `D` of retained count hypotheses per regime and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub budget: usize,
    pub strategy: PruneStrategy,
}

impl PruneConfig {
    pub fn new(budget: usize, strategy: PruneStrategy) -> Result<Self> {
        if budget == 0 {
            return invalid("the pruning budget must be at least 1");
        }
        Ok(Self { budget, strategy })
    }

    pub fn keep_top(budget: usize) -> Result<Self> {
        Self::new(budget, PruneStrategy::KeepTopD)
    }

    pub fn is_active(&self) -> bool {
        self.strategy != PruneStrategy::None
    }
}

/// Zeroes entries of `block` (one regime's counts) beyond the budget; returns the dropped mass.
pub fn prune_block(block: &mut [f64], cfg: &PruneConfig) -> f64 {
    let nonzero = block.iter().filter(|&&x| x > 0.0).count();
    if !cfg.is_active() || nonzero <= cfg.budget {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..block.len()).filter(|&i| block[i] > 0.0).collect();
    // Ascending by value; ties drop the larger index first.
    order.sort_by(|&a, &b| block[a].total_cmp(&block[b]).then(b.cmp(&a)));
    let n_drop = match cfg.strategy {
        PruneStrategy::None => 0,
        PruneStrategy::KeepTopD => nonzero - cfg.budget,
        PruneStrategy::DropLowest => 1,
    };
    let mut dropped = 0.0;
    for &i in order.iter().take(n_drop) {
        dropped += block[i];
        block[i] = 0.0;
    }
    dropped
}

/// Prunes every regime block of a filtered row and renormalizes it.
///
/// Returns the dropped probability mass.
pub fn prune_row(row: &mut [f64], block_len: usize, cfg: &PruneConfig) -> f64 {
    let dropped: f64 = row.chunks_mut(block_len).map(|b| prune_block(b, cfg)).sum();
    if dropped > 0.0 {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    dropped
}

/// Retained entries of one regime block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseBlock {
    /// Zero-based offsets within the block, ascending.
    pub index: Vec<usize>,
    pub value: Vec<f64>,
}

impl SparseBlock {
    fn from_dense(block: &[f64]) -> Self {
        let index: Vec<usize> = (0..block.len()).filter(|&i| block[i] > 0.0).collect();
        let value = index.iter().map(|&i| block[i]).collect();
        Self { index, value }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.value.iter().sum()
    }

    fn get(&self, i: usize) -> f64 {
        self.index.binary_search(&i).map_or(0.0, |k| self.value[k])
    }

    /// Keeps the entries `prune_block` would keep; returns the dropped mass.
    fn prune(&mut self, cfg: &PruneConfig) -> f64 {
        if !cfg.is_active() || self.len() <= cfg.budget {
            return 0.0;
        }
        let mut dense = self.value.clone();
        let dropped = prune_block(&mut dense, cfg);
        let keep: Vec<usize> = (0..dense.len()).filter(|&k| dense[k] > 0.0).collect();
        self.index = keep.iter().map(|&k| self.index[k]).collect();
        self.value = keep.iter().map(|&k| self.value[k]).collect();
        dropped
    }
}

/// A pruned row in sparse form with the mass removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedRow {
    pub blocks: Vec<SparseBlock>,
    pub dropped: f64,
}

/// Prunes a normalized dense row (regime blocks of `block_len`) into sparse form.
pub fn prune_filtered(row: &[f64], block_len: usize, cfg: &PruneConfig) -> PrunedRow {
    let mut dense = row.to_vec();
    let dropped = prune_row(&mut dense, block_len, cfg);
    if dropped > 0.0 {
        log::debug!("pruning dropped mass {dropped:.3e}");
    }
    PrunedRow { blocks: dense.chunks(block_len).map(SparseBlock::from_dense).collect(), dropped }
}

/// Sparse increasing-count posterior: `alpha[t][s]` and `gamma[t][s]` over counts `c = index + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedPosterior {
    pub num_regimes: usize,
    pub cap: usize,
    pub alpha: Vec<Vec<SparseBlock>>,
    pub gamma: Vec<Vec<SparseBlock>>,
    pub log_likelihood: f64,
    /// Filtered mass removed at each step.
    pub dropped: Vec<f64>,
}

impl PrunedPosterior {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Dense smoothed row over `(s, c)`, regime-major.
    pub fn dense_gamma(&self, t: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_regimes * self.cap];
        for (s, b) in self.gamma[t].iter().enumerate() {
            for (&i, &v) in b.index.iter().zip(&b.value) {
                row[s * self.cap + i] = v;
            }
        }
        row
    }

    /// `p(c_t = 1 | v)`: a segment starts at `t`.
    pub fn changepoint_marginals(&self) -> Vec<f64> {
        self.gamma.iter().map(|r| r.iter().map(|b| b.get(0)).sum()).collect()
    }

    pub fn smoothed_regimes(&self) -> Vec<Vec<f64>> {
        self.gamma.iter().map(|r| r.iter().map(SparseBlock::sum).collect()).collect()
    }

    pub fn map_regimes(&self) -> Vec<usize> {
        self.smoothed_regimes().iter().map(|r| argmax(r).unwrap_or(0)).collect()
    }

    /// Largest number of counts retained for any regime and step.
    pub fn max_support(&self) -> usize {
        self.alpha.iter().flatten().map(SparseBlock::len).max().unwrap_or(0)
    }
}

/// Increasing-count filtering and smoothing with at most `D` counts per regime.
///
/// A zero count stays zero along its forced continuation, so each step costs
/// `O(S D + S^2)`. With `D` at or above the support the result matches the dense
/// recursion.
pub fn inc_smooth_pruned<E: Emission + ?Sized>(em: &E, chain: &EdChain, opts: EdOptions, cfg: &PruneConfig) -> Result<PrunedPosterior> {
    check_emission(chain, em)?;
    if chain.d_max() == DMax::Unbounded && !chain.hazard().first_segment_starts_at_one() {
        return invalid("unbounded durations with increasing counts need the first segment to start at the first step");
    }
    let t_len = em.len();
    let s_count = chain.num_regimes();
    let cap = count_cap(chain, t_len);
    let e = ScaledEmissions::new(em)?;
    let lags = |t: usize, c: usize| if opts.asi { t.min(c - 1) } else { t };
    let hz = chain.hazard();
    let mut alpha: Vec<Vec<SparseBlock>> = Vec::with_capacity(t_len);
    let mut dropped = Vec::with_capacity(t_len);
    let mut log_lik = 0.0;
    for t in 0..t_len {
        let mut row: Vec<SparseBlock> = if t == 0 {
            (0..s_count)
                .map(|s| {
                    let dense: Vec<f64> = (1..=cap).map(|c| chain.tilde_pi(s) * hz.tilde_lambda(s, c) * e.at(0, s, lags(0, c))).collect();
                    SparseBlock::from_dense(&dense)
                })
                .collect()
        } else {
            let prev = &alpha[t - 1];
            let ends: Vec<f64> = prev
                .iter()
                .enumerate()
                .map(|(i, b)| b.index.iter().zip(&b.value).map(|(&k, &a)| (1.0 - chain.lambda(i, k + 1)) * a).sum())
                .collect();
            (0..s_count)
                .map(|s| {
                    let enter: f64 = (0..s_count).map(|i| chain.pi(s, i) * ends[i]).sum();
                    let mut b = SparseBlock::default();
                    let first = e.at(t, s, lags(t, 1)) * enter;
                    if first > 0.0 {
                        b.index.push(0);
                        b.value.push(first);
                    }
                    for (&k, &a) in prev[s].index.iter().zip(&prev[s].value) {
                        let c = k + 2;
                        if c > cap {
                            continue;
                        }
                        let x = e.at(t, s, lags(t, c)) * chain.lambda(s, c - 1) * a;
                        if x > 0.0 {
                            b.index.push(k + 1);
                            b.value.push(x);
                        }
                    }
                    b
                })
                .collect()
        };
        let z: f64 = row.iter().map(SparseBlock::sum).sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Numerical(format!("forward pass vanished at step {t}")));
        }
        log_lik += z.ln() + e.shift[t];
        row.iter_mut().for_each(|b| b.value.iter_mut().for_each(|x| *x /= z));
        let lost: f64 = row.iter_mut().map(|b| b.prune(cfg)).sum();
        if lost > 0.0 {
            let z2: f64 = row.iter().map(SparseBlock::sum).sum();
            row.iter_mut().for_each(|b| b.value.iter_mut().for_each(|x| *x /= z2));
        }
        dropped.push(lost);
        alpha.push(row);
    }

    let mut last = alpha[t_len - 1].clone();
    if opts.condition_end {
        for (s, b) in last.iter_mut().enumerate() {
            for (&k, x) in b.index.iter().zip(b.value.iter_mut()) {
                *x *= 1.0 - chain.lambda(s, k + 1);
            }
        }
    }
    let end: f64 = last.iter().map(SparseBlock::sum).sum();
    if !(end > 0.0) {
        return Err(Error::Numerical("no segment can end at the last step".into()));
    }
    last.iter_mut().for_each(|b| b.value.iter_mut().for_each(|x| *x /= end));
    log_lik += end.ln();

    let mut gamma = vec![Vec::new(); t_len];
    gamma[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        let a = &alpha[t];
        let g_next = &gamma[t + 1];
        let ends: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, b)| b.index.iter().zip(&b.value).map(|(&k, &x)| (1.0 - chain.lambda(i, k + 1)) * x).sum())
            .collect();
        let ratio: Vec<f64> = (0..s_count)
            .map(|j| {
                let den: f64 = (0..s_count).map(|i| chain.pi(j, i) * ends[i]).sum();
                if den > 0.0 { g_next[j].get(0) / den } else { 0.0 }
            })
            .collect();
        let row: Vec<SparseBlock> = (0..s_count)
            .map(|s| {
                let switch: f64 = (0..s_count).map(|j| chain.pi(j, s) * ratio[j]).sum();
                let mut b = SparseBlock::default();
                let next = &g_next[s];
                // Successor counts `k + 1` appear in ascending order, so one merge pass suffices.
                let mut p = 0;
                for (&k, &x) in a[s].index.iter().zip(&a[s].value) {
                    while p < next.index.len() && next.index[p] < k + 1 {
                        p += 1;
                    }
                    let stay = if k + 1 < cap && p < next.index.len() && next.index[p] == k + 1 { next.value[p] } else { 0.0 };
                    let g = stay + (1.0 - chain.lambda(s, k + 1)) * x * switch;
                    if g > 0.0 {
                        b.index.push(k);
                        b.value.push(g);
                    }
                }
                b
            })
            .collect();
        gamma[t] = row;
    }
    Ok(PrunedPosterior { num_regimes: s_count, cap, alpha, gamma, log_likelihood: log_lik, dropped })
}

/// Allowed durations per segment start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationSubsets {
    /// `allowed[a]`: durations permitted for a segment starting at `a`.
    pub allowed: Vec<Vec<usize>>,
}

impl DurationSubsets {
    /// Every duration in `1..=cap` at every start.
    pub fn full(t_len: usize, cap: usize) -> Self {
        Self { allowed: vec![(1..=cap).collect(); t_len] }
    }

    /// The single duration `d` at every start.
    pub fn fixed(t_len: usize, d: usize) -> Self {
        Self { allowed: vec![vec![d]; t_len] }
    }

    /// Segments may start only within `slack` steps of a boundary (plus the first step)
    /// and must end within `slack` of the next one or of the series end.
    pub fn from_boundaries(boundaries: &[usize], t_len: usize, cap: usize, slack: usize) -> Self {
        let mut marks: Vec<usize> = boundaries.iter().copied().filter(|&b| b > 0 && b < t_len).collect();
        marks.push(0);
        marks.push(t_len);
        marks.sort_unstable();
        marks.dedup();
        let near = |x: usize| marks.iter().any(|&m| m.abs_diff(x) <= slack);
        let allowed = (0..t_len)
            .map(|a| if near(a) { (1..=cap).filter(|&d| near(a + d)).collect() } else { Vec::new() })
            .collect();
        Self { allowed }
    }

    fn permits(&self, start: usize, d: usize) -> bool {
        self.allowed.get(start).is_some_and(|s| s.contains(&d))
    }
}

/// Extended Viterbi over count-duration states restricted to the given duration subsets.
///
/// Fails with [`Error::Infeasible`] when no segmentation of the series satisfies them.
pub fn constrain_viterbi_durations<S: SegmentEmission + ?Sized>(
    seg: &S,
    chain: &EdChain,
    opts: EdOptions,
    subsets: &DurationSubsets,
) -> Result<EdPath> {
    if subsets.allowed.len() != seg.len() {
        return Err(Error::Dimension(format!("{} duration subsets for {} steps", subsets.allowed.len(), seg.len())));
    }
    cd::viterbi_constrained(seg, chain, opts, |a, d| subsets.permits(a, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::chains::{DurationModel, RegimeTransition};
    use crate::edmsm::{inc, MarkovSegments};
    use crate::hmm::GaussianEmission;
    use crate::numeric::total_variation;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn two_regime_chain(d_max: Option<usize>) -> EdChain {
        let tr = RegimeTransition::new(vec![0.5, 0.5], DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let dur = match d_max {
            Some(d) => DurationModel::uniform(2, 1, d).unwrap(),
            None => DurationModel::with_geometric_tail(1, vec![vec![1.0 / 19.0; 10], vec![1.0 / 29.0; 10]], vec![0.9, 0.95]).unwrap(),
        };
        EdChain::new(tr, dur).unwrap()
    }

    fn data(t_len: usize) -> Vec<f64> {
        (0..t_len).map(|t| if (t / 15) % 2 == 0 { 0.2 } else { 2.8 } + 0.3 * ((t * 7) % 5) as f64 - 0.6).collect()
    }

    #[test]
    fn pruned_smoother_with_full_budget_matches_dense() {
        let v = data(120);
        let em = GaussianEmission { means: &[0.0, 3.0], sds: &[1.0, 1.0], v: &v };
        for d_max in [Some(12), None] {
            let ch = two_regime_chain(d_max);
            for cond in [false, true] {
                let opts = EdOptions::default().condition_end(cond);
                let dense = inc::smooth_sequential(&em, &ch, opts).unwrap();
                let cap = dense.space.cap;
                let sparse = inc_smooth_pruned(&em, &ch, opts, &PruneConfig::keep_top(cap).unwrap()).unwrap();
                assert!((dense.log_likelihood - sparse.log_likelihood).abs() < 1e-9);
                for t in 0..v.len() {
                    let g = sparse.dense_gamma(t);
                    assert!(dense.gamma[t].iter().zip(&g).all(|(a, b)| (a - b).abs() < 1e-12), "t={t}");
                }
            }
        }
    }

    #[test]
    fn small_budget_stays_close_and_bounded() {
        let v = data(300);
        let em = GaussianEmission { means: &[0.0, 3.0], sds: &[1.0, 1.0], v: &v };
        let ch = two_regime_chain(None);
        let opts = EdOptions::default();
        let full = inc_smooth_pruned(&em, &ch, opts, &PruneConfig::new(1, PruneStrategy::None).unwrap()).unwrap();
        let pruned = inc_smooth_pruned(&em, &ch, opts, &PruneConfig::keep_top(30).unwrap()).unwrap();
        assert!(pruned.max_support() <= 30);
        for t in 0..v.len() {
            assert!(total_variation(&full.dense_gamma(t), &pruned.dense_gamma(t)) < 0.01, "t={t}");
        }
        let greedy = inc_smooth_pruned(&em, &ch, opts, &PruneConfig::keep_top(1).unwrap()).unwrap();
        assert_eq!(greedy.max_support(), 1);
    }

    #[test]
    fn constrained_decoding() {
        let v = data(60);
        let em = GaussianEmission { means: &[0.0, 3.0], sds: &[1.0, 1.0], v: &v };
        let seg = MarkovSegments { em, asi: true };
        let ch = two_regime_chain(Some(20));
        let opts = EdOptions::default().condition_end(true);
        let free = cd::viterbi(&seg, &ch, opts).unwrap();
        let full = constrain_viterbi_durations(&seg, &ch, opts, &DurationSubsets::full(60, 20)).unwrap();
        assert_eq!(free, full);
        let fixed = constrain_viterbi_durations(&seg, &ch, opts, &DurationSubsets::fixed(60, 15)).unwrap();
        assert!(crate::chains::segments(&fixed.sigma).iter().all(|s| s.len == 15));
        let err = constrain_viterbi_durations(&seg, &ch, opts, &DurationSubsets::fixed(60, 7)).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
        let guided = constrain_viterbi_durations(&seg, &ch, opts, &DurationSubsets::from_boundaries(&[15, 30, 45], 60, 20, 2)).unwrap();
        assert_eq!(guided.regimes, free.regimes);
    }

    proptest! {
        #[test]
        fn pruning_keeps_budget_and_mass(row in proptest::collection::vec(0.0f64..1.0, 12), budget in 1usize..7) {
            let z: f64 = row.iter().sum();
            prop_assume!(z > 0.0);
            let row: Vec<f64> = row.iter().map(|x| x / z).collect();
            let out = prune_filtered(&row, 6, &PruneConfig::keep_top(budget).unwrap());
            let kept: f64 = out.blocks.iter().map(SparseBlock::sum).sum();
            prop_assert!((kept - 1.0).abs() < 1e-12);
            prop_assert!(out.blocks.iter().all(|b| b.len() <= budget));
            prop_assert!(out.dropped >= 0.0 && out.dropped < 1.0);
        }
    }

    #[test]
    fn full_budget_is_identity() {
        let mut row = vec![0.1, 0.2, 0.3, 0.4];
        let before = row.clone();
        let d = prune_row(&mut row, 4, &PruneConfig::keep_top(4).unwrap());
        assert_eq!(d, 0.0);
        assert_eq!(row, before);
    }

    #[test]
    fn keep_top_and_drop_lowest() {
        let mut a = vec![0.1, 0.4, 0.2, 0.3];
        let d = prune_row(&mut a, 4, &PruneConfig::keep_top(2).unwrap());
        assert!((d - 0.3).abs() < 1e-15);
        assert!((a[1] - 0.4 / 0.7).abs() < 1e-15 && a[0] == 0.0 && a[2] == 0.0);
        let mut b = vec![0.1, 0.4, 0.2, 0.3];
        prune_row(&mut b, 4, &PruneConfig::new(2, PruneStrategy::DropLowest).unwrap());
        assert_eq!(b.iter().filter(|&&x| x > 0.0).count(), 3);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(PruneConfig::new(0, PruneStrategy::KeepTopD).is_err());
        assert_eq!("keep-top-d".parse::<PruneStrategy>().unwrap(), PruneStrategy::KeepTopD);
    }
}
