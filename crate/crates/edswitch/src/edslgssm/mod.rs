//! Switching linear Gaussian state-space models with explicit-duration regimes.
//!
//! The joint posterior of `(sigma_t, h_t)` is carried as a weight per augmented
//! state `sigma_t` plus a Gaussian mixture over `h_t` conditioned on it.
//! [`filter::filter`] runs the forward recursion for any encoding, with or
//! without across-segment independence (ASI). [`smooth::smooth`] uses the exact
//! backward passes when ASI holds and the filtered mixtures are uncollapsed, and
//! expectation correction otherwise. [`segmental`] holds the count-duration
//! routines built on per-segment filter banks, and [`robot`] the two-wheeled robot.

pub mod filter;
pub mod robot;
pub mod segmental;
pub mod smooth;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::approx::PruneConfig;
use crate::chains::{DMax, EdChain, Encoding, SigmaState};
use crate::edmsm::{EdPath, StateSpace};
use crate::error::{invalid, Error, Result};
use crate::lgssm::{collapse_parts, Dynamics, GaussianBelief, GaussianMixtureBelief, LgssmParams};
use crate::numeric::argmax;

pub use filter::{dec_filter, filter, inc_filter};
pub use robot::{build_robot_model, simulate_robot, simulate_robot_path, Movement, RobotParams};
pub use segmental::{cd_filter, cd_smooth, cd_viterbi, SegmentBank};
pub use smooth::{dec_smooth, inc_smooth, smooth};

/// Per-regime hidden dynamics and observation model.
#[derive(Clone)]
pub struct Regime {
    /// Belief over `h` at the first step of a segment that does not inherit the past.
    pub prior: GaussianBelief,
    pub dynamics: Arc<dyn Dynamics>,
    pub b: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
}

impl Regime {
    pub fn new(prior: GaussianBelief, dynamics: Arc<dyn Dynamics>, b: DMatrix<f64>, sigma_v: DMatrix<f64>) -> Result<Self> {
        if b.ncols() != prior.dim() || sigma_v.nrows() != b.nrows() || !sigma_v.is_square() {
            return Err(Error::Dimension(format!(
                "prior of dimension {}, B {}x{}, Sigma_V {}x{}",
                prior.dim(),
                b.nrows(),
                b.ncols(),
                sigma_v.nrows(),
                sigma_v.ncols()
            )));
        }
        Ok(Self { prior, dynamics, b, sigma_v })
    }

    pub fn from_lgssm(p: &LgssmParams) -> Self {
        Self { prior: p.prior(), dynamics: Arc::new(p.dynamics()), b: p.b.clone(), sigma_v: p.sigma_v.clone() }
    }

    pub fn h_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn v_dim(&self) -> usize {
        self.b.nrows()
    }
}

impl fmt::Debug for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Regime").field("prior", &self.prior).field("b", &self.b).field("sigma_v", &self.sigma_v).finish()
    }
}

/// How the per-state Gaussian mixtures are reduced after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Collapse {
    /// Keep every component.
    #[default]
    None,
    /// Moment-match to a single Gaussian.
    ToOne,
    /// Keep the heaviest `M - 1` components and merge the rest into one.
    ToM(usize),
}

impl FromStr for Collapse {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "one" | "to-1" | "1" => Ok(Self::ToOne),
            other => {
                let m = other.strip_prefix("to-").unwrap_or(other);
                match m.parse::<usize>() {
                    Ok(m) if m >= 1 => Ok(if m == 1 { Self::ToOne } else { Self::ToM(m) }),
                    _ => Err(Error::InvalidParameter(format!("unknown collapse policy '{other}'"))),
                }
            }
        }
    }
}

impl fmt::Display for Collapse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::ToOne => f.write_str("one"),
            Self::ToM(m) => write!(f, "to-{m}"),
        }
    }
}

impl TryFrom<String> for Collapse {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Collapse> for String {
    fn from(c: Collapse) -> Self {
        c.to_string()
    }
}

/// Complete switching model.
#[derive(Debug, Clone)]
pub struct SlgssmParams {
    pub regimes: Vec<Regime>,
    pub chain: EdChain,
    pub encoding: Encoding,
    /// A new segment restarts `h` from the regime prior.
    pub asi: bool,
    pub collapse: Collapse,
    /// Condition on a segment ending exactly at the last step.
    pub condition_end: bool,
    pub prune: Option<PruneConfig>,
}

impl SlgssmParams {
    /// ASI model with uncollapsed mixtures.
    pub fn new(regimes: Vec<Regime>, chain: EdChain, encoding: Encoding) -> Result<Self> {
        if regimes.len() != chain.num_regimes() {
            return Err(Error::Dimension(format!("{} regimes given, chain has {}", regimes.len(), chain.num_regimes())));
        }
        let h = regimes[0].h_dim();
        let v = regimes[0].v_dim();
        if regimes.iter().any(|r| r.h_dim() != h || r.v_dim() != v) {
            return Err(Error::Dimension("every regime must share the hidden and observed dimensions".into()));
        }
        Ok(Self { regimes, chain, encoding, asi: true, collapse: Collapse::None, condition_end: false, prune: None })
    }

    pub fn from_lgssm(regimes: &[LgssmParams], chain: EdChain, encoding: Encoding) -> Result<Self> {
        Self::new(regimes.iter().map(Regime::from_lgssm).collect(), chain, encoding)
    }

    /// Sets ASI and the matching default collapse policy (none with ASI, to one without).
    pub fn asi(mut self, on: bool) -> Self {
        self.asi = on;
        self.collapse = if on { Collapse::None } else { Collapse::ToOne };
        self
    }

    pub fn collapse(mut self, c: Collapse) -> Self {
        self.collapse = c;
        self
    }

    pub fn condition_end(mut self, on: bool) -> Self {
        self.condition_end = on;
        self
    }

    pub fn prune(mut self, cfg: Option<PruneConfig>) -> Self {
        self.prune = cfg;
        self
    }

    pub fn encoding(mut self, e: Encoding) -> Self {
        self.encoding = e;
        self
    }

    pub fn num_regimes(&self) -> usize {
        self.regimes.len()
    }

    pub fn h_dim(&self) -> usize {
        self.regimes[0].h_dim()
    }

    /// Largest count represented for a series of length `t_len`.
    pub fn cap(&self, t_len: usize) -> usize {
        match self.chain.d_max() {
            DMax::Finite(d) => d,
            DMax::Unbounded => t_len.max(1),
        }
    }

    pub fn space(&self, t_len: usize) -> StateSpace {
        StateSpace::new(self.encoding, self.num_regimes(), self.cap(t_len))
    }

    pub(crate) fn pruning(&self) -> Option<&PruneConfig> {
        self.prune.as_ref().filter(|p| p.is_active())
    }

    pub(crate) fn validate(&self, v: &[DVector<f64>]) -> Result<StateSpace> {
        if v.is_empty() {
            return invalid("T must be at least 1");
        }
        let vd = self.regimes[0].v_dim();
        if let Some(t) = v.iter().position(|x| x.len() != vd) {
            return Err(Error::Dimension(format!("observation {t} has dimension {}, expected {vd}", v[t].len())));
        }
        if let Collapse::ToM(0) = self.collapse {
            return invalid("a collapse target must keep at least one component");
        }
        if self.chain.d_max() == DMax::Unbounded {
            match self.encoding {
                Encoding::Inc if !self.chain.hazard().first_segment_starts_at_one() => {
                    return invalid("unbounded durations with increasing counts need the first segment to start at the first step");
                }
                Encoding::Dec | Encoding::Cd if !self.condition_end => {
                    return invalid(format!("unbounded durations with {} states need end conditioning", self.encoding));
                }
                _ => {}
            }
        }
        Ok(self.space(v.len()))
    }
}

/// One Gaussian component of the belief over `h_t` given `sigma_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub belief: GaussianBelief,
    /// First step of the segment the component conditions on, when known.
    pub start: Option<usize>,
    /// Last step of that segment, when the component conditions on it.
    pub end: Option<usize>,
}

impl Component {
    pub fn new(weight: f64, belief: GaussianBelief, start: Option<usize>) -> Self {
        Self { weight, belief, start, end: None }
    }
}

/// Moment-matched single Gaussian of a component list.
pub fn moments(comps: &[Component]) -> Result<GaussianBelief> {
    let w: Vec<f64> = comps.iter().map(|c| c.weight).collect();
    let b: Vec<GaussianBelief> = comps.iter().map(|c| c.belief.clone()).collect();
    collapse_parts(&w, &b)
}

/// Applies a collapse policy to a normalized component list.
pub fn reduce(comps: Vec<Component>, policy: Collapse) -> Result<Vec<Component>> {
    let m = match policy {
        Collapse::None => return Ok(comps),
        Collapse::ToOne => 1,
        Collapse::ToM(m) => m,
    };
    if comps.len() <= m {
        return Ok(comps);
    }
    let mut comps = comps;
    comps.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    let tail = comps.split_off(m - 1);
    let w: f64 = tail.iter().map(|c| c.weight).sum();
    let merged = moments(&tail)?;
    let same = |f: fn(&Component) -> Option<usize>| {
        let first = f(&tail[0]);
        tail.iter().all(|c| f(c) == first).then_some(first).flatten()
    };
    let (start, end) = (same(|c| c.start), same(|c| c.end));
    comps.push(Component { weight: w, belief: merged, start, end });
    Ok(comps)
}

/// Weights over augmented states and the conditional mixtures over `h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchBelief {
    /// `p(sigma_t | data)`, indexed by the state space.
    pub weights: Vec<f64>,
    /// Normalized components of `p(h_t | sigma_t, data)`; empty where the weight is zero.
    pub mixtures: Vec<Vec<Component>>,
}

impl SwitchBelief {
    /// `sum_sigma w_sigma p(h_t | sigma_t, data)` as a flat mixture.
    pub fn h_mixture(&self) -> GaussianMixtureBelief {
        let mut weights = Vec::new();
        let mut components = Vec::new();
        for (w, mix) in self.weights.iter().zip(&self.mixtures) {
            if *w > 0.0 {
                for c in mix {
                    weights.push(w * c.weight);
                    components.push(c.belief.clone());
                }
            }
        }
        GaussianMixtureBelief { weights, components }
    }

    /// Mean and covariance of `p(h_t | data)`.
    pub fn h_moments(&self) -> Result<GaussianBelief> {
        let mix = self.h_mixture();
        collapse_parts(&mix.weights, &mix.components)
    }

    /// Conditional belief of a state collapsed to one Gaussian, if it has weight.
    pub fn conditional(&self, i: usize) -> Option<GaussianBelief> {
        (self.weights[i] > 0.0 && !self.mixtures[i].is_empty()).then(|| moments(&self.mixtures[i]).ok()).flatten()
    }
}

/// `p(h_t | v)` as a mixture over every augmented state and component.
pub fn assemble_h_posterior(belief: &SwitchBelief) -> GaussianMixtureBelief {
    belief.h_mixture()
}

/// Filtered or smoothed posterior over a whole series.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchPosterior {
    pub space: StateSpace,
    pub steps: Vec<SwitchBelief>,
    /// `log p(v_t | v_{1:t-1})` from the forward pass.
    pub log_norm: Vec<f64>,
    /// `log p(v_{1:T})`, or jointly with the end condition when requested.
    pub log_likelihood: f64,
    /// Probability mass removed by pruning at each step.
    pub pruned_mass: Vec<f64>,
}

impl SwitchPosterior {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn weight(&self, t: usize, sigma: SigmaState) -> f64 {
        self.space.index(sigma).map_or(0.0, |i| self.steps[t].weights[i])
    }

    pub fn mixture(&self, t: usize, sigma: SigmaState) -> &[Component] {
        self.space.index(sigma).map_or(&[], |i| &self.steps[t].mixtures[i])
    }

    /// Per-step regime marginals.
    pub fn regimes(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|b| self.space.regime_marginal(&b.weights)).collect()
    }

    pub fn map_regimes(&self) -> Vec<usize> {
        self.regimes().iter().map(|r| argmax(r).unwrap_or(0)).collect()
    }

    /// Per-step moments of `p(h_t | data)`.
    pub fn h_moments(&self) -> Result<Vec<GaussianBelief>> {
        self.steps.iter().map(SwitchBelief::h_moments).collect()
    }

    pub fn means(&self) -> Result<Vec<DVector<f64>>> {
        Ok(self.h_moments()?.into_iter().map(|b| b.mean).collect())
    }

    /// Dense weight tables, one row per step.
    pub fn weight_table(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|b| b.weights.clone()).collect()
    }
}

/// Decoded segmentation with its log joint.
pub type SwitchPath = EdPath;

/// Probability that the segment containing `sigma` ends at the last step.
pub(crate) fn end_weight(chain: &EdChain, sigma: SigmaState) -> f64 {
    match sigma {
        SigmaState::Inc { s, c } => 1.0 - chain.lambda(s, c),
        _ => f64::from(u8::from(sigma.count() == 1)),
    }
}

/// Predecessor of a state at `t - 1` together with `p(sigma_t | pred)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Pred {
    pub index: usize,
    pub prob: f64,
    /// The move starts a new segment at `t`.
    pub new_segment: bool,
}

/// The unique continuing predecessor of `sigma`, if any.
pub(crate) fn continuing(sp: &StateSpace, chain: &EdChain, sigma: SigmaState) -> Option<Pred> {
    let (prev, prob) = match sigma {
        SigmaState::Dec { s, c } => (SigmaState::Dec { s, c: c + 1 }, 1.0),
        SigmaState::Inc { s, c } if c > 1 => (SigmaState::Inc { s, c: c - 1 }, chain.lambda(s, c - 1)),
        SigmaState::Cd { s, d, c } if c < d => (SigmaState::Cd { s, d, c: c + 1 }, 1.0),
        _ => return None,
    };
    let index = sp.index(prev)?;
    (prob > 0.0).then_some(Pred { index, prob, new_segment: false })
}

/// Factor of `p(sigma_t | pred)` that depends on `sigma_t` alone for a segment start.
pub(crate) fn entry_factor(chain: &EdChain, sigma: SigmaState) -> f64 {
    match sigma {
        SigmaState::Dec { s, c } => chain.rho(s, c),
        SigmaState::Inc { c, .. } => f64::from(u8::from(c == 1)),
        SigmaState::Cd { s, d, c } => {
            if c == d {
                chain.rho(s, d)
            } else {
                0.0
            }
        }
    }
}

/// States that can end a segment at `t - 1` and the factor of the move into a segment of `s`.
pub(crate) fn enders(sp: &StateSpace, chain: &EdChain, s: usize) -> Vec<(usize, f64)> {
    (0..sp.len())
        .filter_map(|i| {
            let st = sp.state(i);
            let r = st.regime();
            let k = match st {
                SigmaState::Inc { c, .. } => (1.0 - chain.lambda(r, c)) * chain.pi(s, r),
                _ if st.count() == 1 => chain.pi(s, r),
                _ => 0.0,
            };
            (k > 0.0).then_some((i, k))
        })
        .collect()
}

/// All predecessors of `sigma` with positive transition probability.
pub(crate) fn predecessors(sp: &StateSpace, chain: &EdChain, sigma: SigmaState) -> Vec<Pred> {
    let mut out: Vec<Pred> = continuing(sp, chain, sigma).into_iter().collect();
    let f = entry_factor(chain, sigma);
    if f > 0.0 {
        out.extend(
            enders(sp, chain, sigma.regime())
                .into_iter()
                .map(|(index, k)| Pred { index, prob: k * f, new_segment: true }),
        );
    }
    out
}

#[cfg(test)]
mod tests;
