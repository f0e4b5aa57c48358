//! Control problem definitions.
//!
//! An [`MdpSpec`] bundles the state box, the action set, the hold time `δ`,
//! the horizon `T`, the discounting and four coefficient maps (drift `h`,
//! diffusion `σ`, running reward `r`, terminal reward `g`). Two modes exist:
//!
//! - [`Mode::ContinuousSde`]: the state follows `ds = h dt + σ dW` while the
//!   action is held for `δ`, discounting at rate `λ`;
//! - [`Mode::DiscreteDeterministic`]: a stationary one-step model
//!   `s' = transition(s, a)` with discount factor `γ` and no time axis.
//!
//! Coefficients are plain Rust values implementing [`Coefficients`]; named
//! problems live in [`crate::catalog`].

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ContinuousSde,
    DiscreteDeterministic,
}

/// Axis-aligned compact box `[lo_0, hi_0] × ... × [lo_{n-1}, hi_{n-1}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "box bounds must be non-empty and of equal length ({} vs {})",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
            return Err(Error::InvalidSpec(format!("degenerate box {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Projects `x` onto the box; returns `true` if any coordinate moved.
    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut moved = false;
        for ((xi, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            if *xi < *lo {
                *xi = *lo;
                moved = true;
            } else if *xi > *hi {
                *xi = *hi;
                moved = true;
            }
        }
        moved
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

/// A categorical action with a coordinate embedding (used by the metric and
/// passed to the coefficient maps).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteAction {
    pub name: String,
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Box(BoxSet),
    Finite(Vec<FiniteAction>),
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Box(b) => b.dim(),
            ActionSpace::Finite(list) => list.first().map_or(0, |a| a.coords.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discount {
    /// Continuous discount rate `λ > 0`.
    Rate(f64),
    /// Per-step discount factor `γ ∈ (0, 1)`.
    Factor(f64),
}

/// Declared regularity constants: Lipschitz constants `Λ` and sup bounds `M`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeclaredConstants {
    pub lip_h: f64,
    pub lip_sigma: f64,
    pub lip_r: f64,
    pub lip_g: f64,
    pub bound_h: f64,
    pub bound_sigma: f64,
    pub bound_r: f64,
    pub bound_g: f64,
}

/// Coefficient maps of a control problem. All maps must be pure.
///
/// `a` is always the action's coordinate vector (box coordinates, or the
/// embedding of a finite action). The diffusion is written row-major into an
/// `n × d` buffer.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, s: &[f64], a: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, s: &[f64], a: &[f64], out: &mut [f64]);
    fn reward(&self, t: f64, s: &[f64], a: &[f64]) -> f64;
    fn terminal(&self, s: &[f64]) -> f64;

    /// One-step map for [`Mode::DiscreteDeterministic`]; defaults to staying put.
    fn transition(&self, s: &[f64], a: &[f64], out: &mut [f64]) {
        let _ = a;
        out.copy_from_slice(s);
    }
}

type VecMap = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
type ScalarMap = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;
type TerminalMap = dyn Fn(&[f64]) -> f64 + Send + Sync;
type TransitionMap = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// [`Coefficients`] assembled from closures; handy for tests and ad-hoc problems.
#[derive(Clone)]
pub struct ClosureCoefficients {
    pub drift: Arc<VecMap>,
    pub diffusion: Arc<VecMap>,
    pub reward: Arc<ScalarMap>,
    pub terminal: Arc<TerminalMap>,
    pub transition: Option<Arc<TransitionMap>>,
}

impl ClosureCoefficients {
    /// Zero drift, zero diffusion, zero rewards.
    pub fn zero() -> Self {
        Self {
            drift: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            reward: Arc::new(|_, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
            transition: None,
        }
    }
}

impl Coefficients for ClosureCoefficients {
    fn drift(&self, t: f64, s: &[f64], a: &[f64], out: &mut [f64]) {
        (self.drift)(t, s, a, out)
    }
    fn diffusion(&self, t: f64, s: &[f64], a: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, s, a, out)
    }
    fn reward(&self, t: f64, s: &[f64], a: &[f64]) -> f64 {
        (self.reward)(t, s, a)
    }
    fn terminal(&self, s: &[f64]) -> f64 {
        (self.terminal)(s)
    }
    fn transition(&self, s: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.transition {
            Some(f) => f(s, a, out),
            None => out.copy_from_slice(s),
        }
    }
}

/// A fully specified control problem. Immutable once built.
#[derive(Clone)]
pub struct MdpSpec {
    pub name: String,
    pub mode: Mode,
    pub states: BoxSet,
    pub actions: ActionSpace,
    /// Brownian dimension `d` (columns of `σ`).
    pub noise_dim: usize,
    pub horizon: f64,
    /// Hold time `δ`.
    pub hold: f64,
    pub discount: Discount,
    /// Number of stages for finite-stage discrete problems; `None` = unbounded.
    pub stages: Option<usize>,
    pub constants: DeclaredConstants,
    coeffs: Arc<dyn Coefficients>,
}

impl fmt::Debug for MdpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MdpSpec")
            .field("name", &self.name)
            .field("mode", &self.mode)
            .field("states", &self.states)
            .field("actions", &self.actions)
            .field("horizon", &self.horizon)
            .field("hold", &self.hold)
            .field("discount", &self.discount)
            .field("stages", &self.stages)
            .finish_non_exhaustive()
    }
}

pub struct MdpSpecBuilder {
    name: String,
    mode: Mode,
    states: Option<BoxSet>,
    actions: Option<ActionSpace>,
    noise_dim: usize,
    horizon: f64,
    hold: f64,
    discount: Option<Discount>,
    stages: Option<usize>,
    constants: DeclaredConstants,
    coeffs: Option<Arc<dyn Coefficients>>,
}

impl MdpSpecBuilder {
    pub fn states(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.states = Some(BoxSet { lo, hi });
        self
    }
    pub fn box_actions(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.actions = Some(ActionSpace::Box(BoxSet { lo, hi }));
        self
    }
    pub fn finite_actions(mut self, actions: Vec<FiniteAction>) -> Self {
        self.actions = Some(ActionSpace::Finite(actions));
        self
    }
    pub fn noise_dim(mut self, d: usize) -> Self {
        self.noise_dim = d;
        self
    }
    pub fn horizon(mut self, t: f64) -> Self {
        self.horizon = t;
        self
    }
    pub fn hold(mut self, delta: f64) -> Self {
        self.hold = delta;
        self
    }
    pub fn rate(mut self, lambda: f64) -> Self {
        self.discount = Some(Discount::Rate(lambda));
        self
    }
    pub fn factor(mut self, gamma: f64) -> Self {
        self.discount = Some(Discount::Factor(gamma));
        self
    }
    pub fn stages(mut self, n: Option<usize>) -> Self {
        self.stages = n;
        self
    }
    pub fn constants(mut self, c: DeclaredConstants) -> Self {
        self.constants = c;
        self
    }
    pub fn coefficients(mut self, c: impl Coefficients + 'static) -> Self {
        self.coeffs = Some(Arc::new(c));
        self
    }

    pub fn build(self) -> Result<MdpSpec> {
        let missing = |what: &str| Error::InvalidSpec(format!("missing {what}"));
        let states = self.states.ok_or_else(|| missing("state box"))?;
        let states = BoxSet::new(states.lo, states.hi)?;
        let actions = self.actions.ok_or_else(|| missing("action set"))?;
        match &actions {
            ActionSpace::Box(b) => {
                BoxSet::new(b.lo.clone(), b.hi.clone())?;
            }
            ActionSpace::Finite(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidSpec("empty finite action list".into()));
                }
                let d = list[0].coords.len();
                if list.iter().any(|a| a.coords.len() != d) {
                    return Err(Error::InvalidSpec("finite actions have mixed dimensions".into()));
                }
            }
        }
        let discount = self.discount.ok_or_else(|| missing("discount"))?;
        let coeffs = self.coeffs.ok_or_else(|| missing("coefficients"))?;
        let spec = MdpSpec {
            name: self.name,
            mode: self.mode,
            states,
            actions,
            noise_dim: self.noise_dim,
            horizon: self.horizon,
            hold: self.hold,
            discount,
            stages: self.stages,
            constants: self.constants,
            coeffs,
        };
        spec.check_invariants()?;
        Ok(spec)
    }
}

impl MdpSpec {
    pub fn builder(name: impl Into<String>, mode: Mode) -> MdpSpecBuilder {
        MdpSpecBuilder {
            name: name.into(),
            mode,
            states: None,
            actions: None,
            noise_dim: 1,
            horizon: 1.0,
            hold: 1.0,
            discount: None,
            stages: None,
            constants: DeclaredConstants::default(),
            coeffs: None,
        }
    }

    fn check_invariants(&self) -> Result<()> {
        if !(self.hold > 0.0 && self.hold.is_finite()) {
            return Err(Error::InvalidSpec(format!("hold time δ must be > 0, got {}", self.hold)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidSpec(format!("horizon T must be > 0, got {}", self.horizon)));
        }
        match (self.mode, self.discount) {
            (Mode::ContinuousSde, Discount::Rate(l)) if l > 0.0 && l.is_finite() => {}
            (Mode::DiscreteDeterministic, Discount::Factor(g)) if g > 0.0 && g < 1.0 => {}
            (mode, d) => {
                return Err(Error::InvalidSpec(format!("discount {d:?} is invalid for mode {mode:?}")))
            }
        }
        if self.mode == Mode::ContinuousSde && self.noise_dim == 0 {
            return Err(Error::InvalidSpec("noise dimension must be ≥ 1".into()));
        }
        let c = &self.constants;
        let all = [
            c.lip_h, c.lip_sigma, c.lip_r, c.lip_g, c.bound_h, c.bound_sigma, c.bound_r, c.bound_g,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidSpec("declared constants must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.states.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.dim()
    }

    pub fn has_time_axis(&self) -> bool {
        self.mode == Mode::ContinuousSde
    }

    /// Contraction factor `β`: `e^{-λδ}` or `γ`.
    pub fn discount_factor(&self) -> f64 {
        match self.discount {
            Discount::Rate(lambda) => (-lambda * self.hold).exp(),
            Discount::Factor(gamma) => gamma,
        }
    }

    /// `-ln β`, i.e. `λδ` or `ln(1/γ)`.
    pub fn log_contraction(&self) -> f64 {
        match self.discount {
            Discount::Rate(lambda) => lambda * self.hold,
            Discount::Factor(gamma) => -gamma.ln(),
        }
    }

    /// Continuous discount rate `λ`; zero in discrete mode.
    pub fn rate(&self) -> f64 {
        match self.discount {
            Discount::Rate(lambda) => lambda,
            Discount::Factor(_) => 0.0,
        }
    }

    /// Uniform bound `M_Q` on the Q-function.
    pub fn uniform_q_bound(&self) -> f64 {
        uniform_q_bound_with_stages(self, self.stages)
    }

    /// Number of hold intervals covering the horizon: `⌈T/δ⌉`, or the stage
    /// count for finite-stage discrete problems.
    pub fn n_max(&self) -> Option<usize> {
        match self.mode {
            Mode::ContinuousSde => Some((self.horizon / self.hold - 1e-9).ceil().max(1.0) as usize),
            Mode::DiscreteDeterministic => self.stages,
        }
    }

    /// A copy of this spec with a different stage count.
    pub fn with_stages(&self, stages: Option<usize>) -> MdpSpec {
        let mut s = self.clone();
        s.stages = stages;
        s
    }

    pub fn drift(&self, t: f64, s: &[f64], a: &[f64], out: &mut [f64]) {
        self.coeffs.drift(t, s, a, out)
    }
    pub fn diffusion(&self, t: f64, s: &[f64], a: &[f64], out: &mut [f64]) {
        self.coeffs.diffusion(t, s, a, out)
    }
    pub fn reward(&self, t: f64, s: &[f64], a: &[f64]) -> f64 {
        self.coeffs.reward(t, s, a)
    }
    pub fn terminal(&self, s: &[f64]) -> f64 {
        self.coeffs.terminal(s)
    }
    pub fn transition(&self, s: &[f64], a: &[f64], out: &mut [f64]) {
        self.coeffs.transition(s, a, out)
    }
}

/// `M_Q` for an explicit stage count (ignored in continuous mode).
pub fn uniform_q_bound_with_stages(spec: &MdpSpec, stages: Option<usize>) -> f64 {
    let c = &spec.constants;
    match spec.discount {
        Discount::Rate(lambda) => c.bound_r / lambda + c.bound_g,
        Discount::Factor(gamma) => match stages {
            Some(n) => {
                let gn = gamma.powi(n as i32);
                c.bound_r * (1.0 - gn) / (1.0 - gamma) + gn * c.bound_g
            }
            None => c.bound_r / (1.0 - gamma) + c.bound_g,
        },
    }
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

/// Declared constants are accepted up to this factor.
pub const AUDIT_TOLERANCE: f64 = 1.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Bound,
    Lipschitz,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub coefficient: String,
    pub kind: ViolationKind,
    pub observed: f64,
    pub declared: f64,
    /// `(t, s.., a..)` of the offending point(s); the second is absent for bounds.
    pub first: Vec<f64>,
    pub second: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientAudit {
    pub name: String,
    pub max_abs: f64,
    pub max_slope: f64,
    pub declared_bound: f64,
    pub declared_lipschitz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n_probe: usize,
    pub seed: u64,
    pub coefficients: Vec<CoefficientAudit>,
    /// Worst offending pair per coefficient and kind, plus up to
    /// [`MAX_LISTED_VIOLATIONS`] further pairs.
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientAudit> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

pub const MAX_LISTED_VIOLATIONS: usize = 32;

#[derive(Clone)]
struct Probe {
    t: f64,
    s: Vec<f64>,
    a: Vec<f64>,
}

impl Probe {
    fn flat(&self) -> Vec<f64> {
        let mut v = vec![self.t];
        v.extend_from_slice(&self.s);
        v.extend_from_slice(&self.a);
        v
    }
}

struct Evaluated {
    h: Vec<f64>,
    sigma: Vec<f64>,
    r: f64,
    g: f64,
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    l2(a.iter().zip(b).map(|(x, y)| x - y))
}

/// `d_KQ(X, X') = |t - t'| + ‖s - s'‖ + ‖a - a'‖`.
pub fn kq_distance(t1: f64, s1: &[f64], a1: &[f64], t2: f64, s2: &[f64], a2: &[f64]) -> f64 {
    (t1 - t2).abs() + l2_diff(s1, s2) + l2_diff(a1, a2)
}

fn draw_probe<R: Rng>(spec: &MdpSpec, rng: &mut R) -> Probe {
    let t = if spec.has_time_axis() { spec.horizon * rng.random::<f64>() } else { 0.0 };
    let s = spec.states.sample(rng);
    let a = match &spec.actions {
        ActionSpace::Box(b) => b.sample(rng),
        ActionSpace::Finite(list) => list[rng.random_range(0..list.len())].coords.clone(),
    };
    Probe { t, s, a }
}

/// Small perturbation of a probe, kept inside `K_Q`.
fn jitter<R: Rng>(spec: &MdpSpec, p: &Probe, rng: &mut R) -> Probe {
    let eta = 1e-3;
    let mut q = p.clone();
    if spec.has_time_axis() {
        q.t = (p.t + eta * spec.horizon * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, spec.horizon);
    }
    for (i, x) in q.s.iter_mut().enumerate() {
        let w = spec.states.hi[i] - spec.states.lo[i];
        *x += eta * w * (2.0 * rng.random::<f64>() - 1.0);
    }
    spec.states.clamp(&mut q.s);
    if let ActionSpace::Box(b) = &spec.actions {
        for (i, x) in q.a.iter_mut().enumerate() {
            *x += eta * (b.hi[i] - b.lo[i]) * (2.0 * rng.random::<f64>() - 1.0);
        }
        b.clamp(&mut q.a);
    }
    q
}

fn evaluate(spec: &MdpSpec, p: &Probe) -> Result<Evaluated> {
    let n = spec.state_dim();
    let mut h = vec![0.0; n];
    let mut sigma = vec![0.0; n * spec.noise_dim];
    if spec.mode == Mode::ContinuousSde {
        spec.drift(p.t, &p.s, &p.a, &mut h);
        spec.diffusion(p.t, &p.s, &p.a, &mut sigma);
    }
    let r = spec.reward(p.t, &p.s, &p.a);
    let g = spec.terminal(&p.s);
    let bad = |name: &str| Error::NonFiniteCoefficient { coefficient: name.into(), point: p.flat() };
    if h.iter().any(|x| !x.is_finite()) {
        return Err(bad("h"));
    }
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(bad("sigma"));
    }
    if !r.is_finite() {
        return Err(bad("r"));
    }
    if !g.is_finite() {
        return Err(bad("g"));
    }
    Ok(Evaluated { h, sigma, r, g })
}

struct Tracker {
    name: &'static str,
    declared_bound: f64,
    declared_lip: f64,
    max_abs: f64,
    max_slope: f64,
    worst_bound: Option<Violation>,
    worst_lip: Option<Violation>,
    extra: Vec<Violation>,
}

impl Tracker {
    fn new(name: &'static str, declared_bound: f64, declared_lip: f64) -> Self {
        Self {
            name,
            declared_bound,
            declared_lip,
            max_abs: 0.0,
            max_slope: 0.0,
            worst_bound: None,
            worst_lip: None,
            extra: Vec::new(),
        }
    }

    fn exceeds(observed: f64, declared: f64) -> bool {
        observed > declared * AUDIT_TOLERANCE + 1e-12
    }

    fn value(&mut self, v: f64, at: &Probe) {
        self.max_abs = self.max_abs.max(v);
        if Self::exceeds(v, self.declared_bound) {
            let viol = Violation {
                coefficient: self.name.into(),
                kind: ViolationKind::Bound,
                observed: v,
                declared: self.declared_bound,
                first: at.flat(),
                second: None,
            };
            self.record(viol, true);
        }
    }

    fn slope(&mut self, v: f64, x: &Probe, y: &Probe) {
        self.max_slope = self.max_slope.max(v);
        if Self::exceeds(v, self.declared_lip) {
            let viol = Violation {
                coefficient: self.name.into(),
                kind: ViolationKind::Lipschitz,
                observed: v,
                declared: self.declared_lip,
                first: x.flat(),
                second: Some(y.flat()),
            };
            self.record(viol, false);
        }
    }

    fn record(&mut self, viol: Violation, bound: bool) {
        let slot = if bound { &mut self.worst_bound } else { &mut self.worst_lip };
        match slot {
            Some(w) if w.observed >= viol.observed => {
                if self.extra.len() < MAX_LISTED_VIOLATIONS {
                    self.extra.push(viol);
                }
            }
            _ => {
                if let Some(old) = slot.replace(viol) {
                    if self.extra.len() < MAX_LISTED_VIOLATIONS {
                        self.extra.push(old);
                    }
                }
            }
        }
    }
}

/// Probes the coefficients at `n_probe` random points of `K_Q` and checks the
/// declared bounds and Lipschitz constants.
///
/// Each probe is paired with its predecessor (a random pair) and with a small
/// jitter of itself (a local difference quotient). Probe `i` depends only on
/// `(seed, i)`, so observed maxima never decrease as `n_probe` grows.
/// Sampling can only refute a declared constant, never certify it.
pub fn validate_spec(spec: &MdpSpec, n_probe: usize, seed: u64) -> Result<AuditReport> {
    if n_probe < 2 {
        return Err(Error::InvalidConfig("n_probe must be ≥ 2".into()));
    }
    let c = spec.constants;
    let mut trackers = [
        Tracker::new("h", c.bound_h, c.lip_h),
        Tracker::new("sigma", c.bound_sigma, c.lip_sigma),
        Tracker::new("r", c.bound_r, c.lip_r),
        Tracker::new("g", c.bound_g, c.lip_g),
    ];
    let base = rng::derive_seed(seed, 0xA0D1);
    let mut prev: Option<(Probe, Evaluated)> = None;
    for i in 0..n_probe {
        let mut r = rng::stream(base, i as u64);
        let p = draw_probe(spec, &mut r);
        let q = jitter(spec, &p, &mut r);
        let ep = evaluate(spec, &p)?;
        let eq = evaluate(spec, &q)?;
        trackers[0].value(l2(ep.h.iter().copied()), &p);
        trackers[1].value(l2(ep.sigma.iter().copied()), &p);
        trackers[2].value(ep.r.abs(), &p);
        trackers[3].value(ep.g.abs(), &p);

        let mut pairs: Vec<(&Probe, &Evaluated)> = vec![(&q, &eq)];
        if let Some((pp, pe)) = &prev {
            pairs.push((pp, pe));
        }
        for (other, eo) in pairs {
            let d = kq_distance(p.t, &p.s, &p.a, other.t, &other.s, &other.a);
            if d > 1e-14 {
                trackers[0].slope(l2_diff(&ep.h, &eo.h) / d, &p, other);
                trackers[1].slope(l2_diff(&ep.sigma, &eo.sigma) / d, &p, other);
                trackers[2].slope((ep.r - eo.r).abs() / d, &p, other);
            }
            let ds = l2_diff(&p.s, &other.s);
            if ds > 1e-14 {
                trackers[3].slope((ep.g - eo.g).abs() / ds, &p, other);
            }
        }
        prev = Some((p, ep));
    }

    let mut violations = Vec::new();
    let mut coefficients = Vec::new();
    for t in trackers {
        coefficients.push(CoefficientAudit {
            name: t.name.into(),
            max_abs: t.max_abs,
            max_slope: t.max_slope,
            declared_bound: t.declared_bound,
            declared_lipschitz: t.declared_lip,
        });
        violations.extend(t.worst_bound);
        violations.extend(t.worst_lip);
        violations.extend(t.extra);
    }
    let report = AuditReport { n_probe, seed, coefficients, violations };
    if report.violations.is_empty() {
        Ok(report)
    } else {
        Err(Error::BoundViolation { report: Box::new(report) })
    }
}

/// Runs the audit and returns the report whether or not it found violations.
pub fn audit_report(spec: &MdpSpec, n_probe: usize, seed: u64) -> Result<AuditReport> {
    match validate_spec(spec, n_probe, seed) {
        Ok(r) => Ok(r),
        Err(Error::BoundViolation { report }) => Ok(*report),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;

    fn zero_spec() -> MdpSpec {
        MdpSpec::builder("zero", Mode::ContinuousSde)
            .states(vec![0.0], vec![1.0])
            .box_actions(vec![-1.0], vec![1.0])
            .rate(1.0)
            .hold(0.1)
            .coefficients(ClosureCoefficients::zero())
            .build()
            .unwrap()
    }

    #[test]
    fn discount_factor_continuous() {
        let spec = zero_spec();
        assert!((spec.discount_factor() - (-0.1f64).exp()).abs() < 1e-15);
        assert!((spec.discount_factor() - 0.904_837_418_035_959_6).abs() < 1e-15);
    }

    #[test]
    fn discount_factor_discrete() {
        let spec = catalog::appendix_e();
        assert_eq!(spec.discount_factor(), 0.9);
    }

    #[test]
    fn zero_hold_is_rejected() {
        let err = MdpSpec::builder("bad", Mode::ContinuousSde)
            .states(vec![0.0], vec![1.0])
            .box_actions(vec![0.0], vec![1.0])
            .rate(3.0)
            .hold(0.0)
            .coefficients(ClosureCoefficients::zero())
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    #[test]
    fn mismatched_discount_is_rejected() {
        let err = MdpSpec::builder("bad", Mode::DiscreteDeterministic)
            .states(vec![0.0], vec![1.0])
            .box_actions(vec![0.0], vec![1.0])
            .factor(1.0)
            .coefficients(ClosureCoefficients::zero())
            .build();
        assert!(err.is_err());
    }

    #[test]
    fn q_bound_formulas() {
        let mut spec = zero_spec();
        spec.discount = Discount::Rate(2.0);
        spec.constants.bound_r = 1.0;
        spec.constants.bound_g = 0.5;
        assert_eq!(spec.uniform_q_bound(), 1.0);

        spec.constants.bound_r = 0.0;
        spec.constants.bound_g = 0.0;
        assert_eq!(spec.uniform_q_bound(), 0.0);

        let e = catalog::appendix_e();
        assert!((e.uniform_q_bound() - 0.475).abs() < 1e-15);
        assert!((uniform_q_bound_with_stages(&e, None) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn audit_appendix_problem() {
        let spec = catalog::appendix_e();
        let report = validate_spec(&spec, 10_000, 1).unwrap();
        let r = report.coefficient("r").unwrap();
        assert!(r.max_abs <= 0.25 && r.max_abs > 0.24);
        assert!(r.max_slope <= 1.0 && r.max_slope > 0.9);
    }

    #[test]
    fn audit_zero_problem() {
        let report = validate_spec(&zero_spec(), 500, 3).unwrap();
        for c in &report.coefficients {
            assert_eq!(c.max_abs, 0.0);
            assert_eq!(c.max_slope, 0.0);
        }
        assert!(report.violations.is_empty());
    }

    #[test]
    fn audit_detects_understated_lipschitz() {
        let mut spec = catalog::appendix_e();
        spec.constants.lip_r = 0.5;
        let err = validate_spec(&spec, 2_000, 5).unwrap_err();
        let Error::BoundViolation { report } = err else { panic!("expected violation") };
        let worst = report
            .violations
            .iter()
            .filter(|v| v.coefficient == "r" && v.kind == ViolationKind::Lipschitz)
            .max_by(|a, b| a.observed.total_cmp(&b.observed))
            .unwrap();
        assert!(worst.observed > 0.5 * AUDIT_TOLERANCE);
        // slope of -(s-0.5)^2 exceeds 0.5 only within 0.25 of either edge
        let s = worst.first[1];
        assert!(!(0.25..=0.75).contains(&s), "s = {s}");
    }

    #[test]
    fn audit_rejects_nan() {
        let mut c = ClosureCoefficients::zero();
        c.reward = Arc::new(|_, s: &[f64], _| if s[0] > 0.5 { f64::NAN } else { 0.0 });
        let spec = MdpSpec::builder("nan", Mode::ContinuousSde)
            .states(vec![0.0], vec![1.0])
            .box_actions(vec![0.0], vec![1.0])
            .rate(1.0)
            .hold(0.1)
            .coefficients(c)
            .build()
            .unwrap();
        assert!(matches!(validate_spec(&spec, 100, 0), Err(Error::NonFiniteCoefficient { .. })));
    }

    #[test]
    fn appendix_transition_clamps() {
        let spec = catalog::appendix_e();
        let ActionSpace::Finite(acts) = &spec.actions else { panic!() };
        let mut out = [0.0];
        spec.transition(&[0.0], &acts[0].coords, &mut out);
        assert_eq!(out[0], 0.0);
        spec.transition(&[1.0], &acts[1].coords, &mut out);
        assert_eq!(out[0], 1.0);
        spec.transition(&[0.5], &acts[1].coords, &mut out);
        assert!((out[0] - 0.6).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn beta_in_unit_interval(lambda in 1e-3f64..50.0, delta in 1e-3f64..5.0) {
                let spec = MdpSpec::builder("p", Mode::ContinuousSde)
                    .states(vec![0.0], vec![1.0])
                    .box_actions(vec![0.0], vec![1.0])
                    .rate(lambda)
                    .hold(delta)
                    .coefficients(ClosureCoefficients::zero())
                    .build()
                    .unwrap();
                let b = spec.discount_factor();
                prop_assert!(b > 0.0 && b < 1.0);
            }

            #[test]
            fn audit_maxima_monotone_in_probes(seed in 0u64..1000, n in 2usize..200) {
                let spec = catalog::appendix_e();
                let small = audit_report(&spec, n, seed).unwrap();
                let large = audit_report(&spec, n + 50, seed).unwrap();
                for (a, b) in small.coefficients.iter().zip(&large.coefficients) {
                    prop_assert!(b.max_abs >= a.max_abs);
                    prop_assert!(b.max_slope >= a.max_slope);
                }
            }
        }
    }
}
