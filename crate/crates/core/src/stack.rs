//! Residual stacks `Q̂^{(l+1)} = Q̂^{(l)} + F̃_l(Q̂^{(l)})`, the layer-count and
//! per-layer budgets, and the end-to-end check of the approximation bound.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bellman::{self, IterationTrace, TRACE_LIP_PAIRS};
use crate::grid::{GridDomain, GridFunction, DEFAULT_DENSE};
use crate::mdp::MdpSpec;
use crate::net::block::{measure_lfstar, BlockMetrics, LfStar, OperatorBlock};
use crate::net::family::{FamilyParams, FunctionFamily};
use crate::net::train::{train_block, TrainingConfig};
use crate::trajectory::SimConfig;
use crate::{rng, Error, Result};

/// Slack for comparing measured errors with closed-form bounds.
pub const TOL_MEASURE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackPlan {
    pub epsilon: f64,
    pub layers: usize,
    pub epsilon_1: f64,
    pub beta: f64,
    pub m_q: f64,
    /// `M̂ = M_Q + ε/2`.
    pub m_hat: f64,
}

impl StackPlan {
    /// `ε₁ (1 - β^l) / (1 - β)`.
    pub fn envelope(&self, l: usize) -> f64 {
        self.epsilon_1 * (1.0 - self.beta.powi(l as i32)) / (1.0 - self.beta)
    }
}

/// `L = ⌈ln(2M_Q/ε) / rate⌉ + 1` (or 1 when `ε ≥ 2M_Q`), `ε₁ = ε(1-β)/2`,
/// with `rate = λδ` or `ln(1/γ)`.
pub fn plan_stack(spec: &MdpSpec, epsilon: f64) -> Result<StackPlan> {
    plan_with_bound(spec, epsilon, spec.uniform_q_bound())
}

pub fn plan_with_bound(spec: &MdpSpec, epsilon: f64, m_q: f64) -> Result<StackPlan> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!("stack.epsilon must be > 0, got {epsilon}")));
    }
    let beta = spec.discount_factor();
    let layers = if epsilon >= 2.0 * m_q {
        1
    } else {
        ((2.0 * m_q / epsilon).ln() / spec.log_contraction()).ceil() as usize + 1
    };
    Ok(StackPlan { epsilon, layers, epsilon_1: epsilon * (1.0 - beta) / 2.0, beta, m_q, m_hat: m_q + epsilon / 2.0 })
}

/// What each layer applies.
#[derive(Clone, Debug)]
pub enum LayerBlock {
    Trained(Arc<OperatorBlock>),
    /// The exact residual: `Q̂^{(l+1)} = 𝓑Q̂^{(l)}`.
    Oracle,
    /// Exact residual plus a constant field: `Q̂^{(l+1)} = 𝓑Q̂^{(l)} + c`.
    InjectedError(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub l: usize,
    /// `‖Q̂^{(l)} - Q^{(l)}‖`.
    pub e_l: f64,
    /// `‖F̃_l(Q̂^{(l)}) - 𝓙Q̂^{(l)}‖`; absent for the output layer.
    pub delta_norm: Option<f64>,
    pub envelope: f64,
    pub sup_norm: f64,
    pub lipschitz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackTrace {
    pub layers: Vec<LayerRecord>,
    pub iterates: Vec<GridFunction>,
    /// `‖Q̂^{(L)} - Q*‖`.
    pub final_error: f64,
}

impl StackTrace {
    pub fn max_delta(&self) -> f64 {
        self.layers.iter().filter_map(|r| r.delta_norm).fold(0.0, f64::max)
    }

    /// CSV `l,e_l,delta_norm,envelope,sup_norm,lipschitz`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["l", "e_l", "delta_norm", "envelope", "sup_norm", "lipschitz"])?;
        for r in &self.layers {
            out.write_record([
                r.l.to_string(),
                format!("{:?}", r.e_l),
                r.delta_norm.map(|d| format!("{d:?}")).unwrap_or_default(),
                format!("{:?}", r.envelope),
                format!("{:?}", r.sup_norm),
                format!("{:?}", r.lipschitz),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Layers where `e_{l+1} > β e_l + ‖δ_l‖ + tol`.
    pub fn recurrence_violations(&self, beta: f64, tol: f64) -> Vec<usize> {
        self.layers
            .windows(2)
            .filter(|w| w[1].e_l > beta * w[0].e_l + w[0].delta_norm.unwrap_or(0.0) + tol)
            .map(|w| w[0].l)
            .collect()
    }

    /// Layers where `e_l > max_j‖δ_j‖ (1-β^l)/(1-β) + tol`.
    pub fn envelope_violations(&self, beta: f64, tol: f64) -> Vec<usize> {
        let d = self.max_delta();
        self.layers
            .iter()
            .filter(|r| r.e_l > d * (1.0 - beta.powi(r.l as i32)) / (1.0 - beta) + tol)
            .map(|r| r.l)
            .collect()
    }
}

/// Runs `plan.layers` residual updates from the reference trace's `Q^{(0)}`.
/// A single block is shared by every layer.
pub fn run_stack(
    spec: &MdpSpec,
    plan: &StackPlan,
    blocks: &[LayerBlock],
    reference: &IterationTrace,
    q_star: &GridFunction,
    cfg: &SimConfig,
) -> Result<StackTrace> {
    let depth = plan.layers;
    if reference.iterates.len() < depth + 1 {
        return Err(Error::ReferenceTooShort { available: reference.iterates.len(), required: depth + 1 });
    }
    if blocks.is_empty() {
        return Err(Error::BlockMissing { layer: 0 });
    }
    if blocks.len() != 1 && blocks.len() < depth {
        return Err(Error::BlockMissing { layer: blocks.len() });
    }
    let q0 = reference.iterates[0].clone();
    if !q0.same_domain(q_star) {
        return Err(Error::DomainMismatch);
    }
    let mut iterates = vec![q0];
    let mut layers = Vec::with_capacity(depth + 1);
    let lip_seed = rng::derive_seed(cfg.seed, 0x57AC);
    for l in 0..=depth {
        let q = iterates.last().expect("non-empty");
        let e_l = q.node_distance(&reference.iterates[l])?;
        let mut delta_norm = None;
        if l < depth {
            let block = if blocks.len() == 1 { &blocks[0] } else { &blocks[l] };
            let (next, delta) = match block {
                LayerBlock::Oracle => (bellman::bellman_apply(spec, q, cfg)?, 0.0),
                LayerBlock::InjectedError(c) => {
                    let bq = bellman::bellman_apply(spec, q, cfg)?;
                    let target = bq.sub(q)?;
                    let f = target.map(|v| v + c)?;
                    let delta = f.node_distance(&target)?;
                    (bq.map(|v| v + c)?, delta)
                }
                LayerBlock::Trained(b) => {
                    let f = b.apply(q)?;
                    let target = bellman::residual_apply(spec, q, cfg)?;
                    let delta = f.node_distance(&target)?;
                    (q.add(&f)?, delta)
                }
            };
            delta_norm = Some(delta);
            layers.push(record(l, e_l, delta_norm, plan, q, lip_seed));
            iterates.push(next);
        } else {
            layers.push(record(l, e_l, delta_norm, plan, q, lip_seed));
        }
    }
    let final_error = iterates.last().expect("non-empty").node_distance(q_star)?;
    Ok(StackTrace { layers, iterates, final_error })
}

fn record(l: usize, e_l: f64, delta_norm: Option<f64>, plan: &StackPlan, q: &GridFunction, seed: u64) -> LayerRecord {
    LayerRecord {
        l,
        e_l,
        delta_norm,
        envelope: plan.envelope(l),
        sup_norm: q.sup_norm(),
        lipschitz: q.lipschitz(TRACE_LIP_PAIRS, rng::derive_seed(seed, l as u64)),
    }
}

/// Source of the uniform bound `M_Q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QBound {
    /// Closed form from the declared reward and terminal bounds.
    Declared,
    /// Largest sup norm along the converged reference trace.
    #[default]
    Measured,
}

/// How the theorem pipeline obtains its blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// One trained block reused by every layer.
    Shared,
    /// One trained block per layer.
    PerLayer,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremConfig {
    pub sim: SimConfig,
    pub training: TrainingConfig,
    pub family: FamilyParams,
    pub mode: BlockMode,
    pub q_bound: QBound,
    /// Train blocks only to `degrade · ε₁` (negative control).
    pub degrade: Option<f64>,
    /// Iteration cap and tolerance for the `Q*` reference.
    pub reference_k_max: usize,
    pub reference_tol: f64,
    pub n_dense: usize,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            training: TrainingConfig::default(),
            family: FamilyParams::default(),
            mode: BlockMode::Shared,
            q_bound: QBound::default(),
            degrade: None,
            reference_k_max: 5000,
            reference_tol: 1e-13,
            n_dense: DEFAULT_DENSE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoremStatus {
    Pass,
    Fail,
    InfeasibleAsConfigured,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionFloor {
    /// `sup_x |(𝓑Q*_M)(x) - Q*_M(x)|` over nodes and dense probes, with `𝓑`
    /// evaluated off the grid.
    pub residual_sup: f64,
    /// `residual_sup / (1-β)`: bound on the distance from the grid fixed
    /// point to the fixed point of the pointwise operator.
    pub reference_error_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub pass: bool,
    pub measured: f64,
    pub limit: f64,
}

impl Check {
    fn at_most(measured: f64, limit: f64) -> Self {
        Self { pass: measured <= limit, measured, limit }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremChecks {
    /// (i) `max_l ‖δ_l‖ ≤ ε₁` on the realized iterates.
    pub per_layer_delta: Check,
    /// (ii) `e_l ≤ ε₁(1-β^l)/(1-β)` for every layer; `measured` is the worst
    /// excess `e_l - envelope_l` (non-positive when passing).
    pub envelope: Check,
    /// (iii) `‖Q̂^{(L)} - Q*‖ < ε`.
    pub final_error: Check,
    /// (iv) every `Q̂^{(l)}` has sup norm `≤ M̂` ...
    pub caps_sup: Check,
    /// ... and Lipschitz estimate `≤ L̂` (the family cap).
    pub caps_lipschitz: Check,
}

impl TheoremChecks {
    pub fn all_pass(&self) -> bool {
        self.per_layer_delta.pass
            && self.envelope.pass
            && self.final_error.pass
            && self.caps_sup.pass
            && self.caps_lipschitz.pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityPropagation {
    pub k_a: f64,
    pub k_b: f64,
    pub lfstar: f64,
    /// `A' = 2K_A + L_F*`, `B' = 2K_B + 1`.
    pub a_prime: f64,
    pub b_prime: f64,
    /// `A'((B')^{L-1} - 1)/(B' - 1)`.
    pub l_hat_theory: f64,
    /// Layers whose Lipschitz estimate exceeds the recurrence envelope seeded at 0.
    pub violations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub status: TheoremStatus,
    pub problem: String,
    pub plan: StackPlan,
    pub mode: BlockMode,
    pub resolution_floor: ResolutionFloor,
    pub reference_converged: bool,
    pub reference_fixed_point_residual: f64,
    pub m_hat: f64,
    pub l_hat: f64,
    pub checks: Option<TheoremChecks>,
    pub recurrence_violations: Vec<usize>,
    pub envelope_violations: Vec<usize>,
    pub final_error: Option<f64>,
    pub regularity: Option<RegularityPropagation>,
    pub lfstar: Option<LfStar>,
    pub blocks: Vec<BlockMetrics>,
}

/// Everything produced by [`verify_theorem`].
#[derive(Clone, Debug)]
pub struct TheoremRun {
    pub report: TheoremReport,
    pub trace: Option<StackTrace>,
    pub reference: IterationTrace,
    pub q_star: GridFunction,
    pub blocks: Vec<Arc<OperatorBlock>>,
}

/// Value iteration from zero, returned even when it did not converge.
pub fn value_iteration_trace(
    spec: &MdpSpec,
    domain: &Arc<GridDomain>,
    k_max: usize,
    tol: f64,
    cfg: &SimConfig,
) -> Result<(IterationTrace, bool)> {
    match bellman::value_iterate(spec, &GridFunction::zeros(domain.clone()), k_max, tol, cfg) {
        Ok(tr) => Ok((tr, true)),
        Err(Error::NotConverged { trace }) => Ok((*trace, false)),
        Err(e) => Err(e),
    }
}

/// Grid fixed point of `𝓑` by value iteration from zero.
pub fn reference_fixed_point(
    spec: &MdpSpec,
    domain: &Arc<GridDomain>,
    k_max: usize,
    tol: f64,
    cfg: &SimConfig,
) -> Result<(GridFunction, bool)> {
    value_iteration_trace(spec, domain, k_max, tol, cfg).map(|(tr, ok)| (tr.last().clone(), ok))
}

/// Uniform bound on every iterate from zero and on `Q*`, read off a value
/// iteration trace ending at `Q_K`: the largest sup norm seen, or
/// `‖Q_K‖ (1+β^K)/(1-β^K)` for the iterates past the trace, whichever is
/// larger (from `‖Q^{(k)} - Q*‖ ≤ β^k ‖Q*‖`).
pub fn measured_q_bound(trace: &IterationTrace, beta: f64) -> f64 {
    let seen = trace.iterates.iter().map(GridFunction::sup_norm).fold(0.0, f64::max);
    let last = trace.last().sup_norm();
    if last == 0.0 {
        return seen;
    }
    let b = beta.powi((trace.iterates.len() - 1) as i32);
    seen.max(last * (1.0 + b) / (1.0 - b))
}

/// Residual of `Q*` under the pointwise operator, over nodes and probes.
pub fn resolution_floor(spec: &MdpSpec, q_star: &GridFunction, cfg: &SimConfig, n_dense: usize) -> Result<ResolutionFloor> {
    let dom = q_star.domain();
    let mut sup: f64 = 0.0;
    let points = (0..dom.len()).map(|j| dom.node(j)).chain((0..n_dense).map(|i| dom.halton_point(i)));
    for p in points {
        let r = bellman::pointwise_bellman(spec, q_star, &p, cfg)? - q_star.eval(&p);
        sup = sup.max(r.abs());
    }
    Ok(ResolutionFloor { residual_sup: sup, reference_error_bound: sup / (1.0 - spec.discount_factor()) })
}

/// Plan, reference iterates, `Q*`, resolution floor and the training family
/// shared by the theorem pipeline and standalone block training.
#[derive(Clone, Debug)]
pub struct TheoremSetup {
    pub plan: StackPlan,
    /// `Q^{(0)} = 0, ..., Q^{(L)}`.
    pub reference: IterationTrace,
    pub q_star: GridFunction,
    pub reference_converged: bool,
    pub fixed_point_residual: f64,
    pub floor: ResolutionFloor,
    /// Caps `M̂ = M_Q + ε/2` and `L̂ = 2 max_l Lip(Q^{(l)}, Q*) + 1`, with the
    /// reference iterates and `Q*` as curriculum.
    pub family: FunctionFamily,
}

impl TheoremSetup {
    pub fn prepare(spec: &MdpSpec, domain: Arc<GridDomain>, epsilon: f64, cfg: &TheoremConfig) -> Result<Self> {
        let sim = &cfg.sim;
        let (vi, converged) =
            value_iteration_trace(spec, &domain, cfg.reference_k_max, cfg.reference_tol, sim)?;
        let q_star = vi.last().clone();
        let m_q = match cfg.q_bound {
            QBound::Declared => spec.uniform_q_bound(),
            QBound::Measured => measured_q_bound(&vi, spec.discount_factor()),
        };
        let plan = plan_with_bound(spec, epsilon, m_q)?;
        let fixed_point_residual = bellman::residual_apply(spec, &q_star, sim)?.sup_norm();
        let floor = resolution_floor(spec, &q_star, sim, cfg.n_dense)?;
        let reference = bellman::iterate_fixed(spec, &GridFunction::zeros(domain.clone()), plan.layers, sim)?;
        let mut curriculum = reference.iterates.clone();
        curriculum.push(q_star.clone());
        let max_lip = curriculum.iter().map(GridFunction::lipschitz_upper).fold(0.0, f64::max);
        let params = FamilyParams { amplitude_cap: plan.m_hat, lipschitz_cap: 2.0 * max_lip + 1.0, ..cfg.family.clone() };
        let family = FunctionFamily::new(domain, params)?.with_curriculum(curriculum);
        Ok(Self { plan, reference, q_star, reference_converged: converged, fixed_point_residual, floor, family })
    }

    /// Training configuration aimed at `ε₁` (or `degrade · ε₁`).
    pub fn training_config(&self, cfg: &TheoremConfig) -> TrainingConfig {
        let mut tc = cfg.training.clone();
        tc.target_eps_op = Some(self.plan.epsilon_1 * cfg.degrade.unwrap_or(1.0));
        if cfg.degrade.is_some() {
            tc.stop_fraction = 1.0;
        }
        tc
    }

    /// One block for [`BlockMode::Shared`], `L` blocks with derived seeds for
    /// [`BlockMode::PerLayer`], none for [`BlockMode::Oracle`].
    pub fn train_blocks(&self, spec: &MdpSpec, cfg: &TheoremConfig) -> Result<Vec<Arc<OperatorBlock>>> {
        let count = match cfg.mode {
            BlockMode::Oracle => 0,
            BlockMode::Shared => 1,
            BlockMode::PerLayer => self.plan.layers,
        };
        let base = self.training_config(cfg);
        (0..count)
            .map(|l| {
                let mut tc = base.clone();
                if count > 1 {
                    tc.seed = rng::derive_seed(base.seed, l as u64);
                }
                Ok(Arc::new(train_block(spec, &self.family, &cfg.sim, &tc)?.0))
            })
            .collect()
    }
}

/// Plan → reference iterates and `Q*` → blocks → stack → checks (i)-(iv).
///
/// `epsilon` is infeasible as configured when the grid's own distance to the
/// continuum fixed point, bounded by [`ResolutionFloor`], is not below it; the
/// report then carries no checks. Failed bounds are report content, not errors.
pub fn verify_theorem(
    spec: &MdpSpec,
    domain: Arc<GridDomain>,
    epsilon: f64,
    cfg: &TheoremConfig,
) -> Result<TheoremRun> {
    let setup = TheoremSetup::prepare(spec, domain, epsilon, cfg)?;
    let trained = if setup.floor.reference_error_bound >= epsilon {
        vec![]
    } else {
        setup.train_blocks(spec, cfg)?
    };
    verify_with_blocks(spec, setup, trained, cfg)
}

/// [`verify_theorem`] with already trained blocks (empty for oracle mode).
pub fn verify_with_blocks(
    spec: &MdpSpec,
    setup: TheoremSetup,
    trained: Vec<Arc<OperatorBlock>>,
    cfg: &TheoremConfig,
) -> Result<TheoremRun> {
    let TheoremSetup { plan, reference, q_star, reference_converged, fixed_point_residual, floor, family } = setup;
    let sim = &cfg.sim;
    let epsilon = plan.epsilon;
    let (m_hat, l_hat) = (family.params.amplitude_cap, family.params.lipschitz_cap);
    let mut report = TheoremReport {
        status: TheoremStatus::InfeasibleAsConfigured,
        problem: spec.name.clone(),
        plan,
        mode: cfg.mode,
        resolution_floor: floor,
        reference_converged,
        reference_fixed_point_residual: fixed_point_residual,
        m_hat,
        l_hat,
        checks: None,
        recurrence_violations: vec![],
        envelope_violations: vec![],
        final_error: None,
        regularity: None,
        lfstar: None,
        blocks: vec![],
    };
    if floor.reference_error_bound >= epsilon {
        log::warn!(
            "ε = {epsilon} is below the grid resolution floor {:.3e}; nothing to verify",
            floor.reference_error_bound
        );
        return Ok(TheoremRun { report, trace: None, reference, q_star, blocks: vec![] });
    }
    let layer_blocks: Vec<LayerBlock> = match cfg.mode {
        BlockMode::Oracle => vec![LayerBlock::Oracle],
        _ if trained.is_empty() => return Err(Error::BlockMissing { layer: 0 }),
        _ => trained.iter().cloned().map(LayerBlock::Trained).collect(),
    };

    let trace = run_stack(spec, &plan, &layer_blocks, &reference, &q_star, sim)?;
    let beta = plan.beta;
    let worst_excess = trace.layers.iter().map(|r| r.e_l - r.envelope).fold(f64::NEG_INFINITY, f64::max);
    let max_sup = trace.layers.iter().map(|r| r.sup_norm).fold(0.0, f64::max);
    let max_lip = trace.iterates.iter().map(|q| q.lipschitz_upper()).fold(0.0, f64::max);
    let checks = TheoremChecks {
        per_layer_delta: Check::at_most(trace.max_delta(), plan.epsilon_1),
        envelope: Check { pass: worst_excess <= TOL_MEASURE, measured: worst_excess, limit: TOL_MEASURE },
        final_error: Check { pass: trace.final_error < epsilon, measured: trace.final_error, limit: epsilon },
        caps_sup: Check::at_most(max_sup, m_hat),
        caps_lipschitz: Check::at_most(max_lip, l_hat),
    };

    if !trained.is_empty() {
        let probe_funcs = family.sample(16, rng::derive_seed(cfg.training.seed, 40), false)?;
        let lf = measure_lfstar(&trained[0], &probe_funcs, 64, 7)?;
        let fit = bellman::estimate_regularity_constants(spec, &probe_funcs, sim, 8)?;
        let lfstar = trained.iter().map(|b| b.metrics.lfstar).fold(lf.measured, f64::max);
        report.regularity = Some(regularity_propagation(fit.k_a, fit.k_b, lfstar, plan.layers, &trace));
        report.lfstar = Some(lf);
        report.blocks = trained.iter().map(|b| b.metrics.clone()).collect();
    }
    report.recurrence_violations = trace.recurrence_violations(beta, TOL_MEASURE);
    report.envelope_violations = trace.envelope_violations(beta, TOL_MEASURE);
    report.final_error = Some(trace.final_error);
    report.status = if checks.all_pass() { TheoremStatus::Pass } else { TheoremStatus::Fail };
    report.checks = Some(checks);
    Ok(TheoremRun { report, trace: Some(trace), reference, q_star, blocks: trained })
}

/// `L̂_{l+1} ≤ A' + B' L̂_l` from `L̂_0 = 0`, checked against the measured estimates.
pub fn regularity_propagation(k_a: f64, k_b: f64, lfstar: f64, layers: usize, trace: &StackTrace) -> RegularityPropagation {
    let a = 2.0 * k_a + lfstar;
    let b = 2.0 * k_b + 1.0;
    let envelope = |l: usize| if l == 0 { 0.0 } else { a * (b.powi(l as i32) - 1.0) / (b - 1.0) };
    let violations = trace
        .layers
        .iter()
        .filter(|r| r.lipschitz > envelope(r.l) + TOL_MEASURE)
        .map(|r| r.l)
        .collect();
    RegularityPropagation {
        k_a,
        k_b,
        lfstar,
        a_prime: a,
        b_prime: b,
        l_hat_theory: envelope(layers.saturating_sub(1)),
        violations,
    }
}
