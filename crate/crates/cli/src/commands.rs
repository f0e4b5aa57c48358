//! One function per subcommand. Each writes its artifacts and returns an
//! [`Outcome`]; scientific failures are outcomes, infrastructure problems are
//! errors.

use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;

use bellnet_core::bellman::{self, IterationTrace, RegularityBudget, RegularityReport};
use bellnet_core::grid::{GridDomain, GridFunction, GridShape};
use bellnet_core::mdp::{self, AuditReport};
use bellnet_core::net::block::{error_decomposition, operator_errors, BlockMetrics, ErrorDecomposition, LfStar};
use bellnet_core::net::train::{held_out_functions, Dataset, TrainingHistory};
use bellnet_core::net::{grad_check, measure_lfstar, train_block, FunctionFamily};
use bellnet_core::stack::{self, BlockMode, StackPlan, TheoremSetup, TheoremStatus};
use bellnet_core::{catalog, rng, Error};

use crate::config::ExperimentConfig;
use crate::output::Artifacts;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub pass: bool,
    /// `PASS`, `FAIL`, or `INFEASIBLE` (exits 0: nothing could be verified).
    pub label: &'static str,
    pub summary: String,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self { pass, label: if pass { "PASS" } else { "FAIL" }, summary: summary.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &'static str, measured: f64, limit: f64) -> Self {
        Self { name, measured, limit, pass: measured <= limit }
    }
}

fn write_trace(out: &mut Artifacts, name: &str, trace: &IterationTrace) -> Result<()> {
    out.file(name, |f| trace.write_csv(f))?;
    Ok(())
}

#[derive(Serialize)]
struct GeometricCheck {
    /// `max_k d_k / (β^k d_0)`; at most 1.001 to pass.
    worst_ratio: f64,
    pass: bool,
}

#[derive(Serialize)]
struct FixedPoint {
    converged: bool,
    iterations: usize,
    /// `‖𝓑Q* - Q*‖` at the nodes.
    residual: f64,
    sup_norm: f64,
}

#[derive(Serialize)]
struct ValueIterationSummary {
    problem: String,
    iterations: usize,
    converged: Option<bool>,
    final_step: Option<f64>,
    max_stderr: f64,
    geometric: GeometricCheck,
    fixed_point: FixedPoint,
    regularity: RegularityReport,
}

const GEOMETRIC_SLACK: f64 = 1.001;

/// `d_k ≤ β^k d_0 · 1.001` along a trace.
fn geometric_check(trace: &IterationTrace, beta: f64) -> GeometricCheck {
    let d = &trace.step_distances;
    let worst = match d.first() {
        Some(&d0) if d0 > 0.0 => {
            d.iter().enumerate().map(|(k, &dk)| dk / (beta.powi(k as i32) * d0)).fold(0.0, f64::max)
        }
        _ => 0.0,
    };
    GeometricCheck { worst_ratio: worst, pass: worst <= GEOMETRIC_SLACK }
}

pub fn value_iterate(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let domain = cfg.domain(&spec)?;
    let sim = cfg.sim()?;
    let it = &cfg.iteration;
    let q0 = GridFunction::zeros(domain.clone());
    let (trace, converged) = match it.tol {
        None => (bellman::iterate_fixed(&spec, &q0, it.k_max, &sim)?, None),
        Some(tol) => match bellman::value_iterate(&spec, &q0, it.k_max, tol, &sim) {
            Ok(tr) => (tr, Some(true)),
            Err(Error::NotConverged { trace }) => (*trace, Some(false)),
            Err(e) => return Err(e.into()),
        },
    };
    write_trace(out, "trace.csv", &trace)?;
    if it.store_iterates {
        for (k, q) in trace.iterates.iter().enumerate() {
            out.grid(&format!("iterates/q_{k:03}.csv"), q)?;
        }
    }

    let iterations = trace.iterates.len() - 1;
    // Caps are cumulative in the stage count, so a trace longer than the
    // declared horizon is checked at its own length.
    let n_max = cfg.regularity.n_max.unwrap_or_else(|| spec.n_max().unwrap_or(0).max(iterations));
    let r = &cfg.regularity;
    let budget = RegularityBudget::new(r.k_a, r.k_b, r.l0, n_max)?;
    let m_q = mdp::uniform_q_bound_with_stages(&spec, Some(n_max));
    let regularity = bellman::verify_uniform_regularity(&trace, &budget, m_q, r.tolerance);

    let (q_star, fp_converged) =
        stack::reference_fixed_point(&spec, &domain, it.reference_k_max, it.reference_tol, &sim)?;
    let residual = bellman::residual_apply(&spec, &q_star, &sim)?.sup_norm();
    let fp_iterations = if fp_converged { 0 } else { it.reference_k_max };
    let geometric = geometric_check(&trace, spec.discount_factor());

    let summary = ValueIterationSummary {
        problem: spec.name.clone(),
        iterations,
        converged,
        final_step: trace.step_distances.last().copied(),
        max_stderr: trace.max_stderr,
        fixed_point: FixedPoint {
            converged: fp_converged,
            iterations: fp_iterations,
            residual,
            sup_norm: q_star.sup_norm(),
        },
        geometric,
        regularity,
    };
    out.json("summary.json", &summary)?;
    out.grid("q_star.csv", &q_star)?;

    let pass = converged != Some(false) && summary.regularity.pass && summary.geometric.pass;
    let mut text = format!(
        "{iterations} iterations, final step {:.3e}, fixed-point residual {residual:.3e}",
        summary.final_step.unwrap_or(0.0)
    );
    if converged == Some(false) {
        text += &format!("; not converged within {} iterations", it.k_max);
    }
    if let Some(v) = summary.regularity.violations().next() {
        text += &format!("; iterate {} breaks the uniform caps", v.index);
    }
    if !summary.geometric.pass {
        text += &format!("; geometric decay violated (ratio {:.4})", summary.geometric.worst_ratio);
    }
    Ok(Outcome::new(pass, text))
}

#[derive(Serialize)]
struct AppendixReport {
    checks: Vec<Check>,
    /// States where `Q^{(2)}(s, a_L)` and `Q^{(2)}(s, a_R)` differ by more than rounding.
    q2_actions_differ_at: Vec<f64>,
    q2_at_half: [f64; 2],
    pass: bool,
}

const ACTION_TIE: f64 = 1e-12;

/// Closed forms: `Q¹ = r`, `Q² = r + γ max_{a'} Q¹(s'(s, a), a')`.
fn appendix_closed_forms(gamma: f64, step: f64) -> (impl Fn(f64) -> f64, impl Fn(f64, f64) -> f64) {
    let r = |s: f64| -(s - 0.5) * (s - 0.5);
    let q2 = move |s: f64, a: f64| {
        let next = (s + step * a).clamp(0.0, 1.0);
        r(s) + gamma * r(next)
    };
    (r, q2)
}

pub fn reproduce_appendix(out: &mut Artifacts) -> Result<Outcome> {
    let spec = catalog::appendix_e();
    let domain = Arc::new(GridDomain::for_spec(
        &spec,
        &GridShape { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] },
    )?);
    let sim = bellnet_core::trajectory::SimConfig::default();
    let trace = bellman::iterate_fixed(&spec, &GridFunction::zeros(domain.clone()), 2, &sim)?;
    let (r, q2_exact) = appendix_closed_forms(0.9, 0.1);
    let states = &domain.axes()[0].nodes;
    let actions: Vec<f64> = domain.finite_actions().expect("finite actions").iter().map(|a| a.coords[0]).collect();
    let slice_len = domain.slice_len();
    let value = |k: usize, slice: usize, i: usize| trace.iterates[k].values()[slice * slice_len + i];

    let mut q1_err: f64 = 0.0;
    let mut q2_err: f64 = 0.0;
    let mut q1_spread: f64 = 0.0;
    let mut differ = vec![];
    for (i, &s) in states.iter().enumerate() {
        for (slice, &a) in actions.iter().enumerate() {
            q1_err = q1_err.max((value(1, slice, i) - r(s)).abs());
            q2_err = q2_err.max((value(2, slice, i) - q2_exact(s, a)).abs());
        }
        q1_spread = q1_spread.max((value(1, 0, i) - value(1, 1, i)).abs());
        if (value(2, 0, i) - value(2, 1, i)).abs() > ACTION_TIE {
            differ.push(s);
        }
    }
    let half = states.iter().position(|&s| (s - 0.5).abs() < 1e-12).expect("0.5 is a node");
    let q2_half = [value(2, 0, half), value(2, 1, half)];

    let mut checks = vec![
        Check::at_most("q1_vs_closed_form", q1_err, 1e-12),
        Check::at_most("q2_vs_closed_form", q2_err, 1e-9),
        Check::at_most("q1_action_spread", q1_spread, 0.0),
        Check::at_most("q2_half_a_R_vs_-0.009", (q2_half[1] + 0.009).abs(), 1e-12),
    ];
    for k in 0..=2 {
        let q = &trace.iterates[k];
        checks.push(Check::at_most(["q0_sup_norm", "q1_sup_norm", "q2_sup_norm"][k], q.sup_norm(), 0.475));
        checks.push(Check::at_most(
            ["q0_lipschitz", "q1_lipschitz", "q2_lipschitz"][k],
            trace.lipschitz[k],
            1.9,
        ));
    }
    let pass = checks.iter().all(|c| c.pass);

    out.file("appendix_e_iterates.csv", |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["iterate", "s", "q_a_L", "q_a_R"])?;
        for k in 0..=2 {
            for (i, &s) in states.iter().enumerate() {
                w.write_record([
                    k.to_string(),
                    format!("{s:?}"),
                    format!("{:?}", value(k, 0, i)),
                    format!("{:?}", value(k, 1, i)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    let report = AppendixReport { checks, q2_actions_differ_at: differ, q2_at_half: q2_half, pass };
    out.json("appendix_e_report.json", &report)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    let text = if pass {
        format!("Q1 error {q1_err:.2e}, Q2 error {q2_err:.2e}")
    } else {
        format!("failed checks: {}", failed.join(", "))
    };
    Ok(Outcome::new(pass, text))
}

#[derive(Serialize)]
struct TrainingMetrics {
    plan: StackPlan,
    family: bellnet_core::net::FamilyParams,
    block: BlockMetrics,
    /// Max relative error of backpropagated against central-difference
    /// gradients (h = 1e-5) on a batch of training functions.
    grad_check: f64,
    held_out_errors: Vec<f64>,
    lfstar: LfStar,
    decomposition: Vec<ErrorDecomposition>,
}

fn theorem_setup(cfg: &ExperimentConfig) -> Result<(bellnet_core::mdp::MdpSpec, TheoremSetup)> {
    let spec = cfg.spec()?;
    let domain = cfg.domain(&spec)?;
    let mut setup = TheoremSetup::prepare(&spec, domain, cfg.stack.epsilon, &cfg.theorem()?)?;
    let p = &mut setup.family.params;
    p.amplitude_cap = cfg.family.amplitude_cap.unwrap_or(p.amplitude_cap);
    p.lipschitz_cap = cfg.family.lipschitz_cap.unwrap_or(p.lipschitz_cap);
    Ok((spec, setup))
}

const GRAD_CHECK_H: f64 = 1e-5;

pub fn train_operator(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Outcome> {
    let (spec, setup) = theorem_setup(cfg)?;
    let theorem = cfg.theorem()?;
    let sim = theorem.sim;
    let tc = setup.training_config(&theorem);
    let (block, history) = train_block(&spec, &setup.family, &sim, &tc)?;

    let probe = setup.family.sample(8, rng::derive_seed(tc.seed, 50), false)?;
    let batch = Dataset::build(&spec, &probe, &sim)?;
    let grad = grad_check(&block.net, batch.inputs.view(), batch.targets.view(), GRAD_CHECK_H, 200, tc.seed)?;
    let held_out = held_out_functions(&setup.family, &tc)?;
    let errors = operator_errors(&block, &spec, &held_out, &sim)?;
    let lfstar = measure_lfstar(&block, &held_out, 64, rng::derive_seed(tc.seed, 30))?;
    let decomposition = held_out
        .iter()
        .take(4)
        .map(|q| error_decomposition(&block, &spec, q, &sim, 1024))
        .collect::<bellnet_core::Result<Vec<_>>>()?;

    out.block("block.json", &block)?;
    write_history(out, &history)?;
    let metrics = TrainingMetrics {
        plan: setup.plan,
        family: setup.family.params.clone(),
        block: block.metrics.clone(),
        grad_check: grad,
        held_out_errors: errors,
        lfstar,
        decomposition,
    };
    out.json("metrics.json", &metrics)?;
    let m = &block.metrics;
    let status = match m.target_met {
        Some(true) => "target met",
        Some(false) => "target not met",
        None => "no target",
    };
    Ok(Outcome::new(
        true,
        format!(
            "held-out ε_op {:.3e} vs ε₁ {:.3e} ({status}), L_F* {:.3} ≤ {:.1}, grad check {grad:.1e}",
            m.test_eps_op, setup.plan.epsilon_1, m.lfstar, m.lfstar_ceiling
        ),
    ))
}

fn write_history(out: &mut Artifacts, history: &TrainingHistory) -> Result<()> {
    out.file("history.csv", |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["epoch", "loss", "train_max_error"])?;
        for (epoch, loss, err) in &history.checkpoints {
            w.write_record([epoch.to_string(), format!("{loss:?}"), format!("{err:?}")])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

pub fn verify_theorem(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Outcome> {
    let (spec, setup) = theorem_setup(cfg)?;
    let theorem = cfg.theorem()?;
    let blocks = if setup.floor.reference_error_bound >= cfg.stack.epsilon {
        vec![]
    } else {
        setup.train_blocks(&spec, &theorem)?
    };
    let run = stack::verify_with_blocks(&spec, setup, blocks, &theorem)?;
    out.json("theorem_report.json", &run.report)?;
    write_trace(out, "reference_trace.csv", &run.reference)?;
    out.grid("q_star.csv", &run.q_star)?;
    if let Some(trace) = &run.trace {
        out.file("stack_trace.csv", |f| trace.write_csv(f))?;
    }
    match run.blocks.len() {
        0 => {}
        1 => {
            out.block("block.json", &run.blocks[0])?;
        }
        _ => {
            for (l, b) in run.blocks.iter().enumerate() {
                out.block(&format!("blocks/block_{l:03}.json"), b)?;
            }
        }
    }
    let r = &run.report;
    let text = match r.status {
        TheoremStatus::InfeasibleAsConfigured => format!(
            "infeasible as configured: ε = {} is not above the resolution floor {:.3e}",
            r.plan.epsilon, r.resolution_floor.reference_error_bound
        ),
        _ => {
            let c = r.checks.as_ref().expect("checks present");
            let mut failed = vec![];
            for (ok, name) in [
                (c.per_layer_delta.pass, "per-layer δ"),
                (c.envelope.pass, "envelope"),
                (c.final_error.pass, "final error"),
                (c.caps_sup.pass && c.caps_lipschitz.pass, "caps"),
            ] {
                if !ok {
                    failed.push(name);
                }
            }
            let head = format!(
                "L = {}, max δ_l {:.3e} (ε₁ {:.3e}), final error {:.3e} (ε {})",
                r.plan.layers, c.per_layer_delta.measured, r.plan.epsilon_1, c.final_error.measured, r.plan.epsilon
            );
            if failed.is_empty() {
                head
            } else {
                format!("{head}; failed: {}", failed.join(", "))
            }
        }
    };
    let mut outcome = Outcome::new(r.status != TheoremStatus::Fail, text);
    if r.status == TheoremStatus::InfeasibleAsConfigured {
        outcome.label = "INFEASIBLE";
    }
    Ok(outcome)
}

pub fn verify_contraction(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let domain = cfg.domain(&spec)?;
    let sim = cfg.sim()?;
    let m_q = spec.uniform_q_bound();
    let params = cfg.family_params(if m_q > 0.0 { m_q } else { 1.0 }, 10.0);
    let family = FunctionFamily::new(domain, params)?;
    let seed = rng::derive_seed(cfg.seed, 0xC0);
    let report = bellman::verify_contraction(&spec, &family, cfg.contraction.pairs, &sim, seed, cfg.contraction.tolerance)
        .context("contraction check")?;
    out.file("contraction.csv", |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["pair", "ratio"])?;
        for (i, r) in report.ratios.iter().enumerate() {
            w.write_record([i.to_string(), format!("{r:?}")])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.json("contraction.json", &report)?;
    Ok(Outcome::new(
        report.pass,
        format!(
            "{} pairs, max ratio {:.6} vs β {:.6} (tolerance {:.1e})",
            report.ratios.len(),
            report.max_ratio,
            report.beta,
            report.tolerance
        ),
    ))
}

pub fn audit_spec(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let report: AuditReport = mdp::audit_report(&spec, cfg.audit.n_probe, cfg.seed)?;
    out.json("audit.json", &report)?;
    let pass = report.violations.is_empty();
    let text = match report.violations.first() {
        None => format!("{} probes, no violations", report.n_probe),
        Some(v) => format!(
            "{} violation(s); first: {} {:?} observed {:.4} > declared {:.4}",
            report.violations.len(),
            v.coefficient,
            v.kind,
            v.observed,
            v.declared
        ),
    };
    Ok(Outcome::new(pass, text))
}

/// Overrides the configured block mode from command-line flags.
pub fn apply_block_flags(cfg: &mut ExperimentConfig, oracle: bool, shared: bool) {
    if oracle {
        cfg.stack.mode = BlockMode::Oracle;
    } else if shared {
        cfg.stack.mode = BlockMode::Shared;
    }
}
