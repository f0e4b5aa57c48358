//! The held-action Bellman operator on grid functions, value iteration, and
//! the contraction/regularity checks.
//!
//! `bellman_apply` evaluates `(𝓑Q)(p_j)` at every node and decodes the result
//! on the same grid, so the operator actually iterated is the grid-projected
//! one, `D_M ∘ E_M ∘ 𝓑`. It is still a `β`-contraction because the decoder is
//! nonexpansive. [`pointwise_bellman`] evaluates `𝓑Q` off the grid.
//!
//! In SDE mode every node uses the same noise (sample `j` reads stream `j`
//! of `cfg.seed`), so repeated applications define a fixed deterministic
//! operator and value iteration converges to its fixed point.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{GridFunction, GridPoint};
use crate::mdp::{MdpSpec, Mode};
use crate::net::family::FunctionFamily;
use crate::trajectory::{self, SimConfig};
use crate::{rng, Error, Result};

/// Random pairs added to the adjacent-node scan for trace Lipschitz estimates.
pub const TRACE_LIP_PAIRS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyStats {
    /// Largest per-node Monte-Carlo standard error (0 in discrete mode).
    pub max_stderr: f64,
    pub clipped_steps: usize,
    pub total_steps: usize,
}

/// `(𝓑Q)(t,s,a)` at one point of `K_Q` (not necessarily a node).
pub fn pointwise_bellman(spec: &MdpSpec, q: &GridFunction, p: &GridPoint, cfg: &SimConfig) -> Result<f64> {
    let dom = q.domain();
    let (t, s, a) = (dom.time_of(p), dom.state_of(p), dom.action_of(p));
    match spec.mode {
        Mode::DiscreteDeterministic => Ok(trajectory::discrete_backup(spec, q, s, a)),
        Mode::ContinuousSde => Ok(trajectory::mc_sequential(spec, q, t, s, a, cfg)?.mean),
    }
}

/// Nodewise `𝓑Q` with Monte-Carlo statistics.
pub fn bellman_apply_stats(spec: &MdpSpec, q: &GridFunction, cfg: &SimConfig) -> Result<(GridFunction, ApplyStats)> {
    if spec.mode == Mode::ContinuousSde {
        cfg.validate()?;
    }
    let dom = q.domain();
    let results: Vec<(f64, f64, usize, usize)> = (0..dom.len())
        .into_par_iter()
        .map(|j| {
            let p = dom.node(j);
            let (t, s, a) = (dom.time_of(&p), dom.state_of(&p), dom.action_of(&p));
            match spec.mode {
                Mode::DiscreteDeterministic => Ok((trajectory::discrete_backup(spec, q, s, a), 0.0, 0, 0)),
                Mode::ContinuousSde => {
                    let e = trajectory::mc_sequential(spec, q, t, s, a, cfg)?;
                    Ok((e.mean, e.stderr, e.clipped_steps, e.total_steps))
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut stats = ApplyStats::default();
    let mut values = Vec::with_capacity(results.len());
    for (v, se, c, n) in results {
        values.push(v);
        stats.max_stderr = stats.max_stderr.max(se);
        stats.clipped_steps += c;
        stats.total_steps += n;
    }
    Ok((GridFunction::decode(dom.clone(), values)?, stats))
}

pub fn bellman_apply(spec: &MdpSpec, q: &GridFunction, cfg: &SimConfig) -> Result<GridFunction> {
    Ok(bellman_apply_stats(spec, q, cfg)?.0)
}

/// `𝓙Q = 𝓑Q - Q`, nodewise.
pub fn residual_apply(spec: &MdpSpec, q: &GridFunction, cfg: &SimConfig) -> Result<GridFunction> {
    bellman_apply(spec, q, cfg)?.sub(q)
}

/// Value-iteration record. `step_distances[k] = ‖Q^{(k+1)} - Q^{(k)}‖`,
/// `ratios[k] = step_distances[k+1] / step_distances[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub iterates: Vec<GridFunction>,
    pub step_distances: Vec<f64>,
    pub sup_norms: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub max_stderr: f64,
}

impl IterationTrace {
    fn start(q0: GridFunction, seed: u64) -> Self {
        Self {
            sup_norms: vec![q0.sup_norm()],
            lipschitz: vec![q0.lipschitz(TRACE_LIP_PAIRS, seed)],
            iterates: vec![q0],
            step_distances: vec![],
            ratios: vec![],
            converged: false,
            max_stderr: 0.0,
        }
    }

    fn push(&mut self, q: GridFunction, seed: u64) -> Result<f64> {
        let d = q.node_distance(self.iterates.last().expect("trace starts non-empty"))?;
        if let Some(&prev) = self.step_distances.last() {
            self.ratios.push(if prev > 0.0 { d / prev } else { 0.0 });
        }
        self.step_distances.push(d);
        self.sup_norms.push(q.sup_norm());
        self.lipschitz.push(q.lipschitz(TRACE_LIP_PAIRS, rng::derive_seed(seed, self.iterates.len() as u64)));
        self.iterates.push(q);
        Ok(d)
    }

    pub fn last(&self) -> &GridFunction {
        self.iterates.last().expect("trace starts non-empty")
    }

    /// A-posteriori bound on `‖Q_last - Q*‖` for a `β`-contraction:
    /// `β/(1-β) · ‖Q_last - Q_prev‖`.
    pub fn fixed_point_error_bound(&self, beta: f64) -> f64 {
        self.step_distances.last().map_or(0.0, |d| beta / (1.0 - beta) * d)
    }

    /// CSV `k,sup_distance,sup_norm,lipschitz,ratio`; row `k` describes
    /// `Q^{(k)}`, with `sup_distance = ‖Q^{(k)} - Q^{(k-1)}‖` and
    /// `ratio = d_k / d_{k-1}` (blank where undefined).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "sup_distance", "sup_norm", "lipschitz", "ratio"])?;
        for k in 0..self.iterates.len() {
            let dist = if k > 0 { format!("{:?}", self.step_distances[k - 1]) } else { String::new() };
            let ratio = if k > 1 { format!("{:?}", self.ratios[k - 2]) } else { String::new() };
            out.write_record([
                k.to_string(),
                dist,
                format!("{:?}", self.sup_norms[k]),
                format!("{:?}", self.lipschitz[k]),
                ratio,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Exactly `k` applications of `𝓑` starting from `q0`.
pub fn iterate_fixed(spec: &MdpSpec, q0: &GridFunction, k: usize, cfg: &SimConfig) -> Result<IterationTrace> {
    let mut trace = IterationTrace::start(q0.clone(), cfg.seed);
    for _ in 0..k {
        let (next, stats) = bellman_apply_stats(spec, trace.last(), cfg)?;
        trace.max_stderr = trace.max_stderr.max(stats.max_stderr);
        trace.push(next, cfg.seed)?;
    }
    Ok(trace)
}

/// Iterates until `‖Q^{(k+1)} - Q^{(k)}‖ ≤ tol` or `k_max` steps.
///
/// On convergence the last iterate is within `tol·β/(1-β)` of the fixed point.
pub fn value_iterate(spec: &MdpSpec, q0: &GridFunction, k_max: usize, tol: f64, cfg: &SimConfig) -> Result<IterationTrace> {
    if k_max == 0 {
        return Err(Error::InvalidConfig("iteration.k_max must be ≥ 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig("iteration.tol must be > 0".into()));
    }
    let mut trace = IterationTrace::start(q0.clone(), cfg.seed);
    for _ in 0..k_max {
        let (next, stats) = bellman_apply_stats(spec, trace.last(), cfg)?;
        trace.max_stderr = trace.max_stderr.max(stats.max_stderr);
        if trace.push(next, cfg.seed)? <= tol {
            trace.converged = true;
            return Ok(trace);
        }
    }
    Err(Error::NotConverged { trace: Box::new(trace) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub beta: f64,
    pub tolerance: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub pass: bool,
}

/// `‖𝓑Q₁ - 𝓑Q₂‖ / ‖Q₁ - Q₂‖` for each pair; identical pairs give 0.
pub fn contraction_ratios(spec: &MdpSpec, pairs: &[(GridFunction, GridFunction)], cfg: &SimConfig) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(q1, q2)| {
            let den = q1.node_distance(q2)?;
            if den == 0.0 {
                return Ok(0.0);
            }
            let b1 = bellman_apply(spec, q1, cfg)?;
            let b2 = bellman_apply(spec, q2, cfg)?;
            Ok(b1.node_distance(&b2)? / den)
        })
        .collect()
}

/// Ratios over `n_pairs` random pairs from `family`; passes iff every ratio
/// is at most `β(1 + tol_mc)`.
pub fn verify_contraction(
    spec: &MdpSpec,
    family: &FunctionFamily,
    n_pairs: usize,
    cfg: &SimConfig,
    seed: u64,
    tol_mc: f64,
) -> Result<ContractionReport> {
    if n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be ≥ 1".into()));
    }
    let funcs = family.sample_bumps(2 * n_pairs, seed)?;
    let pairs: Vec<_> = funcs.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
    let ratios = contraction_ratios(spec, &pairs, cfg)?;
    let beta = spec.discount_factor();
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(ContractionReport { beta, tolerance: tol_mc, pass: max_ratio <= beta * (1.0 + tol_mc), max_ratio, ratios })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityBudget {
    pub k_a: f64,
    pub k_b: f64,
    pub l0: f64,
    pub n_max: usize,
    pub l_unif: f64,
}

impl RegularityBudget {
    /// `L_unif = K_A Σ_{j<N} K_B^j + K_B^N L0`, or `K_A N + L0` when `K_B = 1`.
    pub fn new(k_a: f64, k_b: f64, l0: f64, n_max: usize) -> Result<Self> {
        if !(k_a >= 0.0 && k_b >= 0.0 && l0 >= 0.0) {
            return Err(Error::InvalidConfig("K_A, K_B and L0 must be ≥ 0".into()));
        }
        let n = n_max as f64;
        let l_unif = if (k_b - 1.0).abs() < 1e-12 {
            k_a * n + l0
        } else {
            let kn = k_b.powi(n_max as i32);
            k_a * (1.0 - kn) / (1.0 - k_b) + kn * l0
        };
        Ok(Self { k_a, k_b, l0, n_max, l_unif })
    }

    /// Bound on the Lipschitz constant after `k` steps of `L ← K_A + K_B L`.
    pub fn after(&self, k: usize) -> f64 {
        Self::new(self.k_a, self.k_b, self.l0, k).expect("validated").l_unif
    }
}

/// Budget with `N_max` taken from the spec (`⌈T/δ⌉`, or the stage count).
pub fn regularity_budget(spec: &MdpSpec, k_a: f64, k_b: f64, l0: f64) -> Result<RegularityBudget> {
    let n = spec.n_max().ok_or_else(|| {
        Error::InvalidConfig(format!("`{}` has no finite stage count; give N_max explicitly", spec.name))
    })?;
    RegularityBudget::new(k_a, k_b, l0, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateRegularity {
    pub index: usize,
    pub sup_norm: f64,
    pub lipschitz: f64,
    pub bound_ok: bool,
    pub lipschitz_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub m_q: f64,
    pub l_unif: f64,
    pub tolerance: f64,
    pub iterates: Vec<IterateRegularity>,
    pub pass: bool,
}

impl RegularityReport {
    pub fn violations(&self) -> impl Iterator<Item = &IterateRegularity> {
        self.iterates.iter().filter(|c| !(c.bound_ok && c.lipschitz_ok))
    }

    /// First violation as an error.
    pub fn into_result(self) -> Result<Self> {
        if let Some(v) = self.violations().next() {
            let (what, measured, limit) = if !v.bound_ok {
                ("sup norm", v.sup_norm, self.m_q)
            } else {
                ("Lipschitz estimate", v.lipschitz, self.l_unif)
            };
            return Err(Error::RegularityViolation { index: v.index, what, measured, limit });
        }
        Ok(self)
    }
}

/// Checks every iterate against `‖Q‖ ≤ M_Q(1+tol)` and `Lip(Q) ≤ L_unif(1+tol)`.
pub fn verify_uniform_regularity(
    trace: &IterationTrace,
    budget: &RegularityBudget,
    m_q: f64,
    tol: f64,
) -> RegularityReport {
    let iterates: Vec<_> = (0..trace.iterates.len())
        .map(|k| IterateRegularity {
            index: k,
            sup_norm: trace.sup_norms[k],
            lipschitz: trace.lipschitz[k],
            bound_ok: trace.sup_norms[k] <= m_q * (1.0 + tol) + 1e-15,
            lipschitz_ok: trace.lipschitz[k] <= budget.l_unif * (1.0 + tol) + 1e-12,
        })
        .collect();
    let pass = iterates.iter().all(|c| c.bound_ok && c.lipschitz_ok);
    RegularityReport { m_q, l_unif: budget.l_unif, tolerance: tol, iterates, pass }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityFit {
    pub k_a: f64,
    pub k_b: f64,
    /// `(Lip(Q), Lip(𝓑Q))` per sampled function.
    pub samples: Vec<(f64, f64)>,
}

/// Empirical `K_A`, `K_B` from `Lip(𝓑Q) ≈ K_A + K_B Lip(Q)` over `funcs`:
/// least-squares slope (clamped at 0), intercept raised until every sample
/// lies on or below the line.
pub fn estimate_regularity_constants(
    spec: &MdpSpec,
    funcs: &[GridFunction],
    cfg: &SimConfig,
    seed: u64,
) -> Result<RegularityFit> {
    let mut samples = Vec::with_capacity(funcs.len());
    for (i, q) in funcs.iter().enumerate() {
        let s = rng::derive_seed(seed, i as u64);
        let bq = bellman_apply(spec, q, cfg)?;
        samples.push((q.lipschitz(TRACE_LIP_PAIRS, s), bq.lipschitz(TRACE_LIP_PAIRS, s)));
    }
    let n = samples.len() as f64;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("need at least one function".into()));
    }
    let mx = samples.iter().map(|p| p.0).sum::<f64>() / n;
    let my = samples.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = samples.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let k_b = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let k_a = samples.iter().map(|p| p.1 - k_b * p.0).fold(0.0, f64::max);
    Ok(RegularityFit { k_a, k_b, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::grid::{GridDomain, GridShape};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn appendix_grid() -> (MdpSpec, Arc<GridDomain>) {
        let spec = catalog::appendix_e();
        let shape = GridShape { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] };
        let d = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
        (spec, d)
    }

    #[test]
    fn first_iterate_is_reward() {
        let (spec, d) = appendix_grid();
        let q1 = bellman_apply(&spec, &GridFunction::zeros(d.clone()), &SimConfig::default()).unwrap();
        for (j, p) in d.nodes().enumerate() {
            assert_eq!(q1.values()[j], -(p.coords[0] - 0.5).powi(2));
        }
    }

    #[test]
    fn second_iterate_at_midpoint() {
        let (spec, d) = appendix_grid();
        let tr = iterate_fixed(&spec, &GridFunction::zeros(d), 2, &SimConfig::default()).unwrap();
        let q2 = &tr.iterates[2];
        assert_abs_diff_eq!(q2.values()[5], -0.009, epsilon = 1e-12);
        assert_abs_diff_eq!(q2.values()[11 + 5], -0.009, epsilon = 1e-12);
        // off-centre the two actions differ
        assert!((q2.values()[3] - q2.values()[11 + 3]).abs() > 0.01);
    }

    #[test]
    fn residual_of_zero_is_first_iterate() {
        let (spec, d) = appendix_grid();
        let z = GridFunction::zeros(d);
        let r = residual_apply(&spec, &z, &SimConfig::default()).unwrap();
        let b = bellman_apply(&spec, &z, &SimConfig::default()).unwrap();
        assert_eq!(r, b);
    }

    #[test]
    fn zero_problem_converges_immediately() {
        let spec = catalog::zero();
        let shape = GridShape { time_nodes: 0, state_nodes: vec![5], action_nodes: vec![] };
        let d = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
        let tr = value_iterate(&spec, &GridFunction::zeros(d), 10, 1e-12, &SimConfig::default()).unwrap();
        assert!(tr.converged);
        assert_eq!(tr.iterates.len(), 2);
        assert_eq!(tr.last().sup_norm(), 0.0);
    }

    #[test]
    fn not_converged_carries_trace() {
        let (spec, d) = appendix_grid();
        let err = value_iterate(&spec, &GridFunction::zeros(d), 3, 1e-12, &SimConfig::default()).unwrap_err();
        let Error::NotConverged { trace } = err else { panic!() };
        assert_eq!(trace.iterates.len(), 4);
        assert!(!trace.converged);
    }

    #[test]
    fn constant_shift_ratio_is_gamma() {
        let (spec, d) = appendix_grid();
        let q1 = GridFunction::encode(d.clone(), |p| (3.0 * p.coords[0]).sin() + p.slice as f64 * 0.1).unwrap();
        let q2 = q1.map(|v| v + 0.37).unwrap();
        let r = contraction_ratios(&spec, &[(q1.clone(), q2), (q1.clone(), q1)], &SimConfig::default()).unwrap();
        assert_abs_diff_eq!(r[0], 0.9, epsilon = 1e-12);
        assert_eq!(r[1], 0.0);
    }

    #[test]
    fn budget_examples() {
        assert_abs_diff_eq!(RegularityBudget::new(1.0, 0.5, 0.0, 3).unwrap().l_unif, 1.75, epsilon = 1e-15);
        assert_eq!(RegularityBudget::new(0.0, 0.7, 0.0, 5).unwrap().l_unif, 0.0);
        assert_eq!(RegularityBudget::new(2.0, 1.0, 1.0, 4).unwrap().l_unif, 9.0);
        assert!(RegularityBudget::new(-1.0, 1.0, 1.0, 4).is_err());
    }

    #[test]
    fn budget_from_spec() {
        let b = regularity_budget(&catalog::ou_1d(), 1.0, 1.0, 0.0).unwrap();
        assert_eq!(b.n_max, 10);
        let e = regularity_budget(&catalog::appendix_e(), 1.0, 0.9, 0.0).unwrap();
        assert_abs_diff_eq!(e.l_unif, 1.9, epsilon = 1e-15);
        assert!(regularity_budget(&catalog::zero(), 1.0, 0.9, 0.0).is_err());
    }

    #[test]
    fn scaled_iterate_is_flagged() {
        let (spec, d) = appendix_grid();
        let mut tr = iterate_fixed(&spec, &GridFunction::zeros(d), 2, &SimConfig::default()).unwrap();
        let budget = regularity_budget(&spec, 1.0, 0.9, 0.0).unwrap();
        let m_q = spec.uniform_q_bound();
        assert!(verify_uniform_regularity(&tr, &budget, m_q, 1e-9).pass);
        tr.sup_norms[1] *= 10.0 * m_q / 0.25;
        let rep = verify_uniform_regularity(&tr, &budget, m_q, 1e-9);
        assert!(!rep.pass);
        assert_eq!(rep.violations().next().unwrap().index, 1);
        assert!(matches!(rep.into_result(), Err(Error::RegularityViolation { index: 1, .. })));
    }

    #[test]
    fn trace_csv_layout() {
        let (spec, d) = appendix_grid();
        let tr = iterate_fixed(&spec, &GridFunction::zeros(d), 2, &SimConfig::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,sup_distance,sup_norm,lipschitz,ratio");
        assert!(lines[1].starts_with("0,,0.0,0.0,"));
        assert!(lines[2].starts_with("1,0.25,0.25,"));
        assert_eq!(lines.len(), 4);
    }
}
