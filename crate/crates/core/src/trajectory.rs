//! Held-action dynamics and the one-step expectations built on them.
//!
//! Paths use Euler–Maruyama with `substeps_per_delta` steps over
//! `[t, τ_e]`, `τ_e = min(t + δ, T)`. Sample `j` draws its Brownian
//! increments from stream `j` of the generator keyed by `cfg.seed` (with
//! antithetic pairs sharing stream `j / 2` and flipping the sign), so any two
//! computations with the same configuration see the same noise.
//!
//! Two estimators of `(𝓑Q)(t,s,a)` are provided: the direct discounted sum
//! ([`mc_discounted_reward`]) and the backward Euler recursion of the
//! associated linear BSDE ([`bsde_evaluate`]). They differ by `O(Δu)` per path.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::GridFunction;
use crate::mdp::{MdpSpec, Mode};
use crate::rng;
use crate::{Error, Result};

/// `t + δ ≤ T` is decided with this slack so grid times hit the horizon exactly.
pub const TIME_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub substeps_per_delta: usize,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { substeps_per_delta: 16, n_samples: 1000, seed: 0, antithetic: false }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_delta == 0 {
            return Err(Error::InvalidConfig("sim.substeps must be ≥ 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("sim.n_samples must be ≥ 1".into()));
        }
        if self.antithetic && !self.n_samples.is_multiple_of(2) {
            return Err(Error::InvalidConfig("sim.n_samples must be even with antithetic sampling".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Substeps at which the state was projected back onto `S`.
    pub clipped_steps: usize,
    pub total_steps: usize,
}

impl McEstimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, stderr: 0.0, n_samples: 1, clipped_steps: 0, total_steps: 0 }
    }
}

/// One simulated path: `states[k]` is the state at `times[k]`, `k = 0..=substeps`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldPath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub clipped_steps: usize,
}

impl HeldPath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("path holds the initial state")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("path holds the initial time")
    }
}

/// `(τ_e, continues)`: end of the hold interval and whether `t + δ ≤ T`.
pub fn hold_end(spec: &MdpSpec, t: f64) -> (f64, bool) {
    if t + spec.hold <= spec.horizon + TIME_TOL {
        ((t + spec.hold).min(spec.horizon), true)
    } else {
        (spec.horizon, false)
    }
}

/// Runs the Euler–Maruyama recursion, calling `visit(k, u_k, s_k)` for
/// `k = 0..substeps` (left endpoints) and returning the final state.
fn integrate(
    spec: &MdpSpec,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
    sample_id: usize,
    mut visit: impl FnMut(usize, f64, &[f64]),
) -> Result<(Vec<f64>, usize)> {
    let n = spec.state_dim();
    let d = spec.noise_dim;
    let (tau, _) = hold_end(spec, t);
    let mut state = s.to_vec();
    if tau - t <= 0.0 {
        return Ok((state, 0));
    }
    let k_max = cfg.substeps_per_delta;
    let du = (tau - t) / k_max as f64;
    let sq = du.sqrt();
    let (stream_id, sign) = if cfg.antithetic {
        ((sample_id / 2) as u64, if sample_id.is_multiple_of(2) { 1.0 } else { -1.0 })
    } else {
        (sample_id as u64, 1.0)
    };
    let mut rng = rng::stream(cfg.seed, stream_id);
    let mut h = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    let mut dw = vec![0.0; d];
    let mut clipped = 0;
    for k in 0..k_max {
        let u = t + k as f64 * du;
        visit(k, u, &state);
        spec.drift(u, &state, a, &mut h);
        spec.diffusion(u, &state, a, &mut sigma);
        for w in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = sign * sq * z;
        }
        for i in 0..n {
            let noise: f64 = (0..d).map(|c| sigma[i * d + c] * dw[c]).sum();
            state[i] += h[i] * du + noise;
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState { substep: k });
        }
        if spec.states.clamp(&mut state) {
            clipped += 1;
        }
    }
    Ok((state, clipped))
}

fn require_sde(spec: &MdpSpec) -> Result<()> {
    if spec.mode != Mode::ContinuousSde {
        return Err(Error::InvalidSpec(format!("`{}` has no SDE dynamics", spec.name)));
    }
    Ok(())
}

/// Simulates one held-action path from `(t, s)` under action `a`.
pub fn simulate_held_action(
    spec: &MdpSpec,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
    sample_id: usize,
) -> Result<HeldPath> {
    require_sde(spec)?;
    cfg.validate()?;
    let mut times = vec![];
    let mut states = vec![];
    let (end, clipped) = integrate(spec, t, s, a, cfg, sample_id, |_, u, x| {
        times.push(u);
        states.push(x.to_vec());
    })?;
    let (tau, _) = hold_end(spec, t);
    times.push(tau);
    states.push(end);
    if clipped > 0 {
        log::debug!("sample {sample_id}: {clipped} substeps clipped to the state box");
    }
    Ok(HeldPath { times, states, clipped_steps: clipped })
}

struct PathValues {
    direct: f64,
    bsde: f64,
    clipped: usize,
}

/// Both estimators along one path (common random numbers by construction).
fn path_values(
    spec: &MdpSpec,
    q_next: &GridFunction,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
    sample_id: usize,
) -> Result<PathValues> {
    let lambda = spec.rate();
    let (tau, continues) = hold_end(spec, t);
    let k_max = cfg.substeps_per_delta;
    let du = (tau - t) / k_max as f64;
    let mut rewards = Vec::with_capacity(k_max);
    let mut direct = 0.0;
    let (end, clipped) = integrate(spec, t, s, a, cfg, sample_id, |_, u, x| {
        let r = spec.reward(u, x, a);
        rewards.push(r);
        direct += (-lambda * (u - t)).exp() * r * du;
    })?;
    let (terminal, discount) = if continues {
        (q_next.max_over_actions(tau, &end).0, (-lambda * spec.hold).exp())
    } else {
        (spec.terminal(&end), (-lambda * (spec.horizon - t)).exp())
    };
    direct += discount * terminal;
    let mut y = terminal;
    for r in rewards.iter().rev() {
        y += (r - lambda * y) * du;
    }
    Ok(PathValues { direct, bsde: y, clipped })
}

fn summarize(samples: &[f64], cfg: &SimConfig, clipped: usize) -> McEstimate {
    let n = samples.len();
    // antithetic pairs are averaged before computing the spread
    let units: Vec<f64> = if cfg.antithetic {
        samples.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    } else {
        samples.to_vec()
    };
    let m = units.len();
    let mean = rng::pairwise_sum(&units) / m as f64;
    let stderr = if m > 1 {
        let dev: Vec<f64> = units.iter().map(|x| (x - mean).powi(2)).collect();
        (rng::pairwise_sum(&dev) / (m - 1) as f64 / m as f64).sqrt()
    } else {
        0.0
    };
    McEstimate {
        mean,
        stderr,
        n_samples: n,
        clipped_steps: clipped,
        total_steps: n * cfg.substeps_per_delta,
    }
}

fn estimate_both(
    spec: &MdpSpec,
    q_next: &GridFunction,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
) -> Result<(McEstimate, McEstimate)> {
    cfg.validate()?;
    let vals: Vec<PathValues> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|j| path_values(spec, q_next, t, s, a, cfg, j))
        .collect::<Result<_>>()?;
    let clipped = vals.iter().map(|v| v.clipped).sum();
    let direct: Vec<f64> = vals.iter().map(|v| v.direct).collect();
    let bsde: Vec<f64> = vals.iter().map(|v| v.bsde).collect();
    Ok((summarize(&direct, cfg, clipped), summarize(&bsde, cfg, clipped)))
}

/// Sequential variant used inside node-parallel loops.
pub(crate) fn mc_sequential(
    spec: &MdpSpec,
    q_next: &GridFunction,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
) -> Result<McEstimate> {
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut clipped = 0;
    for j in 0..cfg.n_samples {
        let v = path_values(spec, q_next, t, s, a, cfg, j)?;
        clipped += v.clipped;
        samples.push(v.direct);
    }
    Ok(summarize(&samples, cfg, clipped))
}

/// Discrete-mode recursion `r(s,a) + γ max_{a'} Q(s'(s,a), a')`.
pub fn discrete_backup(spec: &MdpSpec, q_next: &GridFunction, s: &[f64], a: &[f64]) -> f64 {
    let mut next = vec![0.0; s.len()];
    spec.transition(s, a, &mut next);
    spec.reward(0.0, s, a) + spec.discount_factor() * q_next.max_over_actions(0.0, &next).0
}

/// Monte-Carlo estimate of `(𝓑Q_next)(t,s,a)`; exact in discrete mode.
pub fn mc_discounted_reward(
    spec: &MdpSpec,
    t: f64,
    s: &[f64],
    a: &[f64],
    q_next: &GridFunction,
    cfg: &SimConfig,
) -> Result<McEstimate> {
    match spec.mode {
        Mode::DiscreteDeterministic => Ok(McEstimate::exact(discrete_backup(spec, q_next, s, a))),
        Mode::ContinuousSde => Ok(estimate_both(spec, q_next, t, s, a, cfg)?.0),
    }
}

/// BSDE estimate of `(𝓑Q_c)(t,s,a)`: per path, `Y_K` is the terminal
/// condition and `Y_k = Y_{k+1} + [r(u_k, s_k, a) - λ Y_{k+1}] Δu`.
pub fn bsde_evaluate(
    spec: &MdpSpec,
    q_c: &GridFunction,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
) -> Result<McEstimate> {
    require_sde(spec)?;
    Ok(estimate_both(spec, q_c, t, s, a, cfg)?.1)
}

/// Both estimators on the same paths: `(direct, bsde)`.
pub fn cross_check(
    spec: &MdpSpec,
    q_c: &GridFunction,
    t: f64,
    s: &[f64],
    a: &[f64],
    cfg: &SimConfig,
) -> Result<(McEstimate, McEstimate)> {
    require_sde(spec)?;
    estimate_both(spec, q_c, t, s, a, cfg)
}

/// Backward Euler recursion on given rewards (left endpoints) and terminal value.
pub fn bsde_backward(rewards: &[f64], terminal: f64, lambda: f64, du: f64) -> f64 {
    rewards.iter().rev().fold(terminal, |y, r| y + (r - lambda * y) * du)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityPoint {
    pub perturbation: f64,
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub points: Vec<StabilityPoint>,
    /// Fitted `C_S`: largest observed ratio of mean terminal distance to input distance.
    pub constant: f64,
}

/// Empirical SDE stability: mean `‖s_{τ_e}(X) - s_{τ_e}(X')‖` under common
/// noise for inputs at `d_KQ` distance `η`, at random base points. Time is
/// held fixed so both paths share `τ_e`.
pub fn sde_stability(
    spec: &MdpSpec,
    cfg: &SimConfig,
    perturbations: &[f64],
    n_points: usize,
    seed: u64,
) -> Result<StabilityReport> {
    require_sde(spec)?;
    cfg.validate()?;
    let mut out = Vec::new();
    let mut constant: f64 = 0.0;
    for &eta in perturbations {
        let mut rng = rng::stream(seed, eta.to_bits());
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..n_points {
            let t = spec.horizon * rand::Rng::random::<f64>(&mut rng) * 0.9;
            let s = spec.states.sample(&mut rng);
            let a = match &spec.actions {
                crate::mdp::ActionSpace::Box(b) => b.sample(&mut rng),
                crate::mdp::ActionSpace::Finite(l) => l[0].coords.clone(),
            };
            // move η along the first state axis, away from the nearer edge
            let mut s2 = s.clone();
            let mid = 0.5 * (spec.states.lo[0] + spec.states.hi[0]);
            s2[0] += if s[0] < mid { eta } else { -eta };
            for j in 0..cfg.n_samples {
                let (e1, _) = integrate(spec, t, &s, &a, cfg, j, |_, _, _| {})?;
                let (e2, _) = integrate(spec, t, &s2, &a, cfg, j, |_, _, _| {})?;
                total += e1.iter().zip(&e2).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                count += 1;
            }
        }
        let mean = total / count as f64;
        constant = constant.max(mean / eta);
        out.push(StabilityPoint { perturbation: eta, mean_distance: mean });
    }
    Ok(StabilityReport { points: out, constant })
}
