//! Builtin problems, addressable by name from configuration files.
//!
//! | id               | mode     | description                                              |
//! |------------------|----------|----------------------------------------------------------|
//! | `appendix_e`     | discrete | move-left/move-right on `[0,1]`, `r = -(s-0.5)^2`, `g = 0` |
//! | `zero`           | discrete | zero rewards, identity transition                        |
//! | `zero_sde`       | SDE      | zero drift, diffusion and rewards                        |
//! | `ou_1d`          | SDE      | `ds = κ(a-s)dt + σ dW` on `[-2,2]`, quadratic rewards      |
//! | `constant_drift` | SDE      | `ds = c dt + σ dW` on `[0,1]`, constant running reward     |
//!
//! Every problem accepts the parameters listed in [`parameters`] plus
//! overrides of the declared constants (`lip_h`, `bound_r`, ...). Unknown
//! keys are rejected by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::mdp::{ClosureCoefficients, DeclaredConstants, FiniteAction, MdpSpec, Mode};
use crate::{Error, Result};

pub const PROBLEMS: [&str; 5] = ["appendix_e", "zero", "zero_sde", "ou_1d", "constant_drift"];

const CONSTANT_KEYS: [&str; 8] =
    ["lip_h", "lip_sigma", "lip_r", "lip_g", "bound_h", "bound_sigma", "bound_r", "bound_g"];

/// Parameters of a builtin problem with their defaults.
pub fn parameters(problem: &str) -> Result<&'static [(&'static str, f64)]> {
    Ok(match problem {
        "appendix_e" => &[("gamma", 0.9), ("step", 0.1), ("stages", 2.0)],
        "zero" => &[("gamma", 0.9), ("stages", 0.0)],
        "zero_sde" => &[("lambda", 1.0), ("delta", 0.1), ("horizon", 1.0)],
        "ou_1d" => &[("kappa", 1.0), ("sigma", 0.3), ("lambda", 1.0), ("delta", 0.1), ("horizon", 1.0)],
        "constant_drift" => &[
            ("drift", 0.5),
            ("sigma", 0.0),
            ("reward", 1.0),
            ("lambda", 1.0),
            ("delta", 0.1),
            ("horizon", 1.0),
        ],
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown problem `{other}` (known: {})",
                PROBLEMS.join(", ")
            )))
        }
    })
}

struct Params<'a> {
    defaults: &'static [(&'static str, f64)],
    given: &'a BTreeMap<String, f64>,
}

impl Params<'_> {
    fn get(&self, key: &str) -> f64 {
        self.given.get(key).copied().unwrap_or_else(|| {
            self.defaults.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).unwrap_or(0.0)
        })
    }

    fn stages(&self) -> Result<Option<usize>> {
        let n = self.get("stages");
        if n < 0.0 || n.fract() != 0.0 {
            return Err(Error::InvalidConfig(format!("`stages` must be a non-negative integer, got {n}")));
        }
        Ok(if n == 0.0 { None } else { Some(n as usize) })
    }
}

fn apply_overrides(c: &mut DeclaredConstants, given: &BTreeMap<String, f64>) {
    for (k, v) in given {
        let slot = match k.as_str() {
            "lip_h" => &mut c.lip_h,
            "lip_sigma" => &mut c.lip_sigma,
            "lip_r" => &mut c.lip_r,
            "lip_g" => &mut c.lip_g,
            "bound_h" => &mut c.bound_h,
            "bound_sigma" => &mut c.bound_sigma,
            "bound_r" => &mut c.bound_r,
            "bound_g" => &mut c.bound_g,
            _ => continue,
        };
        *slot = *v;
    }
}

/// Builds a named problem. `params` may hold any of the problem's parameters
/// and any declared-constant override.
pub fn build(problem: &str, params: &BTreeMap<String, f64>) -> Result<MdpSpec> {
    let defaults = parameters(problem)?;
    for key in params.keys() {
        if !defaults.iter().any(|(k, _)| k == key) && !CONSTANT_KEYS.contains(&key.as_str()) {
            return Err(Error::InvalidConfig(format!("unknown parameter `{key}` for problem `{problem}`")));
        }
    }
    if let Some((k, v)) = params.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("parameter `{k}` is not finite ({v})")));
    }
    let p = Params { defaults, given: params };
    let mut spec = match problem {
        "appendix_e" => appendix_e_with(p.get("gamma"), p.get("step"), p.stages()?)?,
        "zero" => zero_with(p.get("gamma"), p.stages()?)?,
        "zero_sde" => zero_sde_with(p.get("lambda"), p.get("delta"), p.get("horizon"))?,
        "ou_1d" => ou_1d_with(p.get("kappa"), p.get("sigma"), p.get("lambda"), p.get("delta"), p.get("horizon"))?,
        "constant_drift" => constant_drift(
            p.get("drift"),
            p.get("sigma"),
            p.get("reward"),
            p.get("lambda"),
            p.get("delta"),
            p.get("horizon"),
        )?,
        _ => unreachable!("checked by parameters()"),
    };
    apply_overrides(&mut spec.constants, params);
    Ok(spec)
}

fn left_right() -> Vec<FiniteAction> {
    vec![
        FiniteAction { name: "a_L".into(), coords: vec![-1.0] },
        FiniteAction { name: "a_R".into(), coords: vec![1.0] },
    ]
}

/// The two-action lattice walk on `[0,1]` with the default parameters
/// (`γ = 0.9`, step `0.1`, two stages).
pub fn appendix_e() -> MdpSpec {
    appendix_e_with(0.9, 0.1, Some(2)).expect("builtin parameters are valid")
}

pub fn appendix_e_with(gamma: f64, step: f64, stages: Option<usize>) -> Result<MdpSpec> {
    let coeffs = ClosureCoefficients {
        reward: Arc::new(|_, s: &[f64], _| -(s[0] - 0.5).powi(2)),
        transition: Some(Arc::new(move |s: &[f64], a: &[f64], out: &mut [f64]| {
            out[0] = (s[0] + step * a[0]).clamp(0.0, 1.0);
        })),
        ..ClosureCoefficients::zero()
    };
    MdpSpec::builder("appendix_e", Mode::DiscreteDeterministic)
        .states(vec![0.0], vec![1.0])
        .finite_actions(left_right())
        .factor(gamma)
        .stages(stages)
        .constants(DeclaredConstants { lip_r: 1.0, bound_r: 0.25, ..Default::default() })
        .coefficients(coeffs)
        .build()
}

pub fn zero() -> MdpSpec {
    zero_with(0.9, None).expect("builtin parameters are valid")
}

fn zero_with(gamma: f64, stages: Option<usize>) -> Result<MdpSpec> {
    MdpSpec::builder("zero", Mode::DiscreteDeterministic)
        .states(vec![0.0], vec![1.0])
        .finite_actions(left_right())
        .factor(gamma)
        .stages(stages)
        .coefficients(ClosureCoefficients::zero())
        .build()
}

pub fn zero_sde() -> MdpSpec {
    zero_sde_with(1.0, 0.1, 1.0).expect("builtin parameters are valid")
}

fn zero_sde_with(lambda: f64, delta: f64, horizon: f64) -> Result<MdpSpec> {
    MdpSpec::builder("zero_sde", Mode::ContinuousSde)
        .states(vec![0.0], vec![1.0])
        .box_actions(vec![-1.0], vec![1.0])
        .rate(lambda)
        .hold(delta)
        .horizon(horizon)
        .coefficients(ClosureCoefficients::zero())
        .build()
}

/// Mean-reverting 1D problem: `ds = κ(a - s)dt + σ dW`, `S = [-2,2]`,
/// `A = [-1,1]`, `r = -s² - 0.1a²`, `g = -0.5s²`. Defaults `κ = 1`,
/// `σ = 0.3`, `λ = 1`, `δ = 0.1`, `T = 1`.
pub fn ou_1d() -> MdpSpec {
    ou_1d_with(1.0, 0.3, 1.0, 0.1, 1.0).expect("builtin parameters are valid")
}

pub fn ou_1d_with(kappa: f64, sigma: f64, lambda: f64, delta: f64, horizon: f64) -> Result<MdpSpec> {
    let coeffs = ClosureCoefficients {
        drift: Arc::new(move |_, s: &[f64], a: &[f64], out: &mut [f64]| out[0] = kappa * (a[0] - s[0])),
        diffusion: Arc::new(move |_, _, _, out: &mut [f64]| out[0] = sigma),
        reward: Arc::new(|_, s: &[f64], a: &[f64]| -s[0] * s[0] - 0.1 * a[0] * a[0]),
        terminal: Arc::new(|s: &[f64]| -0.5 * s[0] * s[0]),
        transition: None,
    };
    // |∂r/∂s| ≤ 4 and |∂r/∂a| ≤ 0.2, so 4 covers the 1-sum metric.
    let constants = DeclaredConstants {
        lip_h: kappa.abs(),
        lip_sigma: 0.0,
        lip_r: 4.0,
        lip_g: 2.0,
        bound_h: 3.0 * kappa.abs(),
        bound_sigma: sigma.abs(),
        bound_r: 4.1,
        bound_g: 2.0,
    };
    MdpSpec::builder("ou_1d", Mode::ContinuousSde)
        .states(vec![-2.0], vec![2.0])
        .box_actions(vec![-1.0], vec![1.0])
        .rate(lambda)
        .hold(delta)
        .horizon(horizon)
        .constants(constants)
        .coefficients(coeffs)
        .build()
}

/// `ds = c dt + σ dW` on `[0,1]` with `r ≡ r0`, `g ≡ 0`, actions in `[-1,1]`
/// (ignored by the dynamics).
pub fn constant_drift(c: f64, sigma: f64, r0: f64, lambda: f64, delta: f64, horizon: f64) -> Result<MdpSpec> {
    let coeffs = ClosureCoefficients {
        drift: Arc::new(move |_, _, _, out: &mut [f64]| out[0] = c),
        diffusion: Arc::new(move |_, _, _, out: &mut [f64]| out[0] = sigma),
        reward: Arc::new(move |_, _, _| r0),
        ..ClosureCoefficients::zero()
    };
    let constants = DeclaredConstants {
        bound_h: c.abs(),
        bound_sigma: sigma.abs(),
        bound_r: r0.abs(),
        ..Default::default()
    };
    MdpSpec::builder("constant_drift", Mode::ContinuousSde)
        .states(vec![0.0], vec![1.0])
        .box_actions(vec![-1.0], vec![1.0])
        .rate(lambda)
        .hold(delta)
        .horizon(horizon)
        .constants(constants)
        .coefficients(coeffs)
        .build()
}
