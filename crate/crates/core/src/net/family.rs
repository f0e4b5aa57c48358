//! Random test and training functions inside `K_target`, the set of grid
//! functions with `‖Q‖ ≤ M̂` and `Lip(Q) ≤ L̂`.
//!
//! Two generators are mixed:
//!
//! - **bumps**: `Σ_b c_b exp(-‖x - μ_b‖² / 2w_b²)` over the continuous axes
//!   (per-slice coefficients for finite actions), rescaled to a sup norm of
//!   `u·M̂` with `u ~ U(0,1)`, then shrunk if needed so the certified
//!   Lipschitz bound is at most `L̂`;
//! - **curriculum**: a reference iterate plus a bump perturbation of sup norm
//!   `u·ρ`, kept only if it satisfies both caps (rejection sampled).
//!
//! Draw `i` uses stream `i` of the family seed, so samples are reproducible
//! and independent of the requested count.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{GridDomain, GridFunction};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    /// Bump terms per generated function.
    pub bumps: usize,
    /// Sup-norm cap `M̂`.
    pub amplitude_cap: f64,
    /// Lipschitz cap `L̂`.
    pub lipschitz_cap: f64,
    /// Probability of a curriculum draw when reference iterates are present.
    pub curriculum_fraction: f64,
    /// Perturbation size `ρ` for curriculum draws.
    pub perturbation: f64,
    /// Redraws allowed per curriculum sample before giving up.
    pub rejection_budget: usize,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            bumps: 4,
            amplitude_cap: 1.0,
            lipschitz_cap: 10.0,
            curriculum_fraction: 0.75,
            perturbation: 0.1,
            rejection_budget: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FunctionFamily {
    pub domain: Arc<GridDomain>,
    pub params: FamilyParams,
    /// Reference iterates for the curriculum component.
    pub curriculum: Vec<GridFunction>,
}

impl FunctionFamily {
    pub fn new(domain: Arc<GridDomain>, params: FamilyParams) -> Result<Self> {
        let p = &params;
        if !(p.amplitude_cap >= 0.0 && p.lipschitz_cap >= 0.0 && p.perturbation >= 0.0) {
            return Err(Error::InvalidConfig("family caps must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&p.curriculum_fraction) {
            return Err(Error::InvalidConfig("curriculum_fraction must lie in [0, 1]".into()));
        }
        Ok(Self { domain, params, curriculum: vec![] })
    }

    pub fn with_curriculum(mut self, iterates: Vec<GridFunction>) -> Self {
        self.curriculum = iterates;
        self
    }

    /// `true` if `q` satisfies both caps (with a relative slack for rounding).
    pub fn contains(&self, q: &GridFunction) -> bool {
        q.sup_norm() <= self.params.amplitude_cap * (1.0 + 1e-12)
            && q.lipschitz_upper() <= self.params.lipschitz_cap * (1.0 + 1e-12)
    }

    /// Unit-sup-norm random bump combination (zero if the draw degenerates).
    fn raw_bumps(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dom = &self.domain;
        let axes = dom.axes();
        let terms: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..self.params.bumps.max(1))
            .map(|_| {
                let centre: Vec<f64> = axes.iter().map(|a| a.lo() + (a.hi() - a.lo()) * rng.random::<f64>()).collect();
                let width: Vec<f64> =
                    axes.iter().map(|a| (a.hi() - a.lo()) * (0.15 + 0.45 * rng.random::<f64>())).collect();
                let coef: Vec<f64> = (0..dom.n_slices()).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                (centre, width, coef)
            })
            .collect();
        let mut v: Vec<f64> = dom
            .nodes()
            .map(|p| {
                terms
                    .iter()
                    .map(|(c, w, k)| {
                        let e: f64 = p.coords.iter().zip(c).zip(w).map(|((x, c), w)| ((x - c) / w).powi(2)).sum();
                        k[p.slice] * (-0.5 * e).exp()
                    })
                    .sum()
            })
            .collect();
        let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if m > 0.0 {
            v.iter_mut().for_each(|x| *x /= m);
        }
        v
    }

    fn bump_function(&self, rng: &mut ChaCha8Rng, amplitude: f64) -> Result<GridFunction> {
        let amp = amplitude * rng.random::<f64>();
        let raw = self.raw_bumps(rng);
        let mut q = GridFunction::decode(self.domain.clone(), raw.iter().map(|x| x * amp).collect())?;
        let lip = q.lipschitz_upper();
        let cap = self.params.lipschitz_cap;
        if lip > cap {
            let c = cap / lip * (1.0 - 1e-9);
            q = q.map(|x| x * c)?;
        }
        Ok(q)
    }

    fn curriculum_draw(&self, rng: &mut ChaCha8Rng) -> Result<GridFunction> {
        for _ in 0..self.params.rejection_budget.max(1) {
            let base = &self.curriculum[rng.random_range(0..self.curriculum.len())];
            let noise = self.bump_function(rng, self.params.perturbation)?;
            let q = base.add(&noise)?;
            if self.contains(&q) {
                return Ok(q);
            }
        }
        Err(Error::RejectionBudgetExceeded { budget: self.params.rejection_budget })
    }

    fn draw(&self, seed: u64, i: usize) -> Result<GridFunction> {
        let mut rng = rng::stream(seed, i as u64);
        let use_curriculum =
            !self.curriculum.is_empty() && rng.random::<f64>() < self.params.curriculum_fraction;
        if use_curriculum {
            self.curriculum_draw(&mut rng)
        } else {
            self.bump_function(&mut rng, self.params.amplitude_cap)
        }
    }

    /// `count` functions: the reference iterates first when `include_exact`
    /// is set (those outside the caps are skipped), then random draws.
    pub fn sample(&self, count: usize, seed: u64, include_exact: bool) -> Result<Vec<GridFunction>> {
        let mut out: Vec<GridFunction> = Vec::with_capacity(count);
        if include_exact {
            out.extend(self.curriculum.iter().filter(|q| self.contains(q)).take(count).cloned());
        }
        let mut i = 0;
        while out.len() < count {
            out.push(self.draw(seed, i)?);
            i += 1;
        }
        Ok(out)
    }

    /// Bump functions only (no curriculum).
    pub fn sample_bumps(&self, count: usize, seed: u64) -> Result<Vec<GridFunction>> {
        (0..count)
            .map(|i| self.bump_function(&mut rng::stream(seed, i as u64), self.params.amplitude_cap))
            .collect()
    }
}
