//! Experiment configuration files (TOML).
//!
//! Every section rejects unknown keys, so a typo fails loudly with the key
//! named in the message.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bellnet_core::grid::{GridDomain, GridShape};
use bellnet_core::mdp::MdpSpec;
use bellnet_core::net::{FamilyParams, TrainingConfig};
use bellnet_core::stack::{BlockMode, QBound, TheoremConfig};
use bellnet_core::trajectory::SimConfig;
use bellnet_core::{catalog, rng};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub sim: SimSection,
    pub iteration: IterationSection,
    pub regularity: RegularitySection,
    pub training: TrainingConfig,
    pub family: FamilySection,
    pub stack: StackSection,
    pub contraction: ContractionSection,
    pub audit: AuditSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    /// Catalog id, see `bellnet_core::catalog::PROBLEMS`.
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self { name: "appendix_e".into(), params: BTreeMap::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub time_nodes: usize,
    pub state_nodes: Vec<usize>,
    pub action_nodes: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub substeps: usize,
    pub n_samples: usize,
    pub antithetic: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self { substeps: d.substeps_per_delta, n_samples: d.n_samples, antithetic: d.antithetic }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterationSection {
    /// Number of iterations (exactly this many without `tol`).
    pub k_max: usize,
    /// Stop once `‖Q_{k+1} - Q_k‖ ≤ tol`; failing to do so is an error.
    pub tol: Option<f64>,
    /// Write every iterate as a grid-function file.
    pub store_iterates: bool,
    /// Tolerance and cap for the separate fixed-point reference run.
    pub reference_tol: f64,
    pub reference_k_max: usize,
}

impl Default for IterationSection {
    fn default() -> Self {
        Self { k_max: 30, tol: None, store_iterates: true, reference_tol: 1e-13, reference_k_max: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularitySection {
    pub k_a: f64,
    pub k_b: f64,
    pub l0: f64,
    /// Relative slack on both caps.
    pub tolerance: f64,
    /// Overrides the spec's stage count in `M_Q` and `L_unif`.
    pub n_max: Option<usize>,
}

impl Default for RegularitySection {
    fn default() -> Self {
        Self { k_a: 1.0, k_b: 0.9, l0: 0.0, tolerance: 0.0, n_max: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilySection {
    pub bumps: usize,
    /// Caps used when no theorem setup supplies them.
    pub amplitude_cap: Option<f64>,
    pub lipschitz_cap: Option<f64>,
    pub curriculum_fraction: f64,
    pub perturbation: f64,
    pub rejection_budget: usize,
}

impl Default for FamilySection {
    fn default() -> Self {
        let d = FamilyParams::default();
        Self {
            bumps: d.bumps,
            amplitude_cap: None,
            lipschitz_cap: None,
            curriculum_fraction: d.curriculum_fraction,
            perturbation: d.perturbation,
            rejection_budget: d.rejection_budget,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackSection {
    pub epsilon: f64,
    pub mode: BlockMode,
    pub q_bound: QBound,
    pub degrade: Option<f64>,
    pub n_dense: usize,
}

impl Default for StackSection {
    fn default() -> Self {
        let d = TheoremConfig::default();
        Self { epsilon: 0.1, mode: d.mode, q_bound: d.q_bound, degrade: None, n_dense: d.n_dense }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionSection {
    pub pairs: usize,
    /// Relative slack on `β`.
    pub tolerance: f64,
}

impl Default for ContractionSection {
    fn default() -> Self {
        Self { pairs: 50, tolerance: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    pub n_probe: usize,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self { n_probe: 10_000 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// SHA-256 of the canonical JSON form (recorded in every sidecar).
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&body))
    }

    pub fn spec(&self) -> Result<MdpSpec> {
        catalog::build(&self.problem.name, &self.problem.params)
            .with_context(|| format!("problem `{}`", self.problem.name))
    }

    pub fn domain(&self, spec: &MdpSpec) -> Result<Arc<GridDomain>> {
        let shape = GridShape {
            time_nodes: self.grid.time_nodes,
            state_nodes: self.grid.state_nodes.clone(),
            action_nodes: self.grid.action_nodes.clone(),
        };
        Ok(Arc::new(GridDomain::for_spec(spec, &shape).context("grid section")?))
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let sim = SimConfig {
            substeps_per_delta: self.sim.substeps,
            n_samples: self.sim.n_samples,
            seed: self.seed,
            antithetic: self.sim.antithetic,
        };
        sim.validate()?;
        Ok(sim)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig { seed: rng::derive_seed(self.seed, 0x7EA1), ..self.training.clone() }
    }

    pub fn family_params(&self, amplitude_cap: f64, lipschitz_cap: f64) -> FamilyParams {
        let f = &self.family;
        FamilyParams {
            bumps: f.bumps,
            amplitude_cap: f.amplitude_cap.unwrap_or(amplitude_cap),
            lipschitz_cap: f.lipschitz_cap.unwrap_or(lipschitz_cap),
            curriculum_fraction: f.curriculum_fraction,
            perturbation: f.perturbation,
            rejection_budget: f.rejection_budget,
        }
    }

    pub fn theorem(&self) -> Result<TheoremConfig> {
        Ok(TheoremConfig {
            sim: self.sim()?,
            training: self.training(),
            family: self.family_params(1.0, 1.0),
            mode: self.stack.mode,
            q_bound: self.stack.q_bound,
            degrade: self.stack.degrade,
            reference_k_max: self.iteration.reference_k_max,
            reference_tol: self.iteration.reference_tol,
            n_dense: self.stack.n_dense,
        })
    }
}
