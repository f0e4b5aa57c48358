//! Operator blocks `F̃_θ = D_M ∘ N_θ ∘ E_M` and their file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Dense, Mlp};
use crate::bellman;
use crate::grid::{GridDomain, GridFunction};
use crate::mdp::MdpSpec;
use crate::trajectory::SimConfig;
use crate::{Error, Result, ARTIFACT_VERSION};

pub const BLOCK_FORMAT: &str = "operator-block/1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    /// Largest nodal error over the training functions.
    pub train_eps_op: f64,
    /// Largest nodal error over the held-out functions.
    pub test_eps_op: f64,
    pub lfstar: f64,
    pub lfstar_ceiling: f64,
    pub l_phi: f64,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub target_eps_op: Option<f64>,
    pub target_met: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorBlock {
    pub grid_checksum: String,
    pub net: Mlp,
    pub seed: u64,
    pub metrics: BlockMetrics,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BlockFile {
    format: String,
    artifact_version: String,
    grid_checksum: String,
    hidden: Activation,
    output_bound: Option<f64>,
    input_scale: f64,
    sizes: Vec<usize>,
    layers: Vec<LayerFile>,
    seed: u64,
    metrics: BlockMetrics,
}

impl OperatorBlock {
    pub fn new(domain: &GridDomain, net: Mlp, seed: u64) -> Result<Self> {
        if net.input_dim() != domain.len() || net.output_dim() != domain.len() {
            return Err(Error::ShapeMismatch(format!(
                "network maps {} → {}, grid has {} nodes",
                net.input_dim(),
                net.output_dim(),
                domain.len()
            )));
        }
        Ok(Self { grid_checksum: domain.checksum(), net, seed, metrics: BlockMetrics::default() })
    }

    /// `B_y` (infinite when the output is unbounded).
    pub fn output_bound(&self) -> f64 {
        self.net.output_bound.unwrap_or(f64::INFINITY)
    }

    pub fn node_count(&self) -> usize {
        self.net.input_dim()
    }

    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(v)
    }

    /// `decode(forward(encode(Q)))`.
    pub fn apply(&self, q: &GridFunction) -> Result<GridFunction> {
        let actual = q.domain().checksum();
        if actual != self.grid_checksum {
            return Err(Error::GridMismatch { expected: self.grid_checksum.clone(), actual });
        }
        GridFunction::decode(q.domain().clone(), self.forward(q.values())?)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BlockFile {
            format: BLOCK_FORMAT.into(),
            artifact_version: ARTIFACT_VERSION.into(),
            grid_checksum: self.grid_checksum.clone(),
            hidden: self.net.hidden,
            output_bound: self.net.output_bound,
            input_scale: self.net.input_scale,
            sizes: self.net.sizes(),
            layers: self
                .net
                .layers
                .iter()
                .map(|l| LayerFile { rows: l.w.nrows(), cols: l.w.ncols(), w: l.w.iter().copied().collect(), b: l.b.to_vec() })
                .collect(),
            seed: self.seed,
            metrics: self.metrics.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: BlockFile = serde_json::from_str(text)?;
        if f.format != BLOCK_FORMAT {
            return Err(Error::Format(format!("unsupported block format `{}`", f.format)));
        }
        let layers = f
            .layers
            .into_iter()
            .map(|l| {
                if l.b.len() != l.rows {
                    return Err(Error::Format("bias length does not match layer rows".into()));
                }
                let w = ndarray::Array2::from_shape_vec((l.rows, l.cols), l.w)
                    .map_err(|e| Error::Format(format!("layer weights: {e}")))?;
                Ok(Dense { w, b: ndarray::Array1::from(l.b) })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp { layers, hidden: f.hidden, output_bound: f.output_bound, input_scale: f.input_scale };
        if net.sizes() != f.sizes {
            return Err(Error::Format("layer sizes do not match the declared shape".into()));
        }
        Ok(Self { grid_checksum: f.grid_checksum, net, seed: f.seed, metrics: f.metrics })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `F̃_θ(Q)` for a block on `Q`'s grid.
pub fn apply_block(block: &OperatorBlock, q: &GridFunction) -> Result<GridFunction> {
    block.apply(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfStar {
    pub measured: f64,
    /// `M · B_y · L_φ`.
    pub ceiling: f64,
    /// Hat-basis Lipschitz constant `1 / h_min`.
    pub l_phi: f64,
    pub within_ceiling: bool,
}

/// Largest Lipschitz estimate of `F̃_θ(Q)` over `funcs`, against the
/// architectural ceiling.
pub fn measure_lfstar(block: &OperatorBlock, funcs: &[GridFunction], n_pairs: usize, seed: u64) -> Result<LfStar> {
    let dom = funcs
        .first()
        .map(|q| q.domain().clone())
        .ok_or_else(|| Error::InvalidConfig("need at least one function".into()))?;
    let l_phi = 1.0 / dom.min_mesh();
    let ceiling = dom.len() as f64 * block.output_bound() * l_phi;
    let mut measured: f64 = 0.0;
    for q in funcs {
        measured = measured.max(block.apply(q)?.lipschitz(n_pairs, seed));
    }
    Ok(LfStar { measured, ceiling, l_phi, within_ceiling: measured <= ceiling })
}

/// Nodal operator error `‖F̃_θ(Q) - 𝓙Q‖` for each function.
pub fn operator_errors(block: &OperatorBlock, spec: &MdpSpec, funcs: &[GridFunction], cfg: &SimConfig) -> Result<Vec<f64>> {
    funcs
        .iter()
        .map(|q| block.apply(q)?.node_distance(&bellman::residual_apply(spec, q, cfg)?))
        .collect()
}

/// Split of the off-grid operator error into network and interpolation parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    /// `max_j |N_θ(E Q)_j - (𝓙Q)(p_j)|`: the network error on the grid.
    pub network: f64,
    /// `sup_x |D(E 𝓙Q)(x) - (𝓙Q)(x)|`: interpolation error of the true residual.
    pub interpolation: f64,
    /// `sup_x |F̃_θ(Q)(x) - (𝓙Q)(x)|`.
    pub total: f64,
}

/// Measures the three quantities on nodes plus `n_dense` probes, with the
/// true residual evaluated pointwise off the grid.
pub fn error_decomposition(
    block: &OperatorBlock,
    spec: &MdpSpec,
    q: &GridFunction,
    cfg: &SimConfig,
    n_dense: usize,
) -> Result<ErrorDecomposition> {
    let out = block.apply(q)?;
    let target = bellman::residual_apply(spec, q, cfg)?;
    let network = out.node_distance(&target)?;
    let dom = q.domain();
    let mut interpolation: f64 = 0.0;
    let mut total: f64 = 0.0;
    for i in 0..n_dense {
        let p = dom.halton_point(i);
        let truth = bellman::pointwise_bellman(spec, q, &p, cfg)? - q.eval(&p);
        interpolation = interpolation.max((target.eval(&p) - truth).abs());
        total = total.max((out.eval(&p) - truth).abs());
    }
    Ok(ErrorDecomposition { network, interpolation, total: total.max(network) })
}
