//! Regression of operator blocks onto the residual operator `𝓙`.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::block::{measure_lfstar, BlockMetrics, OperatorBlock};
use super::family::FunctionFamily;
use super::mlp::{Activation, Gradient, Mlp};
use crate::bellman::residual_apply;
use crate::grid::GridFunction;
use crate::mdp::MdpSpec;
use crate::trajectory::SimConfig;
use crate::{rng, Error, Result};

/// Rows per gradient work item; partial gradients are summed in chunk order.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden_layers: usize,
    /// Hidden width as a multiple of the node count `M`.
    pub width_factor: usize,
    pub activation: Activation,
    /// `B_y`; `None` means `2(1+β)M̂`.
    pub output_bound: Option<f64>,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate decays geometrically to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Stop once the training-set max error is below `target * stop_fraction`.
    pub target_eps_op: Option<f64>,
    pub stop_fraction: f64,
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            width_factor: 4,
            activation: Activation::Relu,
            output_bound: None,
            train_count: 200_000,
            test_count: 64,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            final_lr_fraction: 0.01,
            optimizer: Optimizer::default(),
            seed: 0,
            target_eps_op: None,
            stop_fraction: 0.5,
            eval_every: 5,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.train_count == 0 || self.test_count == 0 {
            return bad("training.train_count and training.test_count must be ≥ 1");
        }
        if self.batch_size == 0 || self.width_factor == 0 || self.eval_every == 0 {
            return bad("training.batch_size, width_factor and eval_every must be ≥ 1");
        }
        if !(self.learning_rate > 0.0) || !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("training.learning_rate must be > 0 and final_lr_fraction in (0, 1]");
        }
        Ok(())
    }
}

/// Rows `encode(Q)` and `encode(𝓙Q)` for each function.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn build(spec: &MdpSpec, funcs: &[GridFunction], cfg: &SimConfig) -> Result<Self> {
        let m = funcs.first().map_or(0, |q| q.domain().len());
        let targets: Vec<GridFunction> = funcs
            .par_iter()
            .map(|q| residual_apply(spec, q, cfg))
            .collect::<Result<_>>()?;
        let inputs = Array2::from_shape_fn((funcs.len(), m), |(i, j)| funcs[i].values()[j]);
        let targets = Array2::from_shape_fn((funcs.len(), m), |(i, j)| targets[i].values()[j]);
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// `(epoch, mean loss, training max error)` at each evaluation.
    pub checkpoints: Vec<(usize, f64, f64)>,
}

/// `B_y = 2(1+β)M̂`.
pub fn default_output_bound(spec: &MdpSpec, amplitude_cap: f64) -> f64 {
    2.0 * (1.0 + spec.discount_factor()) * amplitude_cap
}

/// Mean-squared-error gradient over `rows`, reduced in a fixed order.
fn batch_gradient(net: &Mlp, data: &Dataset, rows: &[usize]) -> (f64, Gradient) {
    let m = data.inputs.ncols();
    let norm = (rows.len() * m) as f64;
    let parts: Vec<(f64, Gradient)> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let x = Array2::from_shape_fn((chunk.len(), m), |(i, j)| data.inputs[[chunk[i], j]]);
            let y = Array2::from_shape_fn((chunk.len(), m), |(i, j)| data.targets[[chunk[i], j]]);
            net.loss_and_grad(x.view(), y.view(), norm)
        })
        .collect();
    let mut total = Gradient::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    (loss, total)
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn step(net: &mut Mlp, grad: &Gradient, opt: &Optimizer, state: &mut OptState, lr: f64) {
    let g = grad.flat();
    let mut p = net.params();
    state.t += 1;
    match *opt {
        Optimizer::Sgd { momentum } => {
            for i in 0..p.len() {
                state.m[i] = momentum * state.m[i] + g[i];
                p[i] -= lr * state.m[i];
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            for i in 0..p.len() {
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
            }
        }
    }
    net.set_params(&p).expect("parameter count is fixed");
}

fn max_error(net: &Mlp, data: &Dataset) -> f64 {
    net.max_error(data.inputs.view(), data.targets.view())
}

/// Initial network for a block on `m` nodes.
pub fn initial_network(m: usize, amplitude_cap: f64, output_bound: f64, cfg: &TrainingConfig) -> Result<Mlp> {
    let mut sizes = vec![m];
    sizes.extend(std::iter::repeat_n(cfg.width_factor * m, cfg.hidden_layers));
    sizes.push(m);
    let input_scale = if amplitude_cap > 0.0 { 1.0 / amplitude_cap } else { 1.0 };
    Mlp::new(&sizes, cfg.activation, Some(output_bound), input_scale, rng::derive_seed(cfg.seed, 1))
}

/// Fits a network to `data` in place; returns the loss history.
pub fn fit(net: &mut Mlp, data: &Dataset, cfg: &TrainingConfig) -> Result<TrainingHistory> {
    cfg.validate()?;
    let n = data.len();
    let mut history = TrainingHistory::default();
    let mut state = OptState { m: vec![0.0; net.n_params()], v: vec![0.0; net.n_params()], t: 0 };
    let mut order: Vec<usize> = (0..n).collect();
    let decay = if cfg.epochs > 1 { cfg.final_lr_fraction.powf(1.0 / (cfg.epochs - 1) as f64) } else { 1.0 };
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, 2), epoch as u64));
        let mut epoch_loss = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_gradient(net, data, rows);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss * rows.len() as f64;
            step(net, &grad, &cfg.optimizer, &mut state, lr);
        }
        lr *= decay;
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || last {
            let err = max_error(net, data);
            if !err.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            history.checkpoints.push((epoch + 1, epoch_loss / n as f64, err));
            log::debug!("epoch {}: loss {:.3e}, max error {:.3e}", epoch + 1, epoch_loss / n as f64, err);
            if let Some(target) = cfg.target_eps_op {
                if err <= target * cfg.stop_fraction {
                    break;
                }
            }
        }
    }
    Ok(history)
}

/// Trains a block on `family` against `𝓙` of `spec` and records held-out metrics.
///
/// Training functions include the family's reference iterates; the
/// held-out set uses an independent seed and excludes them.
pub fn train_block(
    spec: &MdpSpec,
    family: &FunctionFamily,
    sim: &SimConfig,
    cfg: &TrainingConfig,
) -> Result<(OperatorBlock, TrainingHistory)> {
    cfg.validate()?;
    let train_funcs = family.sample(cfg.train_count, rng::derive_seed(cfg.seed, 10), true)?;
    let test_funcs = family.sample(cfg.test_count, rng::derive_seed(cfg.seed, 20), false)?;
    let train = Dataset::build(spec, &train_funcs, sim)?;
    let test = Dataset::build(spec, &test_funcs, sim)?;

    let dom = family.domain.clone();
    let cap = family.params.amplitude_cap;
    let b_y = cfg.output_bound.unwrap_or_else(|| default_output_bound(spec, cap));
    let mut net = initial_network(dom.len(), cap, b_y, cfg)?;
    let history = fit(&mut net, &train, cfg)?;

    let mut block = OperatorBlock::new(&dom, net, cfg.seed)?;
    let lf = measure_lfstar(&block, &test_funcs, 64, rng::derive_seed(cfg.seed, 30))?;
    let test_eps = max_error(&block.net, &test);
    block.metrics = BlockMetrics {
        train_eps_op: max_error(&block.net, &train),
        test_eps_op: test_eps,
        lfstar: lf.measured,
        lfstar_ceiling: lf.ceiling,
        l_phi: lf.l_phi,
        epochs_run: history.checkpoints.last().map_or(0, |c| c.0),
        final_loss: history.checkpoints.last().map_or(f64::NAN, |c| c.1),
        target_eps_op: cfg.target_eps_op,
        target_met: cfg.target_eps_op.map(|t| test_eps <= t),
    };
    Ok((block, history))
}

/// Held-out test set of a training configuration (same draws as [`train_block`]).
pub fn held_out_functions(family: &FunctionFamily, cfg: &TrainingConfig) -> Result<Vec<GridFunction>> {
    family.sample(cfg.test_count, rng::derive_seed(cfg.seed, 20), false)
}

/// Max nodal error of a network on explicit data.
pub fn network_error(net: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    net.max_error(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::grid::{GridDomain, GridShape};
    use crate::net::family::FamilyParams;
    use std::sync::Arc;

    fn small_family(spec: &MdpSpec) -> FunctionFamily {
        let d = Arc::new(GridDomain::for_spec(spec, &GridShape { time_nodes: 0, state_nodes: vec![5], action_nodes: vec![] }).unwrap());
        FunctionFamily::new(d, FamilyParams { amplitude_cap: 0.5, lipschitz_cap: 5.0, ..Default::default() }).unwrap()
    }

    fn quick(seed: u64, epochs: usize) -> TrainingConfig {
        TrainingConfig { train_count: 64, test_count: 16, epochs, width_factor: 2, batch_size: 16, seed, eval_every: 5, ..Default::default() }
    }

    #[test]
    fn training_is_deterministic() {
        let spec = catalog::appendix_e();
        let fam = small_family(&spec);
        let (a, _) = train_block(&spec, &fam, &SimConfig::default(), &quick(3, 10)).unwrap();
        let (b, _) = train_block(&spec, &fam, &SimConfig::default(), &quick(3, 10)).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let spec = catalog::appendix_e();
        let fam = small_family(&spec);
        let cfg = quick(4, 0);
        let (block, _) = train_block(&spec, &fam, &SimConfig::default(), &cfg).unwrap();
        let b_y = default_output_bound(&spec, 0.5);
        let init = initial_network(10, 0.5, b_y, &cfg).unwrap();
        assert_eq!(block.net, init);
        assert_eq!(block.metrics.epochs_run, 0);
    }

    #[test]
    fn training_reduces_error() {
        let spec = catalog::appendix_e();
        let fam = small_family(&spec);
        let (before, _) = train_block(&spec, &fam, &SimConfig::default(), &quick(5, 0)).unwrap();
        let (after, hist) = train_block(&spec, &fam, &SimConfig::default(), &quick(5, 150)).unwrap();
        assert!(after.metrics.train_eps_op < 0.5 * before.metrics.train_eps_op);
        assert!(hist.checkpoints.len() >= 2);
    }

    #[test]
    fn zero_problem_block_is_accurate_on_zero() {
        // the theorem family for ε = 0.1 has M̂ = 0 + ε/2
        let spec = catalog::zero();
        let d = Arc::new(GridDomain::for_spec(&spec, &GridShape { time_nodes: 0, state_nodes: vec![5], action_nodes: vec![] }).unwrap());
        let z = GridFunction::zeros(d.clone());
        let fam = FunctionFamily::new(d, FamilyParams { amplitude_cap: 0.05, lipschitz_cap: 1.0, ..Default::default() })
            .unwrap()
            .with_curriculum(vec![z.clone()]);
        let cfg = TrainingConfig { train_count: 4000, epochs: 60, ..quick(6, 0) };
        let (block, _) = train_block(&spec, &fam, &SimConfig::default(), &cfg).unwrap();
        let e = block.apply(&z).unwrap().sup_norm();
        assert!(e <= 1e-3, "{e}");
    }
}
