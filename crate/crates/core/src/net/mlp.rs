//! Dense feed-forward network with hand-written backpropagation.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `z = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// `y = B · tanh(z_L)` (or `y = z_L` without an output bound), hidden layers
/// use `hidden`. Inputs are multiplied by the fixed `input_scale` first.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output_bound: Option<f64>,
    pub input_scale: f64,
}

/// Parameter gradients laid out like [`Mlp::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Dense>,
}

impl Gradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.w *= c;
            l.b *= c;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend(l.w.iter());
        v.extend(l.b.iter());
    }
    v
}

impl Mlp {
    /// Random initialization: `W ~ N(0, 1/(3 fan_in))`, zero biases.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output_bound: Option<f64>,
        input_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid layer sizes {sizes:?}")));
        }
        if let Some(b) = output_bound {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("output bound must be finite and ≥ 0, got {b}")));
            }
        }
        let mut rng = rng::stream(seed, 0x1417);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = 1.0 / (3.0 * w[0] as f64).sqrt();
                Dense {
                    w: Array2::from_shape_fn((w[1], w[0]), |_| {
                        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    }),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers, hidden, output_bound, input_scale })
    }

    pub fn zeroed(sizes: &[usize], hidden: Activation, output_bound: Option<f64>) -> Result<Self> {
        let mut net = Self::new(sizes, hidden, output_bound, 1.0, 0)?;
        for l in &mut net.layers {
            l.w.fill(0.0);
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").w.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::LengthMismatch { expected: self.n_params(), actual: flat.len() });
        }
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[i];
                i += 1;
            }
        }
        Ok(())
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.w.len() {
                let c = l.w.ncols();
                return &mut l.w[[idx / c, idx % c]];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    fn finish(&self, z: f64) -> f64 {
        match self.output_bound {
            Some(b) => b * z.tanh(),
            None => z,
        }
    }

    /// Forward pass on one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!("input has {} entries, network expects {}", x.len(), self.input_dim())));
        }
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("contiguous slice");
        Ok(self.forward_batch(batch).into_raw_vec_and_offset().0)
    }

    /// Forward pass on rows of `x` (`batch × in`).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.activations(x).pop().expect("output layer")
    }

    /// Post-activation values for every layer, input (scaled) first.
    fn activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.mapv(|v| v * self.input_scale)];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&l.w.t());
            z += &l.b;
            if k == last {
                z.mapv_inplace(|v| self.finish(v));
            } else {
                let act = self.hidden;
                z.mapv_inplace(|v| act.apply(v));
            }
            acts.push(z);
        }
        acts
    }

    /// Sum of squared errors over the batch, divided by `norm`, and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, target: ArrayView2<f64>, norm: f64) -> (f64, Gradient) {
        let acts = self.activations(x);
        let out = acts.last().expect("output layer");
        let diff = out - &target;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / norm;
        let mut delta = diff.mapv(|d| 2.0 * d / norm);
        match self.output_bound {
            Some(b) if b > 0.0 => delta.zip_mut_with(out, |d, &y| *d *= b - y * y / b),
            Some(_) => delta.fill(0.0),
            None => {}
        }
        let mut grad = Gradient::zeros_like(self);
        for k in (0..self.layers.len()).rev() {
            let a_in = &acts[k];
            grad.layers[k].w = delta.t().dot(a_in);
            grad.layers[k].b = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].w);
                let act = self.hidden;
                back.zip_mut_with(a_in, |g, &y| *g *= act.slope_from_output(y));
                delta = back;
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, x: ArrayView2<f64>, target: ArrayView2<f64>, norm: f64) -> f64 {
        let out = self.forward_batch(x);
        (&out - &target).iter().map(|d| d * d).sum::<f64>() / norm
    }

    /// Largest absolute entry error of the network on a batch.
    pub fn max_error(&self, x: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
        let out = self.forward_batch(x);
        (&out - &target).iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Compares backpropagated gradients of the squared-error loss with central
/// differences at step `h_fd` on `n_params` randomly chosen parameters.
/// Relative error is `|g - g_fd| / max(|g|, |g_fd|, 1e-6)`; returns the max.
///
/// `corrupt` is applied to the backpropagated gradient before comparison
/// (used to check that the test detects a wrong gradient).
pub fn grad_check_with(
    net: &Mlp,
    x: ArrayView2<f64>,
    target: ArrayView2<f64>,
    h_fd: f64,
    n_params: usize,
    seed: u64,
    corrupt: impl Fn(f64) -> f64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&h_fd) {
        return Err(Error::InvalidConfig(format!("finite-difference step must lie in [1e-7, 1e-4], got {h_fd}")));
    }
    let norm = (x.nrows() * net.output_dim()) as f64;
    let (_, grad) = net.loss_and_grad(x, target, norm);
    let flat = grad.flat();
    let mut rng = rng::stream(seed, 0x6C);
    let total = net.n_params();
    let mut picks: Vec<usize> = if n_params >= total {
        (0..total).collect()
    } else {
        (0..n_params).map(|_| rng.random_range(0..total)).collect()
    };
    picks.sort_unstable();
    picks.dedup();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for idx in picks {
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + h_fd;
        let up = probe.loss(x, target, norm);
        *probe.param_mut(idx) = orig - h_fd;
        let down = probe.loss(x, target, norm);
        *probe.param_mut(idx) = orig;
        let fd = (up - down) / (2.0 * h_fd);
        let bp = corrupt(flat[idx]);
        let rel = (bp - fd).abs() / bp.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn grad_check(net: &Mlp, x: ArrayView2<f64>, target: ArrayView2<f64>, h_fd: f64, n_params: usize, seed: u64) -> Result<f64> {
    grad_check_with(net, x, target, h_fd, n_params, seed, |g| g)
}

/// Rows `start..end` of a row-major sample matrix.
pub fn rows(m: &Array2<f64>, start: usize, end: usize) -> ArrayView2<'_, f64> {
    m.slice(s![start..end, ..])
}
