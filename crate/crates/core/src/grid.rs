//! Tensor grids on `K_Q = [0,T] × S × A` and functions represented by their
//! node values.
//!
//! Continuous axes are ordered `[t, s_0.., a_0..]` (the time axis is absent
//! for discrete problems, action axes are absent for finite action sets).
//! Node index layout is action-slice major, then node-major over the
//! continuous axes with the **last axis fastest**:
//!
//! ```text
//! j = slice * slice_len + Σ_k i_k * stride_k,   stride_{last} = 1
//! ```
//!
//! A finite action set contributes one slice per action; slices are never
//! interpolated across. Off-node values come from multilinear interpolation,
//! which is exact at nodes, a convex combination of cell corners, and
//! 1-Lipschitz from node vectors (sup norm) to functions (sup norm).

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mdp::{ActionSpace, FiniteAction, MdpSpec};
use crate::rng;
use crate::{Error, Result};

/// Maximum number of continuous axes (corner enumeration uses `2^d` terms).
pub const MAX_AXES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    Time,
    State,
    Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub kind: AxisKind,
    pub nodes: Vec<f64>,
}

impl Axis {
    /// `n` equispaced nodes on `[lo, hi]`, endpoints exact.
    pub fn uniform(name: impl Into<String>, kind: AxisKind, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidConfig(format!("axis needs at least 2 nodes, got {n}")));
        }
        if !(lo < hi) {
            return Err(Error::InvalidConfig(format!("axis range [{lo}, {hi}] is empty")));
        }
        let h = (hi - lo) / (n - 1) as f64;
        let mut nodes: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
        nodes[n - 1] = hi;
        Ok(Self { name: name.into(), kind, nodes })
    }

    pub fn lo(&self) -> f64 {
        self.nodes[0]
    }

    pub fn hi(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn min_spacing(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.nodes.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Cell index and local weight in `[0, 1]` for `x` (clamped to the axis).
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let n = self.nodes.len();
        let x = x.clamp(self.nodes[0], self.nodes[n - 1]);
        let i = self.nodes.partition_point(|&v| v <= x).saturating_sub(1).min(n - 2);
        let w = (x - self.nodes[i]) / (self.nodes[i + 1] - self.nodes[i]);
        (i, w.clamp(0.0, 1.0))
    }
}

/// Nodes per axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    /// Ignored for problems without a time axis.
    pub time_nodes: usize,
    pub state_nodes: Vec<usize>,
    /// Ignored for finite action sets.
    #[serde(default)]
    pub action_nodes: Vec<usize>,
}

/// A point of `K_Q`: the action slice plus continuous coordinates `[t?, s.., a..]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub slice: usize,
    pub coords: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    axes: Vec<Axis>,
    actions: Option<Vec<FiniteAction>>,
    strides: Vec<usize>,
    slice_len: usize,
}

impl GridDomain {
    /// Grid over continuous axes only (plus optional finite action slices).
    pub fn new(axes: Vec<Axis>, actions: Option<Vec<FiniteAction>>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_AXES {
            return Err(Error::InvalidConfig(format!("grid needs 1..={MAX_AXES} axes, got {}", axes.len())));
        }
        for ax in &axes {
            if ax.nodes.len() < 2 || ax.nodes.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::InvalidConfig(format!("axis `{}` nodes must be strictly increasing", ax.name)));
            }
        }
        if matches!(&actions, Some(a) if a.is_empty()) {
            return Err(Error::InvalidConfig("empty action list".into()));
        }
        let mut strides = vec![1; axes.len()];
        for k in (0..axes.len() - 1).rev() {
            strides[k] = strides[k + 1] * axes[k + 1].nodes.len();
        }
        let slice_len = strides[0] * axes[0].nodes.len();
        Ok(Self { axes, actions, strides, slice_len })
    }

    /// Uniform grid covering the spec's `K_Q`.
    pub fn for_spec(spec: &MdpSpec, shape: &GridShape) -> Result<Self> {
        let mut axes = Vec::new();
        if spec.has_time_axis() {
            axes.push(Axis::uniform("t", AxisKind::Time, 0.0, spec.horizon, shape.time_nodes)?);
        }
        if shape.state_nodes.len() != spec.state_dim() {
            return Err(Error::InvalidConfig(format!(
                "grid.state_nodes has {} entries, state dimension is {}",
                shape.state_nodes.len(),
                spec.state_dim()
            )));
        }
        for (i, &n) in shape.state_nodes.iter().enumerate() {
            let name = if spec.state_dim() == 1 { "s".to_string() } else { format!("s{i}") };
            axes.push(Axis::uniform(name, AxisKind::State, spec.states.lo[i], spec.states.hi[i], n)?);
        }
        let actions = match &spec.actions {
            ActionSpace::Finite(list) => Some(list.clone()),
            ActionSpace::Box(b) => {
                if shape.action_nodes.len() != b.dim() {
                    return Err(Error::InvalidConfig(format!(
                        "grid.action_nodes has {} entries, action dimension is {}",
                        shape.action_nodes.len(),
                        b.dim()
                    )));
                }
                for (i, &n) in shape.action_nodes.iter().enumerate() {
                    let name = if b.dim() == 1 { "a".to_string() } else { format!("a{i}") };
                    axes.push(Axis::uniform(name, AxisKind::Action, b.lo[i], b.hi[i], n)?);
                }
                None
            }
        };
        Self::new(axes, actions)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn finite_actions(&self) -> Option<&[FiniteAction]> {
        self.actions.as_deref()
    }

    pub fn n_slices(&self) -> usize {
        self.actions.as_ref().map_or(1, Vec::len)
    }

    pub fn slice_len(&self) -> usize {
        self.slice_len
    }

    /// Total node count `M`.
    pub fn len(&self) -> usize {
        self.slice_len * self.n_slices()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn has_time(&self) -> bool {
        self.axes[0].kind == AxisKind::Time
    }

    pub fn horizon(&self) -> Option<f64> {
        self.has_time().then(|| self.axes[0].hi())
    }

    fn axes_of(&self, kind: AxisKind) -> std::ops::Range<usize> {
        let start = self.axes.iter().position(|a| a.kind == kind).unwrap_or(self.axes.len());
        let count = self.axes.iter().filter(|a| a.kind == kind).count();
        start..start + count
    }

    pub fn state_axes(&self) -> std::ops::Range<usize> {
        self.axes_of(AxisKind::State)
    }

    pub fn action_axes(&self) -> std::ops::Range<usize> {
        self.axes_of(AxisKind::Action)
    }

    /// Smallest node spacing over all continuous axes.
    pub fn min_mesh(&self) -> f64 {
        self.axes.iter().map(Axis::min_spacing).fold(f64::INFINITY, f64::min)
    }

    pub fn max_mesh(&self) -> f64 {
        self.axes.iter().map(Axis::max_spacing).fold(0.0, f64::max)
    }

    /// Per-axis multi-index of node `j` within its slice.
    pub fn multi_index(&self, j: usize) -> Vec<usize> {
        let mut r = j % self.slice_len;
        self.strides
            .iter()
            .map(|&st| {
                let i = r / st;
                r %= st;
                i
            })
            .collect()
    }

    pub fn node(&self, j: usize) -> GridPoint {
        let idx = self.multi_index(j);
        GridPoint {
            slice: j / self.slice_len,
            coords: idx.iter().zip(&self.axes).map(|(&i, ax)| ax.nodes[i]).collect(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = GridPoint> + '_ {
        (0..self.len()).map(|j| self.node(j))
    }

    /// Time coordinate of a point (0 without a time axis).
    pub fn time_of(&self, p: &GridPoint) -> f64 {
        if self.has_time() {
            p.coords[0]
        } else {
            0.0
        }
    }

    pub fn state_of<'a>(&self, p: &'a GridPoint) -> &'a [f64] {
        &p.coords[self.state_axes()]
    }

    /// Action coordinates: the box coordinates, or the finite action's embedding.
    pub fn action_of<'a>(&'a self, p: &'a GridPoint) -> &'a [f64] {
        match &self.actions {
            Some(list) => &list[p.slice].coords,
            None => &p.coords[self.action_axes()],
        }
    }

    /// `d_KQ` between two points: `|Δt| + ‖Δs‖₂ + ‖Δa‖₂`.
    pub fn distance(&self, p: &GridPoint, q: &GridPoint) -> f64 {
        let norm = |r: std::ops::Range<usize>| {
            r.map(|k| (p.coords[k] - q.coords[k]).powi(2)).sum::<f64>().sqrt()
        };
        let dt = if self.has_time() { (p.coords[0] - q.coords[0]).abs() } else { 0.0 };
        let da = match &self.actions {
            Some(list) => list[p.slice]
                .coords
                .iter()
                .zip(&list[q.slice].coords)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt(),
            None => norm(self.action_axes()),
        };
        dt + norm(self.state_axes()) + da
    }

    /// Uniform random point in slice `slice` (or a random slice if `None`).
    pub fn random_point<R: Rng>(&self, rng: &mut R, slice: Option<usize>) -> GridPoint {
        let slice = slice.unwrap_or_else(|| rng.random_range(0..self.n_slices()));
        GridPoint {
            slice,
            coords: self.axes.iter().map(|ax| ax.lo() + (ax.hi() - ax.lo()) * rng.random::<f64>()).collect(),
        }
    }

    /// The `i`-th quasi-random probe: Halton coordinates, slice cycling with `i`.
    pub fn halton_point(&self, i: usize) -> GridPoint {
        GridPoint {
            slice: i % self.n_slices(),
            coords: self
                .axes
                .iter()
                .enumerate()
                .map(|(k, ax)| ax.lo() + (ax.hi() - ax.lo()) * rng::halton(i as u64, k))
                .collect(),
        }
    }

    /// Interpolates node values `values` at `p`.
    #[inline]
    pub fn interpolate(&self, values: &[f64], p: &GridPoint) -> f64 {
        self.interpolate_in_slice(values, p.slice, &p.coords)
    }

    #[inline]
    pub fn interpolate_in_slice(&self, values: &[f64], slice: usize, coords: &[f64]) -> f64 {
        let d = self.axes.len();
        let mut cell = [0usize; MAX_AXES];
        let mut w = [0.0f64; MAX_AXES];
        for k in 0..d {
            let (i, wk) = self.axes[k].locate(coords[k]);
            cell[k] = i;
            w[k] = wk;
        }
        let base = slice * self.slice_len;
        let n = 1usize << d;
        let mut small = [0.0f64; 64];
        let mut large = Vec::new();
        let corners: &mut [f64] = if n <= small.len() {
            &mut small[..n]
        } else {
            large.resize(n, 0.0);
            &mut large
        };
        for (mask, c) in corners.iter_mut().enumerate() {
            let mut off = base;
            for (k, (&c, &stride)) in cell.iter().zip(&self.strides).enumerate().take(d) {
                let up = mask >> (d - 1 - k) & 1;
                off += (c + up) * stride;
            }
            *c = values[off];
        }
        // fold the last axis first: a + w (b - a) keeps constants exact
        let mut len = n;
        for k in (0..d).rev() {
            len /= 2;
            for i in 0..len {
                let (a, b) = (corners[2 * i], corners[2 * i + 1]);
                corners[i] = match w[k] {
                    0.0 => a,
                    1.0 => b,
                    wk => a + wk * (b - a),
                };
            }
        }
        corners[0]
    }

    /// Number of candidate actions for `sup_{a'}`: finite actions, or all
    /// action-axis node combinations of a box.
    pub fn n_action_choices(&self) -> usize {
        match &self.actions {
            Some(list) => list.len(),
            None => self.action_axes().map(|k| self.axes[k].nodes.len()).product(),
        }
    }

    /// `max_{a'} Q(t, s, a')` over [`Self::n_action_choices`] candidates, with
    /// the lowest index winning ties. `t` is ignored without a time axis.
    pub fn max_over_actions(&self, values: &[f64], t: f64, s: &[f64]) -> (f64, usize) {
        let mut coords = [0.0f64; MAX_AXES];
        let mut k0 = 0;
        if self.has_time() {
            coords[0] = t;
            k0 = 1;
        }
        coords[k0..k0 + s.len()].copy_from_slice(s);
        let acts = self.action_axes();
        let mut best = (f64::NEG_INFINITY, 0);
        for choice in 0..self.n_action_choices() {
            let slice = if self.actions.is_some() {
                choice
            } else {
                let mut r = choice;
                for k in acts.clone().rev() {
                    let n = self.axes[k].nodes.len();
                    coords[k] = self.axes[k].nodes[r % n];
                    r /= n;
                }
                0
            };
            let v = self.interpolate_in_slice(values, slice, &coords[..self.axes.len()]);
            if v > best.0 {
                best = (v, choice);
            }
        }
        best
    }

    /// Canonical description used for checksums and sidecars.
    pub fn metadata(&self) -> GridMetadata {
        GridMetadata {
            format: "grid-function/1".into(),
            ordering: "slice-major, last continuous axis fastest".into(),
            node_count: self.len(),
            axes: self.axes.clone(),
            actions: self.actions.clone(),
            checksum: self.checksum(),
        }
    }

    /// SHA-256 over the axes and action list.
    pub fn checksum(&self) -> String {
        let body = serde_json::to_vec(&(&self.axes, &self.actions)).expect("grid metadata serializes");
        hex::encode(Sha256::digest(&body))
    }

    fn slice_label(&self, slice: usize) -> String {
        match &self.actions {
            Some(list) => list[slice].name.clone(),
            None => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub format: String,
    pub ordering: String,
    pub node_count: usize,
    pub axes: Vec<Axis>,
    pub actions: Option<Vec<FiniteAction>>,
    pub checksum: String,
}

/// Largest `|f(x) - g(x)|` found and where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupDistance {
    pub value: f64,
    pub at: GridPoint,
}

/// Default number of quasi-random probes added to the node scan.
pub const DEFAULT_DENSE: usize = 4096;

/// A function on `K_Q` stored as node values on a [`GridDomain`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    domain: Arc<GridDomain>,
    values: Vec<f64>,
}

impl GridFunction {
    /// Decoder: wraps a node vector as a function on the grid.
    pub fn decode(domain: Arc<GridDomain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::LengthMismatch { expected: domain.len(), actual: values.len() });
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { node });
        }
        Ok(Self { domain, values })
    }

    /// Encoder: samples `f` at every node.
    pub fn encode(domain: Arc<GridDomain>, f: impl Fn(&GridPoint) -> f64) -> Result<Self> {
        let values: Vec<f64> = domain.nodes().map(|p| f(&p)).collect();
        Self::decode(domain, values)
    }

    pub fn constant(domain: Arc<GridDomain>, c: f64) -> Self {
        let n = domain.len();
        Self { domain, values: vec![c; n] }
    }

    pub fn zeros(domain: Arc<GridDomain>) -> Self {
        Self::constant(domain, 0.0)
    }

    pub fn domain(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn eval(&self, p: &GridPoint) -> f64 {
        self.domain.interpolate(&self.values, p)
    }

    /// `max_{a'} self(t, s, a')` with tie-break on the lowest action index.
    pub fn max_over_actions(&self, t: f64, s: &[f64]) -> (f64, usize) {
        self.domain.max_over_actions(&self.values, t, s)
    }

    pub fn same_domain(&self, other: &GridFunction) -> bool {
        Arc::ptr_eq(&self.domain, &other.domain) || *self.domain == *other.domain
    }

    fn check_domain(&self, other: &GridFunction) -> Result<()> {
        if self.same_domain(other) {
            Ok(())
        } else {
            Err(Error::DomainMismatch)
        }
    }

    /// Exact sup norm: a multilinear interpolant attains its extremes at nodes.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest nodal difference `max_j |u_j - v_j|`; equals the sup distance
    /// of two interpolants on the same grid.
    pub fn node_distance(&self, other: &GridFunction) -> Result<f64> {
        self.check_domain(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Sup distance over all nodes plus `n_dense` Halton probes, with the
    /// maximizing point. Ties keep the first point found.
    pub fn sup_distance(&self, other: &GridFunction, n_dense: usize) -> Result<SupDistance> {
        self.check_domain(other)?;
        Ok(self.sup_distance_to(|p| other.eval(p), n_dense))
    }

    /// Sup distance to an arbitrary function on `K_Q`, probed the same way.
    pub fn sup_distance_to(&self, f: impl Fn(&GridPoint) -> f64, n_dense: usize) -> SupDistance {
        let dom = &self.domain;
        let mut best = SupDistance { value: -1.0, at: dom.node(0) };
        let mut consider = |p: GridPoint, v: f64| {
            if v > best.value {
                best = SupDistance { value: v, at: p };
            }
        };
        for (j, &v) in self.values.iter().enumerate() {
            let p = dom.node(j);
            let d = (v - f(&p)).abs();
            consider(p, d);
        }
        for i in 0..n_dense {
            let p = dom.halton_point(i);
            let d = (self.eval(&p) - f(&p)).abs();
            consider(p, d);
        }
        best
    }

    /// Lower estimate of the Lipschitz constant under `d_KQ`, within action
    /// slices: the larger of the adjacent-node difference quotients and
    /// `n_pairs` random same-slice pairs.
    ///
    /// For a multilinear interpolant each axis-aligned quotient is exact, so
    /// the scan is within a factor `√n_state + n_action_axes + 1` of the
    /// true constant (the worst case mixes axes inside one cell).
    pub fn lipschitz(&self, n_pairs: usize, seed: u64) -> f64 {
        let dom = &self.domain;
        let mut best: f64 = 0.0;
        for slice in 0..dom.n_slices() {
            let base = slice * dom.slice_len;
            for r in 0..dom.slice_len {
                let idx = dom.multi_index(r);
                for (k, ax) in dom.axes.iter().enumerate() {
                    if idx[k] + 1 < ax.nodes.len() {
                        let h = ax.nodes[idx[k] + 1] - ax.nodes[idx[k]];
                        let dv = (self.values[base + r + dom.strides[k]] - self.values[base + r]).abs();
                        best = best.max(dv / h);
                    }
                }
            }
        }
        let mut rng = rng::stream(seed, 0x11B);
        for _ in 0..n_pairs {
            let p = dom.random_point(&mut rng, None);
            let q = dom.random_point(&mut rng, Some(p.slice));
            let d = dom.distance(&p, &q);
            if d > 1e-12 {
                best = best.max((self.eval(&p) - self.eval(&q)).abs() / d);
            }
        }
        best
    }

    /// Upper bound on the Lipschitz constant of the interpolant within action
    /// slices. With `g_k` the largest adjacent quotient along axis `k`, every
    /// partial derivative satisfies `|∂_k f| ≤ g_k`, so under `d_KQ` the
    /// constant is at most `max(g_t, ‖g_s‖₂, ‖g_a‖₂)`.
    pub fn lipschitz_upper(&self) -> f64 {
        let dom = &self.domain;
        let mut g = vec![0.0f64; dom.axes.len()];
        for slice in 0..dom.n_slices() {
            let base = slice * dom.slice_len;
            for r in 0..dom.slice_len {
                let idx = dom.multi_index(r);
                for (k, ax) in dom.axes.iter().enumerate() {
                    if idx[k] + 1 < ax.nodes.len() {
                        let h = ax.nodes[idx[k] + 1] - ax.nodes[idx[k]];
                        let dv = (self.values[base + r + dom.strides[k]] - self.values[base + r]).abs();
                        g[k] = g[k].max(dv / h);
                    }
                }
            }
        }
        let group = |r: std::ops::Range<usize>| r.map(|k| g[k] * g[k]).sum::<f64>().sqrt();
        let gt = if dom.has_time() { g[0] } else { 0.0 };
        gt.max(group(dom.state_axes())).max(group(dom.action_axes()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<GridFunction> {
        Self::decode(self.domain.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.check_domain(other)?;
        Self::decode(
            self.domain.clone(),
            self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    /// SHA-256 of the little-endian value bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// CSV with header `[action,] <axis names..>, value`; one row per node in
    /// index order. Floats use Rust's shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let dom = &self.domain;
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = Vec::new();
        if dom.actions.is_some() {
            header.push("action".into());
        }
        header.extend(dom.axes.iter().map(|a| a.name.clone()));
        header.push("value".into());
        out.write_record(&header)?;
        for (j, v) in self.values.iter().enumerate() {
            let p = dom.node(j);
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            if dom.actions.is_some() {
                row.push(dom.slice_label(p.slice));
            }
            row.extend(p.coords.iter().map(|c| format!("{c:?}")));
            row.push(format!("{v:?}"));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads values written by [`Self::write_csv`], checking node coordinates.
    pub fn read_csv<R: Read>(domain: Arc<GridDomain>, r: R) -> Result<GridFunction> {
        let mut rdr = csv::Reader::from_reader(r);
        let offset = usize::from(domain.actions.is_some());
        let mut values = Vec::with_capacity(domain.len());
        for (j, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if j >= domain.len() {
                return Err(Error::LengthMismatch { expected: domain.len(), actual: j + 1 });
            }
            let p = domain.node(j);
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Format(format!("row {j}: missing column {i}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {j}: {e}")))
            };
            if offset == 1 && rec.get(0) != Some(domain.slice_label(p.slice).as_str()) {
                return Err(Error::Format(format!("row {j}: action label does not match grid")));
            }
            for (k, c) in p.coords.iter().enumerate() {
                if parse(offset + k)? != *c {
                    return Err(Error::Format(format!("row {j}: coordinate {k} does not match grid")));
                }
            }
            values.push(parse(offset + p.coords.len())?);
        }
        Self::decode(domain, values)
    }

    /// Writes `<path>` (CSV) and `<path>.json` (grid metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)?;
        let meta = serde_json::to_string_pretty(&self.domain.metadata())?;
        std::fs::write(sidecar_path(path), meta + "\n")?;
        Ok(())
    }

    pub fn load(domain: Arc<GridDomain>, path: &Path) -> Result<GridFunction> {
        let meta: GridMetadata = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        if meta.checksum != domain.checksum() {
            return Err(Error::GridMismatch { expected: domain.checksum(), actual: meta.checksum });
        }
        Self::read_csv(domain, std::fs::File::open(path)?)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> Arc<GridDomain> {
        Arc::new(GridDomain::new(vec![Axis::uniform("s", AxisKind::State, 0.0, 1.0, n).unwrap()], None).unwrap())
    }

    fn plane(n: usize) -> Arc<GridDomain> {
        Arc::new(
            GridDomain::new(
                vec![
                    Axis::uniform("x", AxisKind::State, 0.0, 1.0, n).unwrap(),
                    Axis::uniform("y", AxisKind::State, -1.0, 1.0, n + 3).unwrap(),
                ],
                None,
            )
            .unwrap(),
        )
    }

    #[test]
    fn ordering_is_last_axis_fastest() {
        let d = plane(3);
        assert_eq!(d.len(), 3 * 6);
        assert_eq!(d.node(1).coords, vec![0.0, -0.6]);
        assert_eq!(d.node(6).coords, vec![0.5, -1.0]);
        assert_eq!(d.multi_index(7), vec![1, 1]);
    }

    #[test]
    fn finite_actions_are_outer_slices() {
        let spec = catalog::appendix_e();
        let shape = GridShape { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] };
        let d = GridDomain::for_spec(&spec, &shape).unwrap();
        assert_eq!(d.len(), 22);
        assert_eq!(d.node(11).slice, 1);
        assert_eq!(d.node(11).coords, vec![0.0]);
        assert_eq!(d.node(10).coords, vec![1.0]);
    }

    #[test]
    fn encode_quadratic() {
        let f = GridFunction::encode(line(11), |p| -(p.coords[0] - 0.5).powi(2)).unwrap();
        assert_eq!(f.values()[0], -0.25);
        assert_eq!(f.values()[5], 0.0);
    }

    #[test]
    fn encode_zero() {
        let f = GridFunction::encode(plane(4), |_| 0.0).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_reports_nan_node() {
        let err = GridFunction::encode(line(5), |p| if p.coords[0] == 0.5 { f64::NAN } else { 1.0 }).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { node: 2 }));
    }

    #[test]
    fn decode_length_mismatch() {
        assert!(matches!(
            GridFunction::decode(line(5), vec![0.0; 4]),
            Err(Error::LengthMismatch { expected: 5, actual: 4 })
        ));
    }

    #[test]
    fn decode_midpoint() {
        let f = GridFunction::decode(line(2), vec![0.0, 1.0]).unwrap();
        assert_eq!(f.eval(&GridPoint { slice: 0, coords: vec![0.5] }), 0.5);
    }

    #[test]
    fn affine_reproduced_everywhere() {
        let aff = |p: &GridPoint| 0.3 + 2.0 * p.coords[0] - 0.7 * p.coords[1];
        let f = GridFunction::encode(plane(5), aff).unwrap();
        let d = f.sup_distance_to(aff, 2000);
        assert!(d.value < 1e-14, "{}", d.value);
    }

    #[test]
    fn quadratic_interpolation_error_bound() {
        for n in [5, 11, 33] {
            let h = 1.0 / (n - 1) as f64;
            let f = GridFunction::encode(line(n), |p| p.coords[0].powi(2)).unwrap();
            let err = f.sup_distance_to(|p| p.coords[0].powi(2), 20_000).value;
            assert!(err <= 2.0 * h * h / 8.0 + 1e-15, "n={n}: {err}");
            assert!(err > 0.9 * 2.0 * h * h / 8.0);
        }
    }

    #[test]
    fn sup_distance_basics() {
        let d = plane(3);
        let a = GridFunction::constant(d.clone(), 3.0);
        let b = GridFunction::constant(d.clone(), 1.0);
        assert_eq!(a.sup_distance(&a, 100).unwrap().value, 0.0);
        assert_eq!(a.sup_distance(&b, 100).unwrap().value, 2.0);
        let other = GridFunction::zeros(line(3));
        assert!(matches!(a.sup_distance(&other, 10), Err(Error::DomainMismatch)));
    }

    #[test]
    fn lipschitz_examples() {
        let c = GridFunction::constant(line(11), 4.0);
        assert_eq!(c.lipschitz(500, 1), 0.0);
        let q = GridFunction::encode(line(11), |p| -(p.coords[0] - 0.5).powi(2)).unwrap();
        let l = q.lipschitz(500, 1);
        assert!((0.9..=1.0).contains(&l), "{l}");
        let lin = GridFunction::encode(line(11), |p| 2.0 * p.coords[0]).unwrap();
        assert_abs_diff_eq!(lin.lipschitz(500, 1), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn max_over_box_actions_picks_best_node() {
        let spec = catalog::ou_1d();
        let shape = GridShape { time_nodes: 3, state_nodes: vec![5], action_nodes: vec![5] };
        let d = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
        let f = GridFunction::encode(d.clone(), |p| -(p.coords[2] - 0.5).powi(2) + p.coords[1]).unwrap();
        let (v, i) = f.max_over_actions(0.25, &[0.3]);
        assert_eq!(i, 3);
        assert_abs_diff_eq!(v, 0.3, epsilon = 1e-14);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let spec = catalog::appendix_e();
        let shape = GridShape { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] };
        let d = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
        let f = GridFunction::constant(d, 1.0);
        assert_eq!(f.max_over_actions(0.0, &[0.3]).1, 0);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let spec = catalog::appendix_e();
        let shape = GridShape { time_nodes: 0, state_nodes: vec![11], action_nodes: vec![] };
        let d = Arc::new(GridDomain::for_spec(&spec, &shape).unwrap());
        let f = GridFunction::encode(d.clone(), |p| (p.coords[0] * 7.1).sin() / 3.0 + p.slice as f64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        f.save(&path).unwrap();
        let g = GridFunction::load(d, &path).unwrap();
        assert_eq!(f.values(), g.values());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("action,s,value\na_L,0.0,"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-5.0f64..5.0, n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn encode_decode_identity(v in values(4 * 7)) {
                let d = plane(4);
                let f = GridFunction::decode(d.clone(), v.clone()).unwrap();
                let g = GridFunction::encode(d, |p| f.eval(p)).unwrap();
                prop_assert_eq!(g.values(), &v[..]);
            }

            #[test]
            fn interpolation_is_convex(v in values(4 * 7), x in 0.0f64..1.0, y in -1.0f64..1.0) {
                let f = GridFunction::decode(plane(4), v.clone()).unwrap();
                let e = f.eval(&GridPoint { slice: 0, coords: vec![x, y] });
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
            }

            #[test]
            fn decode_is_nonexpansive(u in values(4 * 7), v in values(4 * 7)) {
                let d = plane(4);
                let fu = GridFunction::decode(d.clone(), u).unwrap();
                let fv = GridFunction::decode(d, v).unwrap();
                let node = fu.node_distance(&fv).unwrap();
                let dense = fu.sup_distance(&fv, 512).unwrap().value;
                prop_assert!(dense <= node * (1.0 + 1e-12) + 1e-15);
            }
        }
    }
}
