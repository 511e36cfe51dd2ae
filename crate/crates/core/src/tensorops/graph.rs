//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every executed op in execution (hence topological)
//! order. Each node keeps its forward value, the op that produced it and any
//! values saved for the backward pass. [`Graph::backward`] walks the tape once
//! in reverse, accumulating gradients additively into every input.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::cost::{CostReport, LayerCost, LAYER_NORM_FLOPS, MAXPOOL_FLOPS, SOFTMAX_FLOPS};
use super::kernels::{self, SpatialGeom, TemporalGeom};
use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::bail;
use crate::scalar::{self, Scalar};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
}

/// A scalar-valued function whose gradient is produced alongside its value.
/// Used for losses computed by dedicated dynamic programs.
pub trait ScalarObjective: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns the value and `d value / d x` (same length as `x`).
    fn eval(&self, x: &Tensor) -> Result<(Scalar, Vec<Scalar>)>;
    fn flops(&self, _x_shape: &[usize]) -> u64 {
        0
    }
}

/// The recorded operation that produced a node, with its op metadata.
#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    AddBroadcast(Var, Var),
    Scale(Var, Scalar),
    /// `[.., k] · [k, n]`.
    MatMul(Var, Var),
    /// `[g, m, k] · [g, k, n]`, or `· [g, n, k]ᵀ` when `trans_b`.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Unary(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: Scalar },
    /// Kernel `[1, 3, 3, c_in, c_out]` over `[b, t, h, w, c_in]`.
    ConvSpatial { x: Var, kernel: Var, stride: usize },
    /// Kernel `[3, 1, 1, c_in, c_out]` over `[b, t, h, w, c_in]`.
    ConvTemporal { x: Var, kernel: Var, stride: usize },
    MaxPool2(Var),
    /// `[b, t, h, w, c] -> [b, t, c]`.
    SpatialMean(Var),
    Reshape(Var),
    /// Concatenation along the last axis.
    Concat(Var, Var),
    /// Concatenation along the first axis.
    StackRows(Vec<Var>),
    /// `[.., start..start+len]` along the last axis.
    Slice { x: Var, start: usize, len: usize },
    /// `[g, s, h·d] -> [g·h, s, d]`.
    SplitHeads { x: Var, heads: usize },
    /// `[g·h, s, d] -> [g, s, h·d]`.
    MergeHeads { x: Var, heads: usize },
    /// `[g, s, d]` with `token: [d]` prepended to every group.
    PrependToken { x: Var, token: Var },
    /// `[g, s, d] -> [g, d]`.
    SelectToken { x: Var, index: usize },
    Embedding { table: Var, ids: Vec<usize> },
    /// `[t, h] ⊕ [u, h] -> [t, u, h]`, every pairwise sum; an optional leading
    /// batch axis is shared by both inputs.
    PairAdd(Var, Var),
    Sum(Var),
    Mean(Var),
    Objective { x: Var, f: Arc<dyn ScalarObjective> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Unary(_, Unary::Relu) => "relu",
            Op::Unary(_, Unary::Gelu) => "gelu",
            Op::Unary(_, Unary::Tanh) => "tanh",
            Op::Unary(_, Unary::Sigmoid) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConvSpatial { .. } => "conv_spatial",
            Op::ConvTemporal { .. } => "conv_temporal",
            Op::MaxPool2(..) => "maxpool_spatial",
            Op::SpatialMean(..) => "spatial_mean",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::StackRows(..) => "stack_rows",
            Op::Slice { .. } => "slice",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::PrependToken { .. } => "prepend_token",
            Op::SelectToken { .. } => "select_token",
            Op::Embedding { .. } => "embedding",
            Op::PairAdd(..) => "pair_add",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Objective { f, .. } => f.name(),
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MatMul(a, b)
            | Op::Concat(a, b)
            | Op::PairAdd(a, b)
            | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::ConvSpatial { x, kernel, .. } | Op::ConvTemporal { x, kernel, .. } => {
                vec![*x, *kernel]
            }
            Op::PrependToken { x, token } => vec![*x, *token],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::StackRows(parts) => parts.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::MaxPool2(x)
            | Op::SpatialMean(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Slice { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::SelectToken { x, .. }
            | Op::Objective { x, .. } => vec![*x],
        }
    }
}

/// Values an op keeps for its backward pass.
#[derive(Clone, Debug, Default)]
enum Saved {
    #[default]
    None,
    Scalars(Vec<Scalar>),
    Indices(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    saved: Saved,
    requires_grad: bool,
    grad: Option<Vec<Scalar>>,
}

/// Cost metadata recorded for one executed op.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub var: Var,
    pub op: &'static str,
    pub scope: String,
    pub mult_adds: u64,
    pub flops: u64,
}

struct Computed {
    value: Tensor,
    saved: Saved,
    mult_adds: u64,
    flops: u64,
}

impl Computed {
    fn new(value: Tensor) -> Self {
        Self {
            value,
            saved: Saved::None,
            mult_adds: 0,
            flops: 0,
        }
    }
    fn pointwise(value: Tensor) -> Self {
        let flops = value.len() as u64;
        Self {
            value,
            saved: Saved::None,
            mult_adds: 0,
            flops,
        }
    }
    fn macs(value: Tensor, mult_adds: u64) -> Self {
        Self {
            value,
            saved: Saved::None,
            mult_adds,
            flops: 2 * mult_adds,
        }
    }
    fn flops(mut self, flops: u64) -> Self {
        self.flops = flops;
        self
    }
    fn saving(mut self, saved: Saved) -> Self {
        self.saved = saved;
        self
    }
}

/// Record of executed ops plus the parameter bindings used by them.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    records: Vec<OpRecord>,
    scope: Vec<String>,
    store: Option<&'p ParamStore>,
    train_params: bool,
    params: BTreeMap<String, (Var, String)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameter bindings.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            records: Vec::new(),
            scope: Vec::new(),
            store: None,
            train_params: false,
            params: BTreeMap::new(),
        }
    }

    /// A graph that resolves [`Graph::param`] against `store`. Trainable
    /// parameters become gradient-tracking leaves when `train` is set.
    pub fn with_params(store: &'p ParamStore, train: bool) -> Self {
        Self {
            store: Some(store),
            train_params: train,
            ..Self::new()
        }
    }

    /// The parameter store bound at construction, if any.
    pub fn store(&self) -> Option<&'p ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn records(&self) -> &[OpRecord] {
        &self.records
    }

    // ---- scopes -------------------------------------------------------

    pub fn push_scope(&mut self, name: &str) {
        let path = match self.scope.last() {
            Some(p) => alloc::format!("{p}.{name}"),
            None => name.to_string(),
        };
        self.scope.push(path);
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn current_scope(&self) -> &str {
        self.scope.last().map(String::as_str).unwrap_or("")
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            saved: Saved::None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds the named parameter from the store. Repeated requests return the
    /// same leaf so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some((v, _)) = self.params.get(name) {
            return Ok(*v);
        }
        let Some(store) = self.store else {
            bail!(Config, "graph has no parameter store (wanted {name})");
        };
        let Some(entry) = store.entry(name) else {
            bail!(Config, "missing parameter {name}");
        };
        let v = self.leaf(entry.value.clone(), self.train_params && entry.trainable);
        self.params
            .insert(name.to_string(), (v, self.current_scope().to_string()));
        Ok(v)
    }

    /// Parameters bound so far, with the scope that first used them.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var, &str)> {
        self.params
            .iter()
            .map(|(n, (v, s))| (n.as_str(), *v, s.as_str()))
    }

    /// Gradients of every bound trainable parameter (zeros if unreached).
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (name, (v, _)) in &self.params {
            let node = &self.nodes[v.0];
            if !node.requires_grad {
                continue;
            }
            let data = node
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            out.insert(
                name.clone(),
                Tensor::new(node.value.shape(), data).expect("grad matches value"),
            );
        }
        out
    }

    /// Instrumented costs: op counts grouped by scope, plus the sizes of the
    /// bound parameters attributed to the scope that first used them.
    pub fn cost_report(&self) -> CostReport {
        let ops = self.records.iter().map(|r| LayerCost {
            name: r.scope.clone(),
            params: 0,
            mult_adds: r.mult_adds,
            flops: r.flops,
        });
        let params = self.params.values().map(|(v, scope)| LayerCost {
            name: scope.clone(),
            params: self.nodes[v.0].value.len() as u64,
            mult_adds: 0,
            flops: 0,
        });
        CostReport::from_layers(ops.chain(params))
    }

    // ---- execution ----------------------------------------------------

    fn push(&mut self, op: Op) -> Result<Var> {
        let c = self.compute(&op)?;
        if !c.value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let var = Var(self.nodes.len());
        self.records.push(OpRecord {
            var,
            op: op.name(),
            scope: self.current_scope().to_string(),
            mult_adds: c.mult_adds,
            flops: c.flops,
        });
        self.nodes.push(Node {
            value: c.value,
            op,
            saved: c.saved,
            requires_grad,
            grad: None,
        });
        Ok(var)
    }

    /// Re-executes every recorded op from the recorded leaves and returns the
    /// recomputed node values in tape order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut fresh = Graph::new();
        for node in &self.nodes {
            match &node.op {
                Op::Leaf => {
                    fresh.leaf(node.value.clone(), false);
                }
                op => {
                    fresh.push(op.clone())?;
                }
            }
        }
        Ok(fresh.nodes.into_iter().map(|n| n.value).collect())
    }

    fn compute(&self, op: &Op) -> Result<Computed> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not computed"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                same_shape(a, b, op.name())?;
                let f: fn(Scalar, Scalar) -> Scalar = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Computed::pointwise(Tensor::new(a.shape(), data)?)
            }
            Op::AddBroadcast(a, b) => {
                let (a, b) = (val(a), val(b));
                if !a.shape().ends_with(b.shape()) {
                    bail!(Dimension, "cannot broadcast {:?} onto {:?}", b.shape(), a.shape());
                }
                let n = b.len();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x + b.data()[i % n])
                    .collect();
                Computed::pointwise(Tensor::new(a.shape(), data)?)
            }
            Op::Scale(a, s) => {
                let a = val(a);
                let data = a.data().iter().map(|x| x * s).collect();
                Computed::pointwise(Tensor::new(a.shape(), data)?)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.rank() < 1 || b.rank() != 2 || a.last_dim() != b.shape()[0] {
                    bail!(Dimension, "matmul {:?} x {:?}", a.shape(), b.shape());
                }
                let (k, n) = (b.shape()[0], b.shape()[1]);
                let m = a.len() / k;
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                Computed::macs(Tensor::new(&shape, out)?, (m * k * n) as u64)
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (a, b) = (val(a), val(b));
                let (g, m, k, n) = bmm_dims(a.shape(), b.shape(), *trans_b)?;
                let mut out = vec![0.0; g * m * n];
                for i in 0..g {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        *trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
                Computed::macs(Tensor::new(&[g, m, n], out)?, (g * m * k * n) as u64)
            }
            Op::Unary(a, u) => {
                let a = val(a);
                let f: fn(Scalar) -> Scalar = match u {
                    Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
                    Unary::Gelu => |x| 0.5 * x * (1.0 + scalar::erf(x * core::f64::consts::FRAC_1_SQRT_2 as Scalar)),
                    Unary::Tanh => scalar::tanh,
                    Unary::Sigmoid => scalar::sigmoid,
                };
                let data = a.data().iter().map(|&x| f(x)).collect();
                Computed::pointwise(Tensor::new(a.shape(), data)?)
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let a = val(a);
                let d = a.last_dim();
                let mut out = a.data().to_vec();
                let log = matches!(op, Op::LogSoftmax(_));
                for row in out.chunks_mut(d) {
                    let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x -= max;
                        sum += scalar::exp(*x);
                    }
                    if log {
                        let ls = scalar::log(sum);
                        row.iter_mut().for_each(|x| *x -= ls);
                    } else {
                        row.iter_mut().for_each(|x| *x = scalar::exp(*x) / sum);
                    }
                }
                let n = out.len() as u64;
                Computed::new(Tensor::new(a.shape(), out)?).flops(SOFTMAX_FLOPS * n)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta) = (val(x), val(gamma), val(beta));
                let d = x.last_dim();
                if gamma.shape() != [d] || beta.shape() != [d] {
                    bail!(Dimension, "layer_norm affine must be [{d}]");
                }
                let mut out = vec![0.0; x.len()];
                let mut stats = Vec::with_capacity(2 * x.len() / d);
                for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
                    let mean = row.iter().sum::<Scalar>() / d as Scalar;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
                    let rstd = 1.0 / scalar::sqrt(var + eps);
                    for i in 0..d {
                        o[i] = (row[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
                    }
                    stats.push(mean);
                    stats.push(rstd);
                }
                let n = out.len() as u64;
                Computed::new(Tensor::new(x.shape(), out)?)
                    .flops(LAYER_NORM_FLOPS * n)
                    .saving(Saved::Scalars(stats))
            }
            Op::ConvSpatial { x, kernel, stride } => {
                let (x, k) = (val(x), val(kernel));
                let (geom, frames, b, t) = spatial_geom(x.shape(), k.shape(), *stride)?;
                let out = kernels::conv_spatial_forward(x.data(), k.data(), frames, &geom);
                let shape = [b, t, geom.out_h(), geom.out_w(), geom.c_out];
                let macs = (frames * geom.out_h() * geom.out_w() * geom.c_out * 9 * geom.c_in) as u64;
                Computed::macs(Tensor::new(&shape, out)?, macs)
            }
            Op::ConvTemporal { x, kernel, stride } => {
                let (x, k) = (val(x), val(kernel));
                let geom = temporal_geom(x.shape(), k.shape(), *stride)?;
                let out = kernels::conv_temporal_forward(x.data(), k.data(), &geom);
                let s = x.shape();
                let shape = [s[0], geom.out_t(), s[2], s[3], geom.c_out];
                let macs = (geom.batch * geom.out_t() * geom.pixels * geom.c_out * 3 * geom.c_in) as u64;
                Computed::macs(Tensor::new(&shape, out)?, macs)
            }
            Op::MaxPool2(x) => {
                let x = val(x);
                let [b, t, h, w, c] = rank5(x.shape(), "maxpool_spatial")?;
                if h % 2 != 0 || w % 2 != 0 {
                    bail!(Dimension, "maxpool_spatial needs even extents, got {h}x{w}");
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(b * t * oh * ow * c);
                let mut arg = Vec::with_capacity(out.capacity());
                for f in 0..b * t {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = usize::MAX;
                                let mut best_v = Scalar::NEG_INFINITY;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let i = ((f * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                    if best == usize::MAX || x.data()[i] > best_v {
                                        best = i;
                                        best_v = x.data()[i];
                                    }
                                }
                                out.push(best_v);
                                arg.push(best);
                            }
                        }
                    }
                }
                let n = out.len() as u64;
                Computed::new(Tensor::new(&[b, t, oh, ow, c], out)?)
                    .flops(MAXPOOL_FLOPS * n)
                    .saving(Saved::Indices(arg))
            }
            Op::SpatialMean(x) => {
                let x = val(x);
                let [b, t, h, w, c] = rank5(x.shape(), "spatial_mean")?;
                let mut out = vec![0.0; b * t * c];
                let px = h * w;
                for f in 0..b * t {
                    for p in 0..px {
                        let src = &x.data()[(f * px + p) * c..(f * px + p + 1) * c];
                        for (o, s) in out[f * c..(f + 1) * c].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= px as Scalar);
                Computed::new(Tensor::new(&[b, t, c], out)?).flops(x.len() as u64)
            }
            Op::Reshape(_) => unreachable!("reshape is pushed directly"),
            Op::Concat(a, b) => {
                let (a, b) = (val(a), val(b));
                let (da, db) = (a.last_dim(), b.last_dim());
                let lead_a = &a.shape()[..a.rank().saturating_sub(1)];
                if a.rank() == 0 || lead_a != &b.shape()[..b.rank().saturating_sub(1)] {
                    bail!(Dimension, "concat {:?} with {:?}", a.shape(), b.shape());
                }
                let mut out = Vec::with_capacity(a.len() + b.len());
                for (ra, rb) in a.data().chunks(da).zip(b.data().chunks(db)) {
                    out.extend_from_slice(ra);
                    out.extend_from_slice(rb);
                }
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = da + db;
                Computed::new(Tensor::new(&shape, out)?)
            }
            Op::StackRows(parts) => {
                let ts: Vec<&Tensor> = parts.iter().map(val).collect();
                Computed::new(Tensor::stack_first(&ts)?)
            }
            Op::Slice { x, start, len } => {
                let x = val(x);
                let d = x.last_dim();
                if *len == 0 || start + len > d {
                    bail!(Dimension, "slice {}..{} of width {}", start, start + len, d);
                }
                let out = x
                    .data()
                    .chunks(d)
                    .flat_map(|r| r[*start..start + len].iter().copied())
                    .collect();
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                Computed::new(Tensor::new(&shape, out)?)
            }
            Op::SplitHeads { x, heads } => {
                let x = val(x);
                let [g, s, d] = rank3(x.shape(), "split_heads")?;
                if *heads == 0 || d % heads != 0 {
                    bail!(Config, "width {d} is not divisible by {heads} heads");
                }
                let dh = d / heads;
                let mut out = vec![0.0; x.len()];
                for gi in 0..g {
                    for si in 0..s {
                        for h in 0..*heads {
                            let src = (gi * s + si) * d + h * dh;
                            let dst = ((gi * heads + h) * s + si) * dh;
                            out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
                        }
                    }
                }
                Computed::new(Tensor::new(&[g * heads, s, dh], out)?)
            }
            Op::MergeHeads { x, heads } => {
                let x = val(x);
                let [gh, s, dh] = rank3(x.shape(), "merge_heads")?;
                if *heads == 0 || gh % heads != 0 {
                    bail!(Dimension, "{gh} head groups not divisible by {heads}");
                }
                let g = gh / heads;
                let d = dh * heads;
                let mut out = vec![0.0; x.len()];
                for gi in 0..g {
                    for si in 0..s {
                        for h in 0..*heads {
                            let dst = (gi * s + si) * d + h * dh;
                            let src = ((gi * heads + h) * s + si) * dh;
                            out[dst..dst + dh].copy_from_slice(&x.data()[src..src + dh]);
                        }
                    }
                }
                Computed::new(Tensor::new(&[g, s, d], out)?)
            }
            Op::PrependToken { x, token } => {
                let (x, tok) = (val(x), val(token));
                let [g, s, d] = rank3(x.shape(), "prepend_token")?;
                if tok.shape() != [d] {
                    bail!(Dimension, "token {:?} for width {d}", tok.shape());
                }
                let mut out = Vec::with_capacity(g * (s + 1) * d);
                for gi in 0..g {
                    out.extend_from_slice(tok.data());
                    out.extend_from_slice(&x.data()[gi * s * d..(gi + 1) * s * d]);
                }
                Computed::new(Tensor::new(&[g, s + 1, d], out)?)
            }
            Op::SelectToken { x, index } => {
                let x = val(x);
                let [g, s, d] = rank3(x.shape(), "select_token")?;
                if *index >= s {
                    bail!(Dimension, "token {index} of {s}");
                }
                let out = (0..g)
                    .flat_map(|gi| {
                        let o = (gi * s + index) * d;
                        x.data()[o..o + d].iter().copied()
                    })
                    .collect();
                Computed::new(Tensor::new(&[g, d], out)?)
            }
            Op::Embedding { table, ids } => {
                let t = val(table);
                let [v, d] = rank2(t.shape(), "embedding")?;
                if ids.is_empty() {
                    bail!(Input, "embedding lookup of zero ids");
                }
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        bail!(Input, "token id {id} outside vocabulary of {v}");
                    }
                    out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
                }
                Computed::new(Tensor::new(&[ids.len(), d], out)?)
            }
            Op::PairAdd(a, b) => {
                let (a, b) = (val(a), val(b));
                let (nb, t, u, h) = pair_dims(a.shape(), b.shape())?;
                let mut out = Vec::with_capacity(nb * t * u * h);
                for bi in 0..nb {
                    for ti in 0..t {
                        let ra = &a.data()[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                        for ui in 0..u {
                            let rb = &b.data()[(bi * u + ui) * h..(bi * u + ui + 1) * h];
                            out.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
                        }
                    }
                }
                let shape: Vec<usize> = if a.rank() == 2 {
                    vec![t, u, h]
                } else {
                    vec![nb, t, u, h]
                };
                Computed::pointwise(Tensor::new(&shape, out)?)
            }
            Op::Sum(x) | Op::Mean(x) => {
                let x = val(x);
                let mut s: Scalar = x.data().iter().sum();
                if matches!(op, Op::Mean(_)) {
                    s /= x.len() as Scalar;
                }
                Computed::new(Tensor::scalar(s)).flops(x.len() as u64)
            }
            Op::Objective { x, f } => {
                let x = val(x);
                let (value, grad) = f.eval(x)?;
                if grad.len() != x.len() {
                    bail!(Contract, "{} returned a gradient of the wrong size", f.name());
                }
                Computed::new(Tensor::scalar(value))
                    .flops(f.flops(x.shape()))
                    .saving(Saved::Scalars(grad))
            }
        })
    }

    // ---- op constructors ---------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::AddBroadcast(a, b))
    }
    pub fn scale(&mut self, a: Var, s: Scalar) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.push(Op::BatchMatMul { a, b, trans_b })
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Unary(a, Unary::Relu))
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Unary(a, Unary::Gelu))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Unary(a, Unary::Tanh))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Unary(a, Unary::Sigmoid))
    }
    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmax(a))
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Scalar) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }
    pub fn conv_spatial(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.push(Op::ConvSpatial { x, kernel, stride })
    }
    pub fn conv_temporal(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.push(Op::ConvTemporal { x, kernel, stride })
    }
    pub fn maxpool_spatial(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MaxPool2(x))
    }
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SpatialMean(x))
    }
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Concat(a, b))
    }
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::StackRows(parts.to_vec()))
    }
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { x, start, len })
    }
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::SplitHeads { x, heads })
    }
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.push(Op::MergeHeads { x, heads })
    }
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        self.push(Op::PrependToken { x, token })
    }
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        self.push(Op::SelectToken { x, index })
    }
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::PairAdd(a, b))
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean(x))
    }
    pub fn objective(&mut self, x: Var, f: Arc<dyn ScalarObjective>) -> Result<Var> {
        self.push(Op::Objective { x, f })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        let var = Var(self.nodes.len());
        self.records.push(OpRecord {
            var,
            op: "reshape",
            scope: self.current_scope().to_string(),
            mult_adds: 0,
            flops: 0,
        });
        self.nodes.push(Node {
            value,
            op: Op::Reshape(x),
            saved: Saved::None,
            requires_grad,
            grad: None,
        });
        Ok(var)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into
    /// every gradient-tracking node; returns the number of ops visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            );
        }
        if !self.nodes[loss.0].requires_grad {
            bail!(Contract, "loss does not depend on any gradient-tracking leaf");
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            visited += 1;
            let contributions = self.vjp(i, &grad)?;
            for (v, g) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(visited)
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, i: usize, g: &[Scalar]) -> Result<Vec<(Var, Vec<Scalar>)>> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddBroadcast(a, b) => {
                out.push((*a, g.to_vec()));
                if self.wants(*b) {
                    let n = val(b).len();
                    let mut gb = vec![0.0; n];
                    for (j, x) in g.iter().enumerate() {
                        gb[j % n] += x;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, bv.data(), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), true, g, false, &mut gb, false);
                    out.push((*b, gb));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let (gn, m, k, n) = bmm_dims(av.shape(), bv.shape(), *trans_b)?;
                let mut ga = self.wants(*a).then(|| vec![0.0; av.len()]);
                let mut gb = self.wants(*b).then(|| vec![0.0; bv.len()]);
                for i in 0..gn {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC · Bᵀ, with B stored [k,n] or [n,k].
                        kernels::gemm(m, n, k, gi, false, bi, !*trans_b, &mut ga[i * m * k..(i + 1) * m * k], false);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B stored [n,k]: dB = dCᵀ · A.
                            kernels::gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            kernels::gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                }
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Unary(a, u) => {
                let x = val(a).data();
                let d: Vec<Scalar> = match u {
                    Unary::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                    Unary::Gelu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| {
                            let cdf = 0.5 * (1.0 + scalar::erf(x * core::f64::consts::FRAC_1_SQRT_2 as Scalar));
                            let pdf = scalar::exp(-0.5 * x * x) / scalar::sqrt(2.0 * scalar::PI);
                            g * (cdf + x * pdf)
                        })
                        .collect(),
                    Unary::Tanh => y.data().iter().zip(g).map(|(y, g)| g * (1.0 - y * y)).collect(),
                    Unary::Sigmoid => y.data().iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
                };
                out.push((*a, d));
            }
            Op::Softmax(a) => {
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), o) in y.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: Scalar = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, gx));
            }
            Op::LogSoftmax(a) => {
                let d = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), o) in y.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: Scalar = gr.iter().sum();
                    for j in 0..d {
                        o[j] = gr[j] - scalar::exp(yr[j]) * total;
                    }
                }
                out.push((*a, gx));
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let Saved::Scalars(stats) = &node.saved else {
                    unreachable!()
                };
                let (xv, gv) = (val(x), val(gamma));
                let d = xv.last_dim();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (xr, gr)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv.data()[j];
                        gg[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<Scalar>() / d as Scalar;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<Scalar>() / d as Scalar;
                    for j in 0..d {
                        gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                out.push((*x, gx));
                out.push((*gamma, gg));
                out.push((*beta, gbeta));
            }
            Op::ConvSpatial { x, kernel, stride } => {
                let (xv, kv) = (val(x), val(kernel));
                let (geom, frames, ..) = spatial_geom(xv.shape(), kv.shape(), *stride)?;
                let (dx, dk) = kernels::conv_spatial_backward(
                    xv.data(),
                    kv.data(),
                    g,
                    frames,
                    &geom,
                    self.wants(*x),
                    self.wants(*kernel),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*kernel, d)));
            }
            Op::ConvTemporal { x, kernel, stride } => {
                let (xv, kv) = (val(x), val(kernel));
                let geom = temporal_geom(xv.shape(), kv.shape(), *stride)?;
                let (dx, dk) = kernels::conv_temporal_backward(
                    xv.data(),
                    kv.data(),
                    g,
                    &geom,
                    self.wants(*x),
                    self.wants(*kernel),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*kernel, d)));
            }
            Op::MaxPool2(x) => {
                let Saved::Indices(arg) = &node.saved else {
                    unreachable!()
                };
                let mut gx = vec![0.0; val(x).len()];
                for (&i, &gv) in arg.iter().zip(g) {
                    gx[i] += gv;
                }
                out.push((*x, gx));
            }
            Op::SpatialMean(x) => {
                let xv = val(x);
                let s = xv.shape();
                let (px, c) = (s[2] * s[3], s[4]);
                let mut gx = vec![0.0; xv.len()];
                for f in 0..s[0] * s[1] {
                    for p in 0..px {
                        for ch in 0..c {
                            gx[(f * px + p) * c + ch] = g[f * c + ch] / px as Scalar;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat(a, b) => {
                let (da, db) = (val(a).last_dim(), val(b).last_dim());
                let mut ga = Vec::with_capacity(val(a).len());
                let mut gb = Vec::with_capacity(val(b).len());
                for row in g.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(p).len();
                    out.push((*p, g[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Slice { x, start, len } => {
                let d = val(x).last_dim();
                let mut gx = vec![0.0; val(x).len()];
                for (row, gr) in gx.chunks_mut(d).zip(g.chunks(*len)) {
                    row[*start..start + len].copy_from_slice(gr);
                }
                out.push((*x, gx));
            }
            Op::SplitHeads { x, heads } => {
                let s = val(x).shape();
                let (gn, sn, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let mut gx = vec![0.0; g.len()];
                for gi in 0..gn {
                    for si in 0..sn {
                        for h in 0..*heads {
                            let dst = (gi * sn + si) * d + h * dh;
                            let src = ((gi * heads + h) * sn + si) * dh;
                            gx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::MergeHeads { x, heads } => {
                let s = val(x).shape();
                let (gh, sn, dh) = (s[0], s[1], s[2]);
                let d = dh * heads;
                let mut gx = vec![0.0; g.len()];
                for gi in 0..gh / heads {
                    for si in 0..sn {
                        for h in 0..*heads {
                            let src = (gi * sn + si) * d + h * dh;
                            let dst = ((gi * heads + h) * sn + si) * dh;
                            gx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::PrependToken { x, token } => {
                let s = val(x).shape();
                let (gn, sn, d) = (s[0], s[1], s[2]);
                let mut gx = Vec::with_capacity(val(x).len());
                let mut gt = vec![0.0; d];
                for gi in 0..gn {
                    let base = gi * (sn + 1) * d;
                    for (t, v) in gt.iter_mut().zip(&g[base..base + d]) {
                        *t += v;
                    }
                    gx.extend_from_slice(&g[base + d..base + (sn + 1) * d]);
                }
                out.push((*x, gx));
                out.push((*token, gt));
            }
            Op::SelectToken { x, index } => {
                let s = val(x).shape();
                let (gn, sn, d) = (s[0], s[1], s[2]);
                let mut gx = vec![0.0; val(x).len()];
                for gi in 0..gn {
                    let o = (gi * sn + index) * d;
                    gx[o..o + d].copy_from_slice(&g[gi * d..(gi + 1) * d]);
                }
                out.push((*x, gx));
            }
            Op::Embedding { table, ids } => {
                let d = val(table).shape()[1];
                let mut gt = vec![0.0; val(table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                out.push((*table, gt));
            }
            Op::PairAdd(a, b) => {
                let (nb, t, u, h) = pair_dims(val(a).shape(), val(b).shape())?;
                let mut ga = vec![0.0; nb * t * h];
                let mut gb = vec![0.0; nb * u * h];
                for bi in 0..nb {
                    for ti in 0..t {
                        for ui in 0..u {
                            let o = ((bi * t + ti) * u + ui) * h;
                            for j in 0..h {
                                ga[(bi * t + ti) * h + j] += g[o + j];
                                gb[(bi * u + ui) * h + j] += g[o + j];
                            }
                        }
                    }
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(x).len()])),
            Op::Mean(x) => {
                let n = val(x).len();
                out.push((*x, vec![g[0] / n as Scalar; n]));
            }
            Op::Objective { x, .. } => {
                let Saved::Scalars(grad) = &node.saved else {
                    unreachable!()
                };
                out.push((*x, grad.iter().map(|v| v * g[0]).collect()));
            }
        }
        Ok(out)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Dimension, "{op}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

/// `(batch, t, u, width)` for `[t, h] + [u, h]` or `[b, t, h] + [b, u, h]`.
fn pair_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        ([t, h], [u, h2]) if h == h2 => Ok((1, *t, *u, *h)),
        ([nb, t, h], [nb2, u, h2]) if nb == nb2 && h == h2 => Ok((*nb, *t, *u, *h)),
        _ => bail!(Dimension, "pair_add of {a:?} and {b:?}"),
    }
}

fn rank2(s: &[usize], op: &str) -> Result<[usize; 2]> {
    s.try_into()
        .map_err(|_| Error::Dimension(alloc::format!("{op} expects rank 2, got {s:?}")))
}

fn rank3(s: &[usize], op: &str) -> Result<[usize; 3]> {
    s.try_into()
        .map_err(|_| Error::Dimension(alloc::format!("{op} expects rank 3, got {s:?}")))
}

fn rank5(s: &[usize], op: &str) -> Result<[usize; 5]> {
    s.try_into()
        .map_err(|_| Error::Dimension(alloc::format!("{op} expects [b,t,h,w,c], got {s:?}")))
}

fn bmm_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    let [g, m, k] = rank3(a, "batch_matmul")?;
    let [g2, b1, b2] = rank3(b, "batch_matmul")?;
    let (kb, n) = if trans_b { (b2, b1) } else { (b1, b2) };
    if g != g2 || k != kb {
        bail!(Dimension, "batch_matmul {a:?} x {b:?} (trans_b={trans_b})");
    }
    Ok((g, m, k, n))
}

fn spatial_geom(x: &[usize], k: &[usize], stride: usize) -> Result<(SpatialGeom, usize, usize, usize)> {
    let [b, t, h, w, c] = rank5(x, "conv_spatial")?;
    let Ok([1, 3, 3, ci, co]) = <[usize; 5]>::try_from(k) else {
        bail!(Dimension, "conv_spatial kernel must be [1,3,3,c_in,c_out], got {k:?}");
    };
    if ci != c {
        bail!(Dimension, "conv_spatial kernel expects {ci} channels, input has {c}");
    }
    if stride == 0 {
        bail!(Config, "stride must be positive");
    }
    let geom = SpatialGeom {
        h,
        w,
        c_in: c,
        c_out: co,
        stride,
    };
    Ok((geom, b * t, b, t))
}

fn temporal_geom(x: &[usize], k: &[usize], stride: usize) -> Result<TemporalGeom> {
    let [b, t, h, w, c] = rank5(x, "conv_temporal")?;
    let Ok([3, 1, 1, ci, co]) = <[usize; 5]>::try_from(k) else {
        bail!(Dimension, "conv_temporal kernel must be [3,1,1,c_in,c_out], got {k:?}");
    };
    if ci != c {
        bail!(Dimension, "conv_temporal kernel expects {ci} channels, input has {c}");
    }
    if stride == 0 {
        bail!(Config, "stride must be positive");
    }
    Ok(TemporalGeom {
        batch: b,
        t,
        pixels: h * w,
        c_in: c,
        c_out: co,
        stride,
    })
}
