//! Neural building blocks composed from graph ops.
//!
//! Each layer is constructed against a [`ParamBuilder`], which records the
//! parameter names, shapes and initializers; `forward` later resolves the
//! same names from the graph's parameter store. `cost` adds the analytic
//! counts for one forward application to a [`LayerCounter`].

use alloc::string::String;
use alloc::vec::Vec;

use super::cost::LayerCounter;
use super::graph::{Graph, Var};
use super::params::{Init, ParamBuilder};
use super::tensor::Tensor;
use crate::error::bail;
use crate::scalar::{self, Scalar};
use crate::Result;

/// Affine map `x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = pb.declare(
            &alloc::format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim,
            },
        );
        let bias = pb.declare(&alloc::format!("{name}.bias"), &[out_dim], Init::Zeros);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }

    pub fn params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn cost(&self, c: &mut LayerCounter, rows: usize) {
        c.linear(rows as u64, self.in_dim as u64, self.out_dim as u64);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
    pub eps: Scalar,
}

impl LayerNorm {
    pub const DEFAULT_EPS: Scalar = 1e-5;

    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        Self {
            gamma: pb.declare(&alloc::format!("{name}.gamma"), &[dim], Init::Ones),
            beta: pb.declare(&alloc::format!("{name}.beta"), &[dim], Init::Zeros),
            dim,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn cost(&self, c: &mut LayerCounter, rows: usize) {
        c.layer_norm(rows as u64, self.dim as u64);
    }
}

/// Scaled dot-product self-attention with `heads` heads and an output
/// projection. Attention runs independently within each group of a
/// `[groups, seq, d]` input; a `[seq, d]` input is a single group.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            bail!(Config, "model width {dim} is not divisible by {heads} heads");
        }
        Ok(Self {
            query: Linear::new(pb, &alloc::format!("{name}.query"), dim, dim),
            key: Linear::new(pb, &alloc::format!("{name}.key"), dim, dim),
            value: Linear::new(pb, &alloc::format!("{name}.value"), dim, dim),
            output: Linear::new(pb, &alloc::format!("{name}.output"), dim, dim),
            heads,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (groups, seq) = match shape.as_slice() {
            [s, d] if *d == self.dim => (1, *s),
            [gr, s, d] if *d == self.dim => (*gr, *s),
            _ => bail!(Dimension, "attention over {:?} with width {}", shape, self.dim),
        };
        let x3 = if shape.len() == 2 {
            g.reshape(x, &[1, seq, self.dim])?
        } else {
            x
        };
        let q = self.query.forward(g, x3)?;
        let k = self.key.forward(g, x3)?;
        let v = self.value.forward(g, x3)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.batch_matmul(q, k, true)?;
        let head_dim = self.dim / self.heads;
        let scores = g.scale(scores, 1.0 / scalar::sqrt(head_dim as Scalar))?;
        let weights = g.softmax(scores)?;
        let ctx = g.batch_matmul(weights, v, false)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        let out = self.output.forward(g, ctx)?;
        if shape.len() == 2 {
            g.reshape(out, &[seq, self.dim])
        } else {
            debug_assert_eq!(g.shape(out), [groups, seq, self.dim]);
            Ok(out)
        }
    }

    pub fn params(&self) -> usize {
        4 * self.query.params()
    }

    pub fn cost(&self, c: &mut LayerCounter, groups: usize, seq: usize) {
        let rows = groups * seq;
        for l in [&self.query, &self.key, &self.value] {
            l.cost(c, rows);
        }
        let head_dim = (self.dim / self.heads) as u64;
        let score_elems = (groups * self.heads * seq * seq) as u64;
        c.mult_adds(score_elems * head_dim)
            .pointwise(score_elems)
            .softmax(score_elems)
            .mult_adds(score_elems * head_dim);
        self.output.cost(c, rows);
    }
}

/// Position-wise `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(pb, &alloc::format!("{name}.up"), dim, hidden),
            down: Linear::new(pb, &alloc::format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }

    pub fn cost(&self, c: &mut LayerCounter, rows: usize) {
        self.up.cost(c, rows);
        c.pointwise((rows * self.up.out_dim) as u64);
        self.down.cost(c, rows);
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(pb, &alloc::format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(pb, &alloc::format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(pb, &alloc::format!("{name}.norm2"), dim),
            ff: FeedForward::new(pb, &alloc::format!("{name}.ff"), dim, ff_dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attention.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }

    /// Output projections of both residual branches, whose zeroing turns the
    /// block into the identity.
    pub fn residual_outputs(&self) -> [&Linear; 2] {
        [&self.attention.output, &self.ff.down]
    }

    pub fn cost(&self, c: &mut LayerCounter, groups: usize, seq: usize) {
        let rows = groups * seq;
        let d = self.attention.dim;
        self.norm1.cost(c, rows);
        self.attention.cost(c, groups, seq);
        c.pointwise((rows * d) as u64);
        self.norm2.cost(c, rows);
        self.ff.cost(c, rows);
        c.pointwise((rows * d) as u64);
    }
}

/// Standard four-gate LSTM cell (input, forget, cell, output gate order).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: String,
    pub w_hidden: String,
    pub bias: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, hidden: usize) -> Self {
        let gates = 4 * hidden;
        Self {
            w_input: pb.declare(
                &alloc::format!("{name}.w_input"),
                &[in_dim, gates],
                Init::XavierUniform {
                    fan_in: in_dim,
                    fan_out: gates,
                },
            ),
            w_hidden: pb.declare(
                &alloc::format!("{name}.w_hidden"),
                &[hidden, gates],
                Init::XavierUniform {
                    fan_in: hidden,
                    fan_out: gates,
                },
            ),
            bias: pb.declare(&alloc::format!("{name}.bias"), &[gates], Init::Zeros),
            in_dim,
            hidden,
        }
    }

    /// One step on `x: [rows, in]` with state `h, c: [rows, hidden]`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wx = g.param(&self.w_input)?;
        let wh = g.param(&self.w_hidden)?;
        let b = g.param(&self.bias)?;
        let xi = g.matmul(x, wx)?;
        let hh = g.matmul(h, wh)?;
        let z = g.add(xi, hh)?;
        let z = g.add_broadcast(z, b)?;
        let n = self.hidden;
        let i = g.slice(z, 0, n)?;
        let f = g.slice(z, n, n)?;
        let cand = g.slice(z, 2 * n, n)?;
        let o = g.slice(z, 3 * n, n)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let o = g.sigmoid(o)?;
        let cand = g.tanh(cand)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next)?;
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> (Var, Var) {
        let h = g.input(Tensor::zeros(&[rows, self.hidden]));
        let c = g.input(Tensor::zeros(&[rows, self.hidden]));
        (h, c)
    }

    pub fn params(&self) -> usize {
        (self.in_dim + self.hidden + 1) * 4 * self.hidden
    }

    /// Cost of `rows` row-steps (sequence steps times batch rows).
    pub fn cost(&self, c: &mut LayerCounter, rows: usize) {
        let (s, n) = (rows as u64, self.hidden as u64);
        c.params(self.params() as u64)
            .mult_adds(s * (self.in_dim as u64 + n) * 4 * n)
            // gate sum and bias over 4n, three sigmoids, two tanh, three
            // products and one sum over n.
            .pointwise(s * (8 * n + 9 * n));
    }
}

/// Runs `cell` over a sequence of `[rows, in]` inputs from the zero state and
/// returns the per-step hidden outputs.
pub fn lstm_sequence(g: &mut Graph, cell: &LstmCell, inputs: &[Var]) -> Result<Vec<Var>> {
    let Some(&first) = inputs.first() else {
        return Ok(Vec::new());
    };
    let rows = g.shape(first)[0];
    let (mut h, mut c) = cell.zero_state(g, rows);
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        (h, c) = cell.forward(g, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}
