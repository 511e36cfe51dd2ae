//! RNN-T prediction and joint networks, and greedy decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::vocab::BLANK;
use crate::error::bail;
use crate::scalar::Scalar;
use crate::tensorops::cost::{CostBuilder, SOFTMAX_FLOPS};
use crate::tensorops::nn::{Linear, LstmCell};
use crate::tensorops::{Graph, Init, ParamBuilder, ParamStore, Tensor, Var};
use crate::Result;

/// Most labels emitted at one encoder frame before decoding moves on.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    /// LSTM units per layer.
    pub hidden: usize,
    pub layers: usize,
    pub joint_dim: usize,
}

impl DecoderConfig {
    /// Two LSTM layers of 2048 units.
    pub fn paper() -> Self {
        Self {
            embed_dim: 512,
            hidden: 2048,
            layers: 2,
            joint_dim: 512,
        }
    }

    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            layers: 2,
            joint_dim: 64,
        }
    }
}

/// Embedding plus stacked LSTMs over the label history. The start of every
/// history is the blank id.
#[derive(Clone, Debug)]
pub struct PredictionNet {
    prefix: String,
    pub table: String,
    pub cells: Vec<LstmCell>,
    pub vocab: usize,
}

/// Recurrent state of the prediction network for a batch of rows.
#[derive(Clone, Debug)]
pub struct PredState {
    pub hc: Vec<(Var, Var)>,
}

impl PredictionNet {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, vocab: usize, cfg: &DecoderConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.embed_dim == 0 {
            bail!(Config, "prediction network needs positive sizes");
        }
        let table = pb.declare(&format!("{prefix}.embed"), &[vocab, cfg.embed_dim], Init::Normal { std: 0.1 });
        let cells = (0..cfg.layers)
            .map(|i| {
                let in_dim = if i == 0 { cfg.embed_dim } else { cfg.hidden };
                LstmCell::new(pb, &format!("{prefix}.lstm{}", i + 1), in_dim, cfg.hidden)
            })
            .collect();
        Ok(Self {
            prefix: prefix.into(),
            table,
            cells,
            vocab,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> PredState {
        PredState {
            hc: self.cells.iter().map(|c| c.zero_state(g, rows)).collect(),
        }
    }

    /// Consumes one symbol per row; returns the top layer output `[rows, H]`.
    pub fn step(&self, g: &mut Graph, ids: &[usize], state: &mut PredState) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.vocab) {
            bail!(Input, "token id {bad} outside vocabulary of {}", self.vocab);
        }
        g.push_scope(&format!("{}.embed", self.prefix));
        let table = g.param(&self.table);
        let x = table.and_then(|t| g.embedding(t, ids));
        g.pop_scope();
        let mut x = x?;
        for (i, cell) in self.cells.iter().enumerate() {
            g.push_scope(&format!("{}.lstm{}", self.prefix, i + 1));
            let (h, c) = state.hc[i];
            let out = cell.forward(g, x, h, c);
            g.pop_scope();
            let (h, c) = out?;
            state.hc[i] = (h, c);
            x = h;
        }
        Ok(x)
    }

    /// `[B, U_max + 1, H]`: row `u` of utterance `b` has consumed blank and
    /// `labels[b][..u]`. Shorter sequences are padded with blanks, which only
    /// affects rows past their own length.
    pub fn forward(&self, g: &mut Graph, labels: &[Vec<usize>]) -> Result<Var> {
        let b = labels.len();
        if b == 0 {
            bail!(Input, "empty label batch");
        }
        let u_max = labels.iter().map(Vec::len).max().unwrap_or(0);
        let mut state = self.zero_state(g, b);
        let mut outs = Vec::with_capacity(u_max + 1);
        for u in 0..=u_max {
            let ids: Vec<usize> = labels
                .iter()
                .map(|y| if u == 0 { BLANK } else { y.get(u - 1).copied().unwrap_or(BLANK) })
                .collect();
            outs.push(self.step(g, &ids, &mut state)?);
        }
        // [U+1, B, H] -> [B, U+1, H]: merging U+1 "heads" of a single group
        // is exactly this transpose.
        let stacked = g.stack_rows(&outs)?;
        let h = self.hidden();
        let stacked = g.reshape(stacked, &[u_max + 1, b, h])?;
        let merged = g.merge_heads(stacked, u_max + 1)?;
        g.reshape(merged, &[b, u_max + 1, h])
    }

    pub fn cost(&self, c: &mut CostBuilder, batch: usize, positions: usize) {
        c.layer(format!("{}.embed", self.prefix))
            .params((self.vocab * self.cells[0].in_dim) as u64);
        for (i, cell) in self.cells.iter().enumerate() {
            cell.cost(&mut c.layer(format!("{}.lstm{}", self.prefix, i + 1)), batch * positions);
        }
    }
}

/// `log_softmax(W_o tanh(W_e enc + b_e + W_p pred) + b_o)` for every
/// `(t, u)` pair.
#[derive(Clone, Debug)]
pub struct Joint {
    prefix: String,
    pub enc: Linear,
    pub pred: String,
    pub pred_dim: usize,
    pub out: Linear,
}

impl Joint {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, enc_dim: usize, pred_dim: usize, cfg: &DecoderConfig, vocab: usize) -> Self {
        let j = cfg.joint_dim;
        Self {
            prefix: prefix.into(),
            enc: Linear::new(pb, &format!("{prefix}.enc"), enc_dim, j),
            pred: pb.declare(
                &format!("{prefix}.pred.weight"),
                &[pred_dim, j],
                Init::XavierUniform {
                    fan_in: pred_dim,
                    fan_out: j,
                },
            ),
            pred_dim,
            out: Linear::new(pb, &format!("{prefix}.out"), j, vocab),
        }
    }

    /// Pre-activation from both sides: `[B, T, J]` and `[B, U+1, J]`.
    pub fn project(&self, g: &mut Graph, enc: Var, pred: Var) -> Result<(Var, Var)> {
        g.push_scope(&self.prefix);
        let out = (|| {
            let e = self.enc.forward(g, enc)?;
            let w = g.param(&self.pred)?;
            let p = g.matmul(pred, w)?;
            Ok((e, p))
        })();
        g.pop_scope();
        out
    }

    /// Log-probabilities from already projected sides; `e: [.., T, J]` and
    /// `p: [.., U+1, J]` give `[.., T, U+1, V]`.
    pub fn combine(&self, g: &mut Graph, e: Var, p: Var) -> Result<Var> {
        g.push_scope(&self.prefix);
        let out = (|| {
            let z = g.pair_add(e, p)?;
            let z = g.tanh(z)?;
            let logits = self.out.forward(g, z)?;
            g.log_softmax(logits)
        })();
        g.pop_scope();
        out
    }

    /// `enc: [B, T, D_enc]`, `pred: [B, U+1, H]` to `[B, T, U+1, V]`.
    pub fn forward(&self, g: &mut Graph, enc: Var, pred: Var) -> Result<Var> {
        let (e, p) = self.project(g, enc, pred)?;
        self.combine(g, e, p)
    }

    pub fn cost(&self, c: &mut CostBuilder, batch: usize, steps: usize, positions: usize) {
        let j = self.enc.out_dim as u64;
        let v = self.out.out_dim as u64;
        let pairs = (batch * steps * positions) as u64;
        let mut l = c.layer(self.prefix.clone());
        self.enc.cost(&mut l, batch * steps);
        l.params(self.pred_dim as u64 * j)
            .mult_adds((batch * positions) as u64 * self.pred_dim as u64 * j)
            .pointwise(2 * pairs * j);
        self.out.cost(&mut l, pairs as usize);
        l.pointwise(SOFTMAX_FLOPS * pairs * v);
    }
}

/// Step-wise access to a transducer for greedy search.
pub trait Transducer {
    type State: Clone;
    /// State after consuming the blank start symbol.
    fn start(&self) -> Result<Self::State>;
    /// State after consuming `label`.
    fn advance(&self, state: &Self::State, label: usize) -> Result<Self::State>;
    /// `log P(. | t, state)` over the whole vocabulary.
    fn log_probs(&self, t: usize, state: &Self::State) -> Result<Vec<Scalar>>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub ids: Vec<usize>,
    /// Some frame hit [`MAX_SYMBOLS_PER_FRAME`]; the output is suspect.
    pub capped: bool,
}

/// At each frame, emits the most likely symbol while it is not blank (at
/// most [`MAX_SYMBOLS_PER_FRAME`] times), then moves to the next frame.
pub fn greedy_decode<M: Transducer>(m: &M, frames: usize) -> Result<Decoded> {
    let mut state = m.start()?;
    let mut out = Decoded {
        ids: Vec::new(),
        capped: false,
    };
    for t in 0..frames {
        let mut emitted = 0;
        loop {
            let lp = m.log_probs(t, &state)?;
            let best = argmax(&lp);
            if best == BLANK {
                break;
            }
            if emitted == MAX_SYMBOLS_PER_FRAME {
                out.capped = true;
                break;
            }
            out.ids.push(best);
            state = m.advance(&state, best)?;
            emitted += 1;
        }
    }
    Ok(out)
}

/// First index of the maximum.
pub fn argmax(xs: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A trained prediction/joint pair attached to one utterance's encoder
/// output.
pub struct NetworkTransducer<'a> {
    pub store: &'a ParamStore,
    pub pred: &'a PredictionNet,
    pub joint: &'a Joint,
    /// `W_e enc + b_e`, `[T, J]`.
    enc_proj: Tensor,
}

/// Prediction state as plain tensors: per-layer `(h, c)` and the top output.
#[derive(Clone, Debug)]
pub struct NetworkState {
    hc: Vec<(Tensor, Tensor)>,
    top: Tensor,
}

impl<'a> NetworkTransducer<'a> {
    /// `enc`: `[T, D_enc]` encoder output of one utterance.
    pub fn new(store: &'a ParamStore, pred: &'a PredictionNet, joint: &'a Joint, enc: &Tensor) -> Result<Self> {
        let mut g = Graph::with_params(store, false);
        let x = g.input(enc.clone());
        let e = joint.enc.forward(&mut g, x)?;
        Ok(Self {
            store,
            pred,
            joint,
            enc_proj: g.value(e).clone(),
        })
    }

    pub fn frames(&self) -> usize {
        self.enc_proj.shape()[0]
    }

    fn run(&self, state: Option<&NetworkState>, label: usize) -> Result<NetworkState> {
        let mut g = Graph::with_params(self.store, false);
        let mut st = match state {
            Some(s) => PredState {
                hc: s.hc.iter().map(|(h, c)| (g.input(h.clone()), g.input(c.clone()))).collect(),
            },
            None => self.pred.zero_state(&mut g, 1),
        };
        let top = self.pred.step(&mut g, &[label], &mut st)?;
        Ok(NetworkState {
            hc: st
                .hc
                .iter()
                .map(|&(h, c)| (g.value(h).clone(), g.value(c).clone()))
                .collect(),
            top: g.value(top).clone(),
        })
    }
}

impl Transducer for NetworkTransducer<'_> {
    type State = NetworkState;

    fn start(&self) -> Result<NetworkState> {
        self.run(None, BLANK)
    }

    fn advance(&self, state: &NetworkState, label: usize) -> Result<NetworkState> {
        self.run(Some(state), label)
    }

    fn log_probs(&self, t: usize, state: &NetworkState) -> Result<Vec<Scalar>> {
        let mut g = Graph::with_params(self.store, false);
        let e = g.input(self.enc_proj.slice_first(t, 1)?);
        let top = g.input(state.top.clone());
        let w = g.param(&self.joint.pred)?;
        let p = g.matmul(top, w)?;
        let lp = self.joint.combine(&mut g, e, p)?;
        Ok(g.value(lp).data().to_vec())
    }
}
