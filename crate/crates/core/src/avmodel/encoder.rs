//! Modality fusion and the transformer encoder over time.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::bail;
use crate::tensorops::cost::CostBuilder;
use crate::tensorops::nn::{LayerNorm, Linear, TransformerBlock};
use crate::tensorops::{Graph, ParamBuilder, Tensor, Var};
use crate::Result;

fn check_sync(a: &[usize], v: &[usize]) -> Result<()> {
    if a.len() != v.len() || a.len() < 2 {
        bail!(Dimension, "fusion inputs {a:?} and {v:?} must have the same rank");
    }
    let k = a.len() - 1;
    if a[..k - 1] != v[..k - 1] {
        bail!(Dimension, "fusion batch extents differ: {a:?} vs {v:?}");
    }
    if a[k - 1] != v[k - 1] {
        bail!(Sync, "audio has {} steps but video has {}", a[k - 1], v[k - 1]);
    }
    Ok(())
}

/// Channel concatenation, audio first: `[.., T, D_a] ++ [.., T, D_v]`.
pub fn fuse_concat(audio: &Tensor, video: &Tensor) -> Result<Tensor> {
    check_sync(audio.shape(), video.shape())?;
    let (da, dv) = (audio.last_dim(), video.last_dim());
    let mut out = Vec::with_capacity(audio.len() + video.len());
    for (a, v) in audio.data().chunks(da).zip(video.data().chunks(dv)) {
        out.extend_from_slice(a);
        out.extend_from_slice(v);
    }
    let mut shape = audio.shape().to_vec();
    *shape.last_mut().unwrap() = da + dv;
    Tensor::new(&shape, out)
}

/// Inverse of [`fuse_concat`] given the audio width.
pub fn split_fused(fused: &Tensor, audio_dim: usize) -> Result<(Tensor, Tensor)> {
    let d = fused.last_dim();
    if audio_dim == 0 || audio_dim >= d {
        bail!(Dimension, "cannot split width {d} at {audio_dim}");
    }
    let (mut a, mut v) = (Vec::new(), Vec::new());
    for row in fused.data().chunks(d) {
        a.extend_from_slice(&row[..audio_dim]);
        v.extend_from_slice(&row[audio_dim..]);
    }
    let mut sa = fused.shape().to_vec();
    let mut sv = sa.clone();
    *sa.last_mut().unwrap() = audio_dim;
    *sv.last_mut().unwrap() = d - audio_dim;
    Ok((Tensor::new(&sa, a)?, Tensor::new(&sv, v)?))
}

/// Graph version of [`fuse_concat`].
pub fn fuse(g: &mut Graph, audio: Var, video: Var) -> Result<Var> {
    check_sync(g.shape(audio), g.shape(video))?;
    g.concat(audio, video)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            layers: 14,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 128,
        }
    }
}

/// Input projection, pre-norm self-attention blocks over time, final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    prefix: String,
    pub input: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, in_dim: usize, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        let input = Linear::new(pb, &format!("{prefix}.input"), in_dim, d);
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(pb, &format!("{prefix}.block{}", i + 1), d, cfg.heads, cfg.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(pb, &format!("{prefix}.norm"), d);
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.into(),
            input,
            blocks,
            norm,
        })
    }

    /// `[B, T, in]` to `[B, T, d_model]`; attention spans each utterance's
    /// steps only.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).len() != 3 {
            bail!(Dimension, "encoder input must be [B, T, D], got {:?}", g.shape(x));
        }
        g.push_scope(&format!("{}.input", self.prefix));
        let h = self.input.forward(g, x);
        g.pop_scope();
        let mut h = h?;
        for (i, block) in self.blocks.iter().enumerate() {
            g.push_scope(&format!("{}.block{}", self.prefix, i + 1));
            let out = block.forward(g, h);
            g.pop_scope();
            h = out?;
        }
        g.push_scope(&format!("{}.norm", self.prefix));
        let out = self.norm.forward(g, h);
        g.pop_scope();
        out
    }

    pub fn cost(&self, b: &mut CostBuilder, batch: usize, steps: usize) {
        let rows = batch * steps;
        self.input.cost(&mut b.layer(format!("{}.input", self.prefix)), rows);
        for (i, block) in self.blocks.iter().enumerate() {
            block.cost(&mut b.layer(format!("{}.block{}", self.prefix, i + 1)), batch, steps);
        }
        self.norm.cost(&mut b.layer(format!("{}.norm", self.prefix)), rows);
    }
}
