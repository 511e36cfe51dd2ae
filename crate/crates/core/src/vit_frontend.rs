//! Tubelet transformer video front-end.
//!
//! Per time step the flattened tubelets are embedded by one shared affine
//! map, a learned pooling token is prepended (or tubelet 0 is used in its
//! place), learned absolute position vectors are added, and a pre-norm
//! transformer runs over that step's tokens only. The first output token,
//! after a final layer norm, is the step's feature vector. Temporal context
//! enters only through the tubelet windows.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::bail;
use crate::tensorops::nn::{LayerNorm, Linear, TransformerBlock};
use crate::tensorops::{CostBuilder, CostReport, Graph, Init, ParamBuilder, Var};
use crate::video::VideoGeometry;
use crate::Result;

/// Which token's final state becomes the step's feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// A learned token prepended to the tubelets.
    Token,
    /// Tubelet 0 (the top-left spatial cell).
    FirstTubelet,
}

impl PoolMode {
    pub fn name(&self) -> &'static str {
        match self {
            PoolMode::Token => "token",
            PoolMode::FirstTubelet => "first-tubelet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Self::Token),
            "first-tubelet" => Ok(Self::FirstTubelet),
            _ => bail!(Config, "unknown pool mode {s:?} (token | first-tubelet)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub pool: PoolMode,
    pub geometry: VideoGeometry,
}

impl VitConfig {
    /// 6 layers, 8 heads, width 512, FF 2048, 32x32x8 tubelets.
    pub fn paper() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            pool: PoolMode::Token,
            geometry: VideoGeometry::paper(),
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            pool: PoolMode::Token,
            geometry: VideoGeometry::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.layers == 0 || self.d_ff == 0 {
            bail!(Config, "vit needs at least one layer and a positive FF width");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            bail!(Config, "vit width {} is not divisible by {} heads", self.d_model, self.heads);
        }
        Ok(())
    }

    /// Tokens the transformer sees per step.
    pub fn seq_len(&self) -> usize {
        self.geometry.tokens() + usize::from(self.pool == PoolMode::Token)
    }
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub cfg: VitConfig,
    prefix: String,
    pub embed: Linear,
    pub positions: String,
    pub pool_token: Option<String>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl Vit {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &VitConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = Linear::new(pb, &format!("{prefix}.embed"), cfg.geometry.token_dim(), d);
        let pool_token = (cfg.pool == PoolMode::Token)
            .then(|| pb.declare(&format!("{prefix}.pos.pool_token"), &[d], Init::Normal { std: 0.02 }));
        let positions = pb.declare(&format!("{prefix}.pos.table"), &[cfg.seq_len(), d], Init::Normal { std: 0.02 });
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(pb, &format!("{prefix}.block{}", i + 1), d, cfg.heads, cfg.d_ff))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(pb, &format!("{prefix}.norm"), d);
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.into(),
            embed,
            positions,
            pool_token,
            blocks,
            norm,
        })
    }

    pub fn param_count(&self) -> usize {
        self.cost(1, 1).params as usize
    }

    /// Shared affine map over `[..., token_dim]` tubelets.
    pub fn embed_tubelets(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let dim = self.cfg.geometry.token_dim();
        if g.shape(tokens).last() != Some(&dim) {
            bail!(Dimension, "tubelets {:?} must have width {dim}", g.shape(tokens));
        }
        g.push_scope(&format!("{}.embed", self.prefix));
        let out = self.embed.forward(g, tokens);
        g.pop_scope();
        out
    }

    /// Prepends the pooling token (in token mode) to `[G, tokens, d]` and adds
    /// the position table.
    pub fn add_positional(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.push_scope(&format!("{}.pos", self.prefix));
        let out = (|| {
            let x = match &self.pool_token {
                Some(name) => {
                    let tok = g.param(name)?;
                    g.prepend_token(x, tok)?
                }
                None => x,
            };
            let table = g.param(&self.positions)?;
            add_positional(g, x, table)
        })();
        g.pop_scope();
        out
    }

    /// `[B, T, tokens, token_dim]` (or `[T, tokens, token_dim]`) tubelets to
    /// `[B, T, d_model]` (or `[T, d_model]`) features.
    pub fn forward(&self, g: &mut Graph, tubelets: Var) -> Result<Var> {
        let s = g.shape(tubelets).to_vec();
        let (n, dim) = (self.cfg.geometry.tokens(), self.cfg.geometry.token_dim());
        let lead: Vec<usize> = match s.as_slice() {
            [t, k, e] if *k == n && *e == dim => alloc::vec![*t],
            [b, t, k, e] if *k == n && *e == dim => alloc::vec![*b, *t],
            _ => bail!(Dimension, "vit input {s:?}, expected [.., T, {n}, {dim}]"),
        };
        let groups: usize = lead.iter().product();
        let x = g.reshape(tubelets, &[groups, n, dim])?;
        let x = self.embed_tubelets(g, x)?;
        let mut x = self.add_positional(g, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            g.push_scope(&format!("{}.block{}", self.prefix, i + 1));
            let out = block.forward(g, x);
            g.pop_scope();
            x = out?;
        }
        g.push_scope(&format!("{}.norm", self.prefix));
        let first = g.select_token(x, 0)?;
        let out = self.norm.forward(g, first);
        g.pop_scope();
        let mut shape = lead;
        shape.push(self.cfg.d_model);
        g.reshape(out?, &shape)
    }

    /// Analytic cost of a forward pass over `batch x steps` time steps.
    pub fn cost(&self, batch: usize, steps: usize) -> CostReport {
        let groups = batch * steps;
        let (n, d, seq) = (self.cfg.geometry.tokens(), self.cfg.d_model, self.cfg.seq_len());
        let mut b = CostBuilder::new();
        self.embed.cost(&mut b.layer(format!("{}.embed", self.prefix)), groups * n);
        b.layer(format!("{}.pos", self.prefix))
            .params((seq * d + if self.pool_token.is_some() { d } else { 0 }) as u64)
            .pointwise((groups * seq * d) as u64);
        for (i, block) in self.blocks.iter().enumerate() {
            block.cost(&mut b.layer(format!("{}.block{}", self.prefix, i + 1)), groups, seq);
        }
        self.norm.cost(&mut b.layer(format!("{}.norm", self.prefix)), groups);
        b.finish()
    }
}

/// Adds a `[S, d]` table to every group of `[G, S, d]`.
pub fn add_positional(g: &mut Graph, x: Var, table: Var) -> Result<Var> {
    let (xs, ts) = (g.shape(x), g.shape(table));
    if xs.len() != 3 || ts != &xs[1..] {
        bail!(Config, "position table {ts:?} does not match tokens {xs:?}");
    }
    g.add_broadcast(x, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_param_count() {
        let mut pb = ParamBuilder::new();
        let vit = Vit::new(&mut pb, "vit", &VitConfig::paper()).unwrap();
        assert_eq!(vit.embed.params(), 12_583_424);
        let block = 2 * 1024 + 4 * (512 * 512 + 512) + (512 * 2048 + 2048) + (2048 * 512 + 512);
        assert_eq!(block, 3_152_384);
        let want = 12_583_424 + 17 * 512 + 512 + 6 * block + 1024;
        assert_eq!(want, 31_507_968);
        assert_eq!(vit.param_count(), want);
        assert_eq!(pb.total(), want);
    }

    #[test]
    fn config_errors() {
        let mut c = VitConfig::desk();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
        assert_eq!(VitConfig::desk().seq_len(), 17);
        let mut f = VitConfig::desk();
        f.pool = PoolMode::FirstTubelet;
        assert_eq!(f.seq_len(), 16);
        assert_eq!(PoolMode::parse("first-tubelet").unwrap(), PoolMode::FirstTubelet);
    }
}
