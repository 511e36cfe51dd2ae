//! VGG-style (2+1)D convolutional video front-end.
//!
//! Ten convolutions in five pairs; each pair is a spatial `[1, 3, 3]` kernel
//! followed by a temporal `[3, 1, 1]` kernel, each with bias and ReLU.
//! Pairs 1, 2, 3 and 5 are followed by 2x2 spatial max pooling (pair 4 is
//! not). A global spatial average and a linear layer map every time step to
//! `output_dim` features. Time is never pooled; temporal convolutions use
//! same padding, so the number of steps is preserved.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::bail;
use crate::scalar::{self, Scalar};
use crate::tensorops::cost::LayerCounter;
use crate::tensorops::nn::Linear;
use crate::tensorops::{CostBuilder, CostReport, Graph, Init, ParamBuilder, Var};
use crate::video::CHANNELS;
use crate::Result;

pub const CONV_LAYERS: usize = 10;
pub const PAIRS: usize = CONV_LAYERS / 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Vgg21dConfig {
    /// Output channels of the 10 convolutions, spatial and temporal
    /// alternating, spatial first.
    pub layer_channels: Vec<usize>,
    /// 1-based pair indices followed by max pooling.
    pub pool_after: Vec<usize>,
    pub output_dim: usize,
    /// Square input frame side.
    pub frame: usize,
}

impl Vgg21dConfig {
    /// VGG-like channel doubling at 128x128 input.
    pub fn paper() -> Self {
        Self {
            layer_channels: vec![64, 64, 128, 128, 256, 256, 512, 512, 512, 512],
            pool_after: vec![1, 2, 3, 5],
            output_dim: 512,
            frame: 128,
        }
    }

    /// The alternative channel list "23, 64, 230, 128, 460, 256, 921, 512,
    /// 460, 512", taken verbatim as per-layer output channels.
    pub fn footnote() -> Self {
        Self {
            layer_channels: vec![23, 64, 230, 128, 460, 256, 921, 512, 460, 512],
            ..Self::paper()
        }
    }

    pub fn desk() -> Self {
        Self {
            layer_channels: vec![4, 4, 8, 8, 16, 16, 16, 16, 16, 16],
            pool_after: vec![1, 2, 3, 5],
            output_dim: 32,
            frame: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_channels.len() != CONV_LAYERS {
            bail!(
                Config,
                "vgg needs exactly {CONV_LAYERS} layer channels, got {}",
                self.layer_channels.len()
            );
        }
        if self.layer_channels.contains(&0) || self.output_dim == 0 {
            bail!(Config, "vgg channel counts must be positive");
        }
        if self.pool_after.iter().any(|&p| p == 0 || p > PAIRS) {
            bail!(Config, "pool positions must be pair indices 1..={PAIRS}");
        }
        let factor = 1usize << self.pool_after.len();
        if self.frame == 0 || !self.frame.is_multiple_of(factor) {
            bail!(
                Config,
                "frame {} cannot be halved {} times without odd extents",
                self.frame,
                self.pool_after.len()
            );
        }
        Ok(())
    }

    pub fn pools_after(&self, pair: usize) -> bool {
        self.pool_after.contains(&pair)
    }

    /// Spatial side seen by the head.
    pub fn final_extent(&self) -> usize {
        self.frame >> self.pool_after.len()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    scope: String,
    kernel: String,
    bias: String,
    spatial: bool,
    c_in: usize,
    c_out: usize,
}

impl ConvLayer {
    fn taps(&self) -> usize {
        if self.spatial {
            9
        } else {
            3
        }
    }

    fn params(&self) -> usize {
        self.taps() * self.c_in * self.c_out + self.c_out
    }
}

/// The configured network; parameters live in a [`crate::ParamStore`].
#[derive(Clone, Debug)]
pub struct Vgg21d {
    pub cfg: Vgg21dConfig,
    prefix: String,
    convs: Vec<ConvLayer>,
    head: Linear,
}

/// Analytic cost of one convolution with a `[kt, kh, kw]` kernel, same
/// padding and stride 1 over `frames` frames of `h x w` pixels, including
/// bias and ReLU.
pub fn conv_layer_cost(c: &mut LayerCounter, kernel: [usize; 3], frames: usize, h: usize, w: usize, c_in: usize, c_out: usize) {
    let taps = (kernel[0] * kernel[1] * kernel[2]) as u64;
    let out = (frames * h * w * c_out) as u64;
    c.params(taps * (c_in * c_out) as u64 + c_out as u64)
        .mult_adds(out * taps * c_in as u64)
        .pointwise(2 * out);
}

impl Vgg21d {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &Vgg21dConfig) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(CONV_LAYERS);
        let mut c_in = CHANNELS;
        for (i, &c_out) in cfg.layer_channels.iter().enumerate() {
            let spatial = i % 2 == 0;
            let scope = format!("{prefix}.conv{}", i + 1);
            let shape = if spatial { [1, 3, 3, c_in, c_out] } else { [3, 1, 1, c_in, c_out] };
            let fan_in = if spatial { 9 * c_in } else { 3 * c_in };
            let kernel = pb.declare(
                &format!("{scope}.kernel"),
                &shape,
                Init::Normal {
                    std: scalar::sqrt(2.0 / fan_in as Scalar),
                },
            );
            let bias = pb.declare(&format!("{scope}.bias"), &[c_out], Init::Zeros);
            convs.push(ConvLayer {
                scope,
                kernel,
                bias,
                spatial,
                c_in,
                c_out,
            });
            c_in = c_out;
        }
        let head = Linear::new(pb, &format!("{prefix}.head"), c_in, cfg.output_dim);
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.into(),
            convs,
            head,
        })
    }

    /// Parameter count from the layer shapes: sum of `k_t k_h k_w C_in C_out
    /// + C_out` over the convolutions, plus the head.
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvLayer::params).sum::<usize>() + self.head.params()
    }

    /// `[B, T, H, W, 3]` normalized frames to `[B, T, output_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[4] != CHANNELS {
            bail!(Dimension, "vgg input must be [B, T, H, W, 3], got {s:?}");
        }
        if s[2] != self.cfg.frame || s[3] != self.cfg.frame {
            bail!(Dimension, "vgg expects {0}x{0} frames, got {1}x{2}", self.cfg.frame, s[2], s[3]);
        }
        let mut h = x;
        for (i, layer) in self.convs.iter().enumerate() {
            g.push_scope(&layer.scope);
            let k = g.param(&layer.kernel)?;
            let b = g.param(&layer.bias)?;
            h = if layer.spatial {
                g.conv_spatial(h, k, 1)?
            } else {
                g.conv_temporal(h, k, 1)?
            };
            h = g.add_broadcast(h, b)?;
            h = g.relu(h)?;
            g.pop_scope();
            let pair = i / 2 + 1;
            if !layer.spatial && self.cfg.pools_after(pair) {
                g.push_scope(&format!("{}.pool{pair}", self.prefix));
                h = g.maxpool_spatial(h)?;
                g.pop_scope();
            }
        }
        g.push_scope(&format!("{}.head", self.prefix));
        let pooled = g.spatial_mean(h)?;
        let out = self.head.forward(g, pooled)?;
        g.pop_scope();
        Ok(out)
    }

    /// Analytic cost of one forward pass over `batch x steps` frames, with
    /// the same layer names as the instrumented scopes.
    pub fn cost(&self, batch: usize, steps: usize) -> CostReport {
        let mut b = CostBuilder::new();
        let frames = batch * steps;
        let mut side = self.cfg.frame;
        for (i, layer) in self.convs.iter().enumerate() {
            let kernel = if layer.spatial { [1, 3, 3] } else { [3, 1, 1] };
            conv_layer_cost(&mut b.layer(layer.scope.clone()), kernel, frames, side, side, layer.c_in, layer.c_out);
            let pair = i / 2 + 1;
            if !layer.spatial && self.cfg.pools_after(pair) {
                side /= 2;
                b.layer(format!("{}.pool{pair}", self.prefix))
                    .pointwise(crate::tensorops::cost::MAXPOOL_FLOPS * (frames * side * side * layer.c_out) as u64);
            }
        }
        let c = self.convs[CONV_LAYERS - 1].c_out;
        let mut head = b.layer(format!("{}.head", self.prefix));
        head.pointwise((frames * side * side * c) as u64);
        self.head.cost(&mut head, frames);
        b.finish()
    }
}
