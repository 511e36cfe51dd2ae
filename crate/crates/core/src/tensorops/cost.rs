//! Parameter and FLOP accounting.
//!
//! Counting convention, shared by the instrumented graph and the analytic
//! per-module formulas:
//!
//! - one multiply-add (matmul, batched matmul, convolution tap) is 2 FLOPs;
//!   convolutions count every tap, including taps over zero padding;
//! - pointwise ops (add, mul, scale, activations, broadcast adds) cost
//!   1 FLOP per output element;
//! - row softmax and log-softmax cost [`SOFTMAX_FLOPS`] per element, layer
//!   normalization (affine included) [`LAYER_NORM_FLOPS`] per element;
//! - 2x2 max pooling costs [`MAXPOOL_FLOPS`] comparisons per output element,
//!   global spatial averaging 1 FLOP per input element, reductions to a
//!   scalar 1 FLOP per input element;
//! - data movement (reshape, slicing, concatenation, head split/merge,
//!   token prepend/select, embedding lookup) is free.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYER_NORM_FLOPS: u64 = 6;
pub const MAXPOOL_FLOPS: u64 = 3;

/// One-line statement of the convention, printed under profile tables.
pub const CONVENTION: &str = "1 multiply-add = 2 FLOPs; pointwise ops 1 FLOP/element; \
softmax 5 and layer-norm 6 FLOPs/element; 2x2 max-pool 3 FLOPs/output; data movement free";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub mult_adds: u64,
    pub flops: u64,
}

/// Totals plus a per-layer breakdown sorted by layer name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub params: u64,
    pub mult_adds: u64,
    pub flops: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// Builds a report whose totals are the sums of `layers`. Layers with the
    /// same name are merged; all-zero layers are dropped.
    pub fn from_layers(layers: impl IntoIterator<Item = LayerCost>) -> Self {
        let mut merged: BTreeMap<String, LayerCost> = BTreeMap::new();
        for l in layers {
            let e = merged.entry(l.name.clone()).or_insert_with(|| LayerCost {
                name: l.name.clone(),
                ..LayerCost::default()
            });
            e.params += l.params;
            e.mult_adds += l.mult_adds;
            e.flops += l.flops;
        }
        let per_layer: Vec<LayerCost> = merged
            .into_values()
            .filter(|l| l.params != 0 || l.flops != 0 || l.mult_adds != 0)
            .collect();
        Self {
            params: per_layer.iter().map(|l| l.params).sum(),
            mult_adds: per_layer.iter().map(|l| l.mult_adds).sum(),
            flops: per_layer.iter().map(|l| l.flops).sum(),
            per_layer,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = CostReport>) -> Self {
        Self::from_layers(reports.into_iter().flat_map(|r| r.per_layer))
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.per_layer.iter().find(|l| l.name == name)
    }

    /// Only the layers whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self::from_layers(
            self.per_layer
                .iter()
                .filter(|l| l.name.starts_with(prefix))
                .cloned(),
        )
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

/// Accumulates analytic counts layer by layer using the convention above.
#[derive(Debug, Default)]
pub struct CostBuilder {
    layers: Vec<LayerCost>,
}

impl CostBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layer(&mut self, name: impl Into<String>) -> LayerCounter<'_> {
        self.layers.push(LayerCost {
            name: name.into(),
            ..LayerCost::default()
        });
        LayerCounter {
            layer: self.layers.last_mut().unwrap(),
        }
    }

    pub fn finish(self) -> CostReport {
        CostReport::from_layers(self.layers)
    }
}

pub struct LayerCounter<'a> {
    layer: &'a mut LayerCost,
}

impl LayerCounter<'_> {
    pub fn params(&mut self, n: u64) -> &mut Self {
        self.layer.params += n;
        self
    }
    pub fn mult_adds(&mut self, n: u64) -> &mut Self {
        self.layer.mult_adds += n;
        self.layer.flops += 2 * n;
        self
    }
    pub fn pointwise(&mut self, n: u64) -> &mut Self {
        self.layer.flops += n;
        self
    }
    /// `rows` applications of an affine map `in_dim -> out_dim` with bias.
    pub fn linear(&mut self, rows: u64, in_dim: u64, out_dim: u64) -> &mut Self {
        self.params(in_dim * out_dim + out_dim)
            .mult_adds(rows * in_dim * out_dim)
            .pointwise(rows * out_dim)
    }
    /// Layer normalization over `rows` vectors of width `dim`, with its affine.
    pub fn layer_norm(&mut self, rows: u64, dim: u64) -> &mut Self {
        self.params(2 * dim).pointwise(LAYER_NORM_FLOPS * rows * dim)
    }
    pub fn softmax(&mut self, elems: u64) -> &mut Self {
        self.pointwise(SOFTMAX_FLOPS * elems)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_are_layer_sums() {
        let mut b = CostBuilder::new();
        b.layer("a").linear(1, 240, 512);
        b.layer("b").mult_adds(8);
        b.layer("a").pointwise(3);
        let r = b.finish();
        assert_eq!(r.per_layer.len(), 2);
        assert_eq!(r.params, 240 * 512 + 512);
        assert_eq!(r.params, 123_392);
        assert_eq!(r.flops, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(r.layer("b").unwrap().flops, 16);
    }

    #[test]
    fn zero_layers_are_dropped() {
        let r = CostReport::from_layers([LayerCost {
            name: "empty".into(),
            ..LayerCost::default()
        }]);
        assert!(r.per_layer.is_empty());
    }
}
