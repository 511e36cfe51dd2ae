//! Named parameter storage, declaration and initialization.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::bail;
use crate::scalar::{self, Scalar};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    /// Buffers (e.g. feature normalization statistics) are not trained.
    pub trainable: bool,
}

/// Parameters keyed by their full dotted name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries
            .insert(name.into(), ParamEntry { value, trainable });
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Sets every trainable tensor whose name ends with `suffix` to zero.
    pub fn zero_matching(&mut self, suffix: &str) -> usize {
        let mut n = 0;
        for (name, e) in self.entries.iter_mut() {
            if name.ends_with(suffix) {
                e.value.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }
}

/// Per-parameter gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` in name order.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        bail!(Dimension, "gradient {name} changed shape");
                    }
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                }
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: Scalar) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> Scalar {
        let sq: Scalar = self
            .grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum();
        scalar::sqrt(sq)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: Scalar) -> Scalar {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// How a declared parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: Scalar },
    Uniform { bound: Scalar },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

/// Collects parameter declarations from model constructors, in declaration
/// order, and materializes them with a seeded generator.
#[derive(Clone, Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a trainable parameter; returns its name for later lookup.
    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        self.push(name, shape, init, true)
    }

    /// Declares a non-trainable buffer.
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        self.push(name, shape, init, false)
    }

    fn push(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> String {
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "parameter {name} declared twice"
        );
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
            trainable,
        });
        name.to_string()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn initialize(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<Scalar> = match spec.init {
                Init::Zeros => alloc::vec![0.0; n],
                Init::Ones => alloc::vec![1.0; n],
                Init::XavierUniform { fan_in, fan_out } => {
                    let bound = scalar::sqrt(6.0 / (fan_in + fan_out) as Scalar);
                    (0..n).map(|_| uniform(&mut rng, bound)).collect()
                }
                Init::Uniform { bound } => (0..n).map(|_| uniform(&mut rng, bound)).collect(),
                Init::Normal { std } => (0..n).map(|_| std * standard_normal(&mut rng)).collect(),
            };
            let value = Tensor::new(&spec.shape, data).expect("declared shapes are positive");
            store.insert(spec.name.clone(), value, spec.trainable);
        }
        store
    }
}

fn uniform(rng: &mut impl Rng, bound: Scalar) -> Scalar {
    (rng.gen::<f64>() as Scalar * 2.0 - 1.0) * bound
}

/// Box-Muller draw from N(0, 1).
pub fn standard_normal(rng: &mut impl Rng) -> Scalar {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)) as Scalar
}
