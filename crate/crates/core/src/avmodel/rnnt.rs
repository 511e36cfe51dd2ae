//! RNN-T loss by log-space forward/backward dynamic programming.
//!
//! A lattice holds `log P(k | t, u)` for `t < T` encoder frames, `u <= U`
//! emitted labels and `k < V` symbols (blank is 0). A path moves right along
//! `u` by emitting label `y[u]` at `(t, u)`, or down along `t` by emitting
//! blank; it ends with the blank out of `(T-1, U)`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::vocab::BLANK;
use crate::error::bail;
use crate::scalar::{self, log_add, Scalar};
use crate::tensorops::{ScalarObjective, Tensor};
use crate::Result;

/// Tolerance on `|logsumexp(row)|` for a lattice row to count as normalized.
pub const NORM_TOL: Scalar = 1e-6;

/// Forward variables, backward variables and the log-likelihood of one
/// utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct RnntLattice {
    pub frames: usize,
    pub labels: Vec<usize>,
    /// `[T][U + 1]` row-major.
    pub alpha: Vec<Scalar>,
    /// `[T][U + 1]` row-major; `beta[t][u]` includes the final blank.
    pub beta: Vec<Scalar>,
    pub log_likelihood: Scalar,
}

impl RnntLattice {
    pub fn alpha(&self, t: usize, u: usize) -> Scalar {
        self.alpha[t * (self.labels.len() + 1) + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> Scalar {
        self.beta[t * (self.labels.len() + 1) + u]
    }

    /// Loss from the forward pass.
    pub fn loss_alpha(&self) -> Scalar {
        -self.log_likelihood
    }

    /// Loss from the backward pass.
    pub fn loss_beta(&self) -> Scalar {
        -self.beta[0]
    }
}

/// Read-only view of one utterance's `[T, U_pad + 1, V]` log-probabilities.
#[derive(Clone, Copy)]
struct View<'a> {
    lp: &'a [Scalar],
    /// Row stride in `u` (padded label count + 1).
    u_stride: usize,
    v: usize,
    labels: &'a [usize],
}

impl View<'_> {
    fn at(&self, t: usize, u: usize, k: usize) -> Scalar {
        self.lp[(t * self.u_stride + u) * self.v + k]
    }
    fn blank(&self, t: usize, u: usize) -> Scalar {
        self.at(t, u, BLANK)
    }
    fn label(&self, t: usize, u: usize) -> Scalar {
        self.at(t, u, self.labels[u])
    }
}

fn check_labels(labels: &[usize], v: usize) -> Result<()> {
    for &y in labels {
        if y == BLANK || y >= v {
            bail!(Input, "label id {y} is blank or outside the vocabulary of {v}");
        }
    }
    Ok(())
}

fn lattice(view: View, frames: usize) -> RnntLattice {
    let u1 = view.labels.len() + 1;
    let idx = |t: usize, u: usize| t * u1 + u;
    let mut alpha = vec![Scalar::NEG_INFINITY; frames * u1];
    for t in 0..frames {
        for u in 0..u1 {
            alpha[idx(t, u)] = if t == 0 && u == 0 {
                0.0
            } else {
                let down = if t > 0 {
                    alpha[idx(t - 1, u)] + view.blank(t - 1, u)
                } else {
                    Scalar::NEG_INFINITY
                };
                let right = if u > 0 {
                    alpha[idx(t, u - 1)] + view.label(t, u - 1)
                } else {
                    Scalar::NEG_INFINITY
                };
                log_add(down, right)
            };
        }
    }
    let last = frames - 1;
    let mut beta = vec![Scalar::NEG_INFINITY; frames * u1];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            beta[idx(t, u)] = if t == last && u == u1 - 1 {
                view.blank(t, u)
            } else {
                let down = if t < last {
                    beta[idx(t + 1, u)] + view.blank(t, u)
                } else {
                    Scalar::NEG_INFINITY
                };
                let right = if u + 1 < u1 {
                    beta[idx(t, u + 1)] + view.label(t, u)
                } else {
                    Scalar::NEG_INFINITY
                };
                log_add(down, right)
            };
        }
    }
    let log_likelihood = alpha[idx(last, u1 - 1)] + view.blank(last, u1 - 1);
    RnntLattice {
        frames,
        labels: view.labels.to_vec(),
        alpha,
        beta,
        log_likelihood,
    }
}

/// `d loss / d log_probs` in the view's padded layout (zeros outside the
/// utterance's lattice), accumulated into `grad` with weight `scale`.
fn accumulate_grad(view: View, lat: &RnntLattice, grad: &mut [Scalar], scale: Scalar) {
    let u1 = view.labels.len() + 1;
    let last = lat.frames - 1;
    let lp_total = lat.log_likelihood;
    for t in 0..lat.frames {
        for u in 0..u1 {
            let a = lat.alpha(t, u);
            let base = (t * view.u_stride + u) * view.v;
            let blank_next = if t < last {
                Some(lat.beta(t + 1, u))
            } else if u == u1 - 1 {
                Some(0.0)
            } else {
                None
            };
            if let Some(b) = blank_next {
                grad[base + BLANK] -= scale * scalar::exp(a + view.blank(t, u) + b - lp_total);
            }
            if u + 1 < u1 {
                let y = view.labels[u];
                grad[base + y] -= scale * scalar::exp(a + view.label(t, u) + lat.beta(t, u + 1) - lp_total);
            }
        }
    }
}

fn check_shape(log_probs: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let [t, u1, v] = match log_probs.shape() {
        [t, u1, v] => [*t, *u1, *v],
        s => bail!(Dimension, "lattice must be [T, U+1, V], got {s:?}"),
    };
    if u1 != labels.len() + 1 {
        bail!(Dimension, "lattice has {u1} label positions for {} labels", labels.len());
    }
    check_labels(labels, v)?;
    Ok((t, u1, v))
}

/// Forward/backward variables without the normalization check; useful for
/// finite differences, which perturb single entries.
pub fn lattice_unchecked(log_probs: &Tensor, labels: &[usize]) -> Result<RnntLattice> {
    let (_, u1, v) = check_shape(log_probs, labels)?;
    let view = View {
        lp: log_probs.data(),
        u_stride: u1,
        v,
        labels,
    };
    Ok(lattice(view, log_probs.shape()[0]))
}

/// Loss and gradient without the normalization check.
pub fn rnnt_loss_unchecked(log_probs: &Tensor, labels: &[usize]) -> Result<(Scalar, Tensor)> {
    let (_, u1, v) = check_shape(log_probs, labels)?;
    let view = View {
        lp: log_probs.data(),
        u_stride: u1,
        v,
        labels,
    };
    let lat = lattice(view, log_probs.shape()[0]);
    let mut grad = vec![0.0; log_probs.len()];
    accumulate_grad(view, &lat, &mut grad, 1.0);
    Ok((lat.loss_alpha(), Tensor::new(log_probs.shape(), grad)?))
}

/// Checks that every row in the first `frames x (u_len + 1)` corner of a
/// padded `[.., u_stride, v]` block sums to one in probability.
fn check_normalized(lp: &[Scalar], frames: usize, u_len: usize, u_stride: usize, v: usize) -> Result<()> {
    for t in 0..frames {
        for u in 0..=u_len {
            let row = &lp[(t * u_stride + u) * v..][..v];
            let lse = row.iter().fold(Scalar::NEG_INFINITY, |acc, &x| log_add(acc, x));
            if lse.abs() > NORM_TOL {
                bail!(Contract, "lattice row ({t}, {u}) is not log-normalized (logsumexp {lse})");
            }
        }
    }
    Ok(())
}

/// `-log P(labels | lattice)` summed over all monotone alignments, and its
/// gradient with respect to `log_probs` (`[T, U+1, V]`, log-softmaxed).
pub fn rnnt_loss(log_probs: &Tensor, labels: &[usize]) -> Result<(Scalar, Tensor)> {
    let (t, u1, v) = check_shape(log_probs, labels)?;
    check_normalized(log_probs.data(), t, u1 - 1, u1, v)?;
    rnnt_loss_unchecked(log_probs, labels)
}

/// Batched transducer loss over a padded `[B, T, U_max + 1, V]` lattice,
/// averaged over utterances. Entries outside each utterance's
/// `frames x (len + 1)` corner get zero gradient.
#[derive(Clone, Debug)]
pub struct RnntObjective {
    pub labels: Vec<Vec<usize>>,
    pub frames: Vec<usize>,
}

impl RnntObjective {
    pub fn new(labels: Vec<Vec<usize>>, frames: Vec<usize>) -> Result<Arc<Self>> {
        if labels.len() != frames.len() || labels.is_empty() {
            bail!(Input, "{} label sequences for {} utterances", labels.len(), frames.len());
        }
        if frames.contains(&0) {
            bail!(Input, "every utterance needs at least one frame");
        }
        Ok(Arc::new(Self { labels, frames }))
    }

    /// Per-utterance losses.
    pub fn losses(&self, x: &Tensor) -> Result<Vec<Scalar>> {
        let (views, _) = self.views(x)?;
        Ok(views
            .iter()
            .zip(&self.frames)
            .map(|(view, &t)| lattice(*view, t).loss_alpha())
            .collect())
    }

    fn views<'a>(&'a self, x: &'a Tensor) -> Result<(Vec<View<'a>>, usize)> {
        let [b, t_max, u_stride, v] = match x.shape() {
            [b, t, u, v] => [*b, *t, *u, *v],
            s => bail!(Dimension, "batched lattice must be [B, T, U+1, V], got {s:?}"),
        };
        if b != self.labels.len() {
            bail!(Dimension, "lattice batch {b} for {} utterances", self.labels.len());
        }
        let block = t_max * u_stride * v;
        let mut views = Vec::with_capacity(b);
        for (i, (labels, &frames)) in self.labels.iter().zip(&self.frames).enumerate() {
            if frames > t_max || labels.len() + 1 > u_stride {
                bail!(Dimension, "utterance {i} does not fit the padded lattice");
            }
            check_labels(labels, v)?;
            let lp = &x.data()[i * block..(i + 1) * block];
            check_normalized(lp, frames, labels.len(), u_stride, v)?;
            views.push(View {
                lp,
                u_stride,
                v,
                labels,
            });
        }
        Ok((views, block))
    }
}

impl ScalarObjective for RnntObjective {
    fn name(&self) -> &'static str {
        "rnnt_loss"
    }

    fn eval(&self, x: &Tensor) -> Result<(Scalar, Vec<Scalar>)> {
        let (views, block) = self.views(x)?;
        let scale = 1.0 / views.len() as Scalar;
        let mut grad = vec![0.0; x.len()];
        let mut total = 0.0;
        for (i, (view, &t)) in views.iter().zip(&self.frames).enumerate() {
            let lat = lattice(*view, t);
            total += lat.loss_alpha();
            accumulate_grad(*view, &lat, &mut grad[i * block..(i + 1) * block], scale);
        }
        Ok((total * scale, grad))
    }
}
