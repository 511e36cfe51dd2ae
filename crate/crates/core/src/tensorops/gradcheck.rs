//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it is
//! independent of every backward implementation it checks.

use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Result, Scalar};

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared in absolute terms.
pub const REL_FLOOR: Scalar = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: Scalar,
    /// `(input, element, analytic, numeric)` of the worst element.
    pub worst: (usize, usize, Scalar, Scalar),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: Scalar) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: Scalar, b: Scalar) -> Scalar {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], eps: Scalar, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<Scalar>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[Scalar]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; g.value(v).len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<Scalar> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[i][j], numeric);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j, analytic[i][j], numeric);
            }
        }
    }
    Ok(report)
}

/// Like [`check`], for models whose weights come from a parameter store:
/// checks every element of every input and of every trainable parameter the
/// graph binds. Parameters are numbered after the inputs, in name order.
pub fn check_params<F>(store: &ParamStore, inputs: &[Tensor], eps: Scalar, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_params(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let input_grads: Vec<Vec<Scalar>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[Scalar]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; g.value(v).len()])
        })
        .collect();
    let param_grads = g.param_grads();

    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<Scalar> {
        let mut g = Graph::with_params(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut record = |slot: usize, j: usize, a: Scalar, n: Scalar| {
        let err = rel_err(a, n);
        report.checked += 1;
        if report.checked == 1 || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (slot, j, a, n);
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(store, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(store, &work)?;
            work[i].data_mut()[j] = orig;
            record(i, j, input_grads[i][j], (plus - minus) / (2.0 * eps));
        }
    }
    let mut local = store.clone();
    for (k, (name, grad)) in param_grads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = local.get(name).unwrap().data()[j];
            local.get_mut(name).unwrap().data_mut()[j] = orig + eps;
            let plus = eval(&local, inputs)?;
            local.get_mut(name).unwrap().data_mut()[j] = orig - eps;
            let minus = eval(&local, inputs)?;
            local.get_mut(name).unwrap().data_mut()[j] = orig;
            record(inputs.len() + k, j, grad.data()[j], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

type Case = (&'static str, Vec<Tensor>, alloc::boxed::Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum of `y`, so that every element carries its own upstream
/// gradient.
fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.input(uniform(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

macro_rules! case {
    ($name:literal, [$($x:expr),*], |$g:ident, $v:ident| $body:expr) => {
        (
            $name,
            alloc::vec![$($x),*],
            alloc::boxed::Box::new(move |$g: &mut Graph, $v: &[Var]| -> Result<Var> {
                let y = $body?;
                weighted($g, y, 7)
            }),
        )
    };
}

/// Central-difference checks of every differentiable graph op on small
/// random inputs, one report per op and input configuration.
pub fn op_suite(eps: Scalar) -> Result<Vec<(&'static str, GradCheck)>> {
    let r = uniform;
    let cases: Vec<Case> = alloc::vec![
        case!("add", [r(&[3, 4], 1), r(&[3, 4], 2)], |g, v| g.add(v[0], v[1])),
        case!("sub", [r(&[3, 4], 1), r(&[3, 4], 2)], |g, v| g.sub(v[0], v[1])),
        case!("mul", [r(&[2, 5], 1), r(&[2, 5], 2)], |g, v| g.mul(v[0], v[1])),
        case!("scale", [r(&[2, 3], 1)], |g, v| g.scale(v[0], -1.7)),
        case!("relu", [r(&[3, 4], 3)], |g, v| g.relu(v[0])),
        case!("gelu", [r(&[3, 4], 3)], |g, v| g.gelu(v[0])),
        case!("tanh", [r(&[3, 4], 3)], |g, v| g.tanh(v[0])),
        case!("sigmoid", [r(&[3, 4], 3)], |g, v| g.sigmoid(v[0])),
        case!("softmax", [r(&[3, 4], 4)], |g, v| g.softmax(v[0])),
        case!("log_softmax", [r(&[3, 4], 4)], |g, v| g.log_softmax(v[0])),
        case!("add_broadcast", [r(&[2, 3, 4], 5), r(&[4], 6)], |g, v| g.add_broadcast(v[0], v[1])),
        case!("layer_norm", [r(&[3, 5], 7), r(&[5], 8), r(&[5], 9)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case!("mean", [r(&[3, 4], 10)], |g, v| g.mean(v[0])),
        case!("sum", [r(&[3, 4], 10)], |g, v| g.sum(v[0])),
        case!("matmul", [r(&[3, 4], 11), r(&[4, 2], 12)], |g, v| g.matmul(v[0], v[1])),
        case!("matmul_batched_lhs", [r(&[2, 3, 4], 11), r(&[4, 2], 12)], |g, v| g.matmul(v[0], v[1])),
        case!("batch_matmul", [r(&[2, 3, 4], 13), r(&[2, 4, 2], 14)], |g, v| g.batch_matmul(v[0], v[1], false)),
        case!("batch_matmul_t", [r(&[2, 3, 4], 13), r(&[2, 2, 4], 14)], |g, v| g.batch_matmul(v[0], v[1], true)),
        case!("conv_spatial", [r(&[1, 2, 4, 4, 2], 15), r(&[1, 3, 3, 2, 3], 16)], |g, v| g.conv_spatial(v[0], v[1], 1)),
        case!("conv_spatial_stride2", [r(&[1, 2, 5, 5, 2], 15), r(&[1, 3, 3, 2, 2], 16)], |g, v| g.conv_spatial(v[0], v[1], 2)),
        case!("conv_temporal", [r(&[2, 4, 2, 2, 2], 17), r(&[3, 1, 1, 2, 3], 18)], |g, v| g.conv_temporal(v[0], v[1], 1)),
        case!("conv_temporal_stride2", [r(&[1, 5, 2, 2, 2], 17), r(&[3, 1, 1, 2, 2], 18)], |g, v| g.conv_temporal(v[0], v[1], 2)),
        case!("maxpool_spatial", [r(&[1, 2, 4, 4, 2], 19)], |g, v| g.maxpool_spatial(v[0])),
        case!("spatial_mean", [r(&[1, 2, 3, 4, 2], 20)], |g, v| g.spatial_mean(v[0])),
        case!("concat", [r(&[2, 3, 4], 21), r(&[2, 3, 2], 22)], |g, v| g.concat(v[0], v[1])),
        case!("slice", [r(&[2, 3, 5], 23)], |g, v| g.slice(v[0], 1, 3)),
        case!("stack_rows", [r(&[3, 4], 24), r(&[2, 4], 25)], |g, v| g.stack_rows(&[v[0], v[1]])),
        case!("reshape", [r(&[2, 3, 4], 26)], |g, v| g.reshape(v[0], &[6, 4])),
        case!("split_heads", [r(&[2, 3, 4], 27)], |g, v| g.split_heads(v[0], 2)),
        case!("merge_heads", [r(&[4, 3, 2], 28)], |g, v| g.merge_heads(v[0], 2)),
        case!("prepend_token", [r(&[2, 3, 4], 29), r(&[4], 30)], |g, v| g.prepend_token(v[0], v[1])),
        case!("select_token", [r(&[2, 3, 4], 31)], |g, v| g.select_token(v[0], 2)),
        case!("embedding", [r(&[4, 3], 32)], |g, v| g.embedding(v[0], &[3, 0, 3, 1])),
        case!("pair_add", [r(&[3, 4], 33), r(&[2, 4], 34)], |g, v| g.pair_add(v[0], v[1])),
        case!("pair_add_batched", [r(&[2, 3, 4], 33), r(&[2, 2, 4], 34)], |g, v| g.pair_add(v[0], v[1])),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check(&inputs, eps, f)?)))
        .collect()
}
