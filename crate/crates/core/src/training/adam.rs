//! Adam with bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{self, Scalar};
use crate::tensorops::{Gradients, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    /// Completed update count.
    pub t: u64,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (Vec<Scalar>, Vec<Scalar>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter named in `grads`. Fails without touching
    /// anything if a gradient is not finite or does not match its parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: Scalar) -> Result<()> {
        let step = self.t + 1;
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("non-finite gradient for {name}"),
                });
            }
            match store.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                _ => {
                    return Err(Error::Training {
                        step,
                        msg: format!("gradient for {name} has no matching parameter"),
                    })
                }
            }
        }
        self.t = step;
        let c1 = 1.0 - scalar::powf(self.beta1, step as Scalar);
        let c2 = 1.0 - scalar::powf(self.beta2, step as Scalar);
        for (name, g) in grads.iter() {
            let p = store.get_mut(name).unwrap();
            let (m, v) = self
                .moments
                .entry(name.into())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (scalar::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::Tensor;

    fn single(value: Scalar) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], value), true);
        s
    }

    fn grad(value: Scalar) -> Gradients {
        let mut g = Gradients::default();
        g.insert("w".into(), Tensor::full(&[1], value));
        g
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(0.5);
        let mut a = Adam::new();
        for _ in 0..10 {
            a.step(&mut s, &grad(0.0), 0.1).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), &[0.5]);
    }

    #[test]
    fn first_step_is_unit_update() {
        let mut s = single(0.0);
        Adam::new().step(&mut s, &grad(1.0), 0.1).unwrap();
        // m_hat = v_hat = 1, so the update is lr / (1 + eps).
        assert!((s.get("w").unwrap().data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut s = single(0.0);
        let mut a = Adam::new();
        a.step(&mut s, &grad(1.0), 0.1).unwrap();
        let err = a.step(&mut s, &grad(Scalar::NAN), 0.1).unwrap_err();
        assert!(matches!(err, Error::Training { step: 2, .. }));
        assert_eq!(a.t, 1);
    }
}
