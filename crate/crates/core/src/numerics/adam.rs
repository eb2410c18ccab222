//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for a list of parameters plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T: Real = f64> {
    pub hyper: AdamHyper,
    pub t: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::with_hyper(params, AdamHyper::default())
    }

    pub fn with_hyper(params: &[Tensor<T>], hyper: AdamHyper) -> Self {
        Self {
            hyper,
            t: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One Adam update of every parameter whose `active` flag is set.
    ///
    /// Moments of inactive parameters are left untouched. The step count
    /// advances once per call. A non-finite gradient aborts before any
    /// parameter is modified.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
        active: Option<&[bool]>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: param {i} shape {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if active.is_none_or(|a| a[i]) && !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in parameter {i}")));
            }
        }

        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (ob1, ob2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let (c1, c2) = (T::lit(bc1), T::lit(bc2));
        let (lr, eps) = (T::lit(lr), T::lit(eps));

        for i in 0..params.len() {
            if !active.is_none_or(|a| a[i]) {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params[i].data_mut();
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *mj = b1 * *mj + ob1 * gj;
                *vj = b2 * *vj + ob2 * gj * gj;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
