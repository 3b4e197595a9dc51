//! Adam with bias correction. Moment buffers mirror the parameter tensors;
//! per-element update math runs in `f64` and stores back at the parameter
//! precision, which keeps the `f32` product path deterministic and well
//! conditioned.

use super::real::Real;
use super::tensor::Tensor;
use crate::{Error, Result};

pub struct Adam<T: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64, params: &[Tensor<T>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.c(), p.h(), p.w()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.c(), p.h(), p.w()))
                .collect(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. A `None` gradient slot leaves its parameter
    /// (and moments) untouched, matching a zero gradient up to moment decay
    /// being skipped; training always supplies every slot.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = grads[i] {
                if !p.same_shape(g) {
                    return Err(Error::Shape(format!(
                        "gradient {} shape {:?} does not match parameter {:?}",
                        i,
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let Some(g) = grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].to_f64();
                let mj = self.beta1 * m[j].to_f64() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j].to_f64() + (1.0 - self.beta2) * gj * gj;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let upd = self.lr * mhat / (vhat.sqrt() + self.eps);
                p[j] = T::from_f64(p[j].to_f64() - upd);
            }
        }
        Ok(())
    }
}
