use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::Params;
use crate::scalar::Scalar;

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = if total_steps == 0 {
            0
        } else {
            ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps)
        };
        Self {
            lr,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate used for step `step` (0-based).
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / decay as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// Adam over the tensors selected by `mask` (in [`Params`] order).
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    mask: Vec<bool>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new<P: Params<T>>(model: &P, mask: Vec<bool>, clip: Option<f64>) -> Result<Self> {
        let tensors = model.tensors();
        if mask.len() != tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} tensors, model has {}",
                mask.len(),
                tensors.len()
            )));
        }
        let zeros = |on: bool, t: &Tensor<T>| if on { Tensor::zeros(t.shape().to_vec()) } else { Tensor::zeros([0]) };
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: tensors.iter().zip(&mask).map(|((_, t), &on)| zeros(on, t)).collect(),
            v: tensors.iter().zip(&mask).map(|((_, t), &on)| zeros(on, t)).collect(),
            mask,
            t: 0,
        })
    }

    /// Global L2 norm of the masked gradient entries.
    pub fn grad_norm<P: Params<T>>(&self, grad: &P) -> f64 {
        grad.tensors()
            .iter()
            .zip(&self.mask)
            .filter(|(_, &on)| on)
            .map(|((_, g), _)| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn step<P: Params<T>>(&mut self, model: &mut P, grad: &P, lr: f64) -> Result<()> {
        self.t += 1;
        let scale = match self.clip {
            Some(c) => {
                let n = self.grad_norm(grad);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let grads = grad.tensors();
        for (i, (_, p)) in model.tensors_mut().into_iter().enumerate() {
            if !self.mask[i] {
                continue;
            }
            let g = grads[i].1;
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {} has shape {:?}, parameter {:?}", grads[i].0, g.shape(), p.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pj, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.f64() * scale;
                let mj = self.beta1 * m[j].f64() + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j].f64() + (1.0 - self.beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                *pj = T::of(pj.f64() - update);
            }
        }
        Ok(())
    }
}
