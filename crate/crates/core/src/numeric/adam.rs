use crate::error::{Error, Result};
use crate::numeric::params::{GradMap, ParamSet};
use crate::numeric::tensor::Tensor;
use crate::scalar::Scalar;

/// Adam with bias correction.
///
/// Moments are created lazily the first time a parameter receives a
/// gradient and always share that parameter's shape.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    first: GradMap<T>,
    second: GradMap<T>,
}

impl<T: Scalar> AdamState<T> {
    pub const DEFAULT_LR: f64 = 5e-5;

    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            first: GradMap::new(),
            second: GradMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradMap<T>) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(crate::error::shape_err("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
