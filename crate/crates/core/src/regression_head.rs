//! Two-layer network mapping a context vector to shape coefficients and a
//! weak-perspective camera `(s, tx, ty)`, with `s = exp(raw)`.

use rand::Rng;

use crate::camera::CameraParams;
use crate::error::{shape_err, Error, Result};
use crate::nn::{init_mlp2, mlp2, Init};
use crate::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct RegressionHead {
    context: usize,
    hidden: usize,
    betas: usize,
    prefix: String,
}

/// Graph outputs of [`RegressionHead::predict_var`].
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `(M, B)`
    pub beta: Var,
    /// `(M, 3)` as `(s, tx, ty)`
    pub cam: Var,
}

impl RegressionHead {
    pub fn new(context: usize, hidden: usize, betas: usize, prefix: impl Into<String>) -> Result<Self> {
        if context == 0 || hidden == 0 || betas == 0 {
            return Err(Error::Config("regression head extents must be positive".into()));
        }
        Ok(Self {
            context,
            hidden,
            betas,
            prefix: prefix.into(),
        })
    }

    fn name(&self) -> String {
        format!("{}mlp", self.prefix)
    }

    /// Output layer starts at zero: `β = 0`, `s = 1`, `t = 0` for any input.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        init_mlp2(&mut p, &self.name(), self.context, self.hidden, self.betas + 3, Init::Zero, rng);
        p
    }

    pub fn predict_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, c: Var) -> Result<HeadVars> {
        let s = g.shape(c).to_vec();
        if s.len() != 2 || s[1] != self.context {
            return Err(shape_err("regression_head", &s, &[0, self.context]));
        }
        let out = mlp2(g, p, &self.name(), c)?;
        let b = self.betas;
        let beta = g.slice(out, 1, 0, b)?;
        let raw_s = g.slice(out, 1, b, b + 1)?;
        let scale = g.exp(raw_s)?;
        let t = g.slice(out, 1, b + 1, b + 3)?;
        let cam = g.concat(&[scale, t], 1)?;
        Ok(HeadVars { beta, cam })
    }

    /// Per-row `(β, camera)` for contexts `(M, C)`.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        c: &Tensor<T>,
    ) -> Result<Vec<(Vec<T>, CameraParams<T>)>> {
        let mut g = Graph::new();
        let p = params.filter_prefix(&self.prefix).bind(&mut g, |_| false);
        let cv = g.constant(c.clone());
        let out = self.predict_var(&mut g, &p, cv)?;
        let beta = g.value(out.beta);
        let cam = g.value(out.cam);
        (0..c.shape()[0])
            .map(|i| {
                let cm = cam.row(i);
                Ok((beta.row(i).to_vec(), CameraParams::new(cm[0], [cm[1], cm[2]])?))
            })
            .collect()
    }
}
