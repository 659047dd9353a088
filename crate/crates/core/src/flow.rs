//! Conditional normalizing flow `θ = f(z; c)` with a standard normal base.
//!
//! Each block adds a context-dependent shift to one half of the coordinates
//! (computed from the other half and `c`; the halves alternate between
//! blocks), then applies a context-independent LU-parametrized linear map. A final constant shift is
//! added after the last block. Shifts have unit Jacobian, so the log-det of
//! the whole map is a constant `Σ log diag(U)` and the density peaks at
//! `f(0; c)`.
//!
//! Parameters of a flow registered under prefix `p` are
//! `p{l}/cond.{0,1}.{w,b}`, `p{l}/lower`, `p{l}/upper`, `p{l}/log_diag` per
//! block `l`, plus `p{bias}`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{init_mlp2, mlp2, Init};
use crate::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Dimension of θ and z.
    pub dim: usize,
    /// Dimension of the context vector.
    pub context: usize,
    pub blocks: usize,
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dim: 48,
            context: 256,
            blocks: 4,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Flow {
    cfg: FlowConfig,
    prefix: String,
}

/// Identity 6D rotation repeated for `joints` joints.
pub fn identity_pose6d(joints: usize) -> Vec<f64> {
    [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(joints)
}

impl Flow {
    pub fn new(cfg: FlowConfig, prefix: impl Into<String>) -> Result<Self> {
        if cfg.dim < 2 || cfg.context == 0 || cfg.blocks == 0 || cfg.hidden == 0 {
            return Err(Error::Config(format!(
                "flow needs dim >= 2 and positive context, blocks, hidden; got {cfg:?}"
            )));
        }
        Ok(Self {
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn active(&self) -> usize {
        self.cfg.dim / 2
    }

    fn name(&self, block: usize, item: &str) -> String {
        format!("{}{block}/{item}", self.prefix)
    }

    fn bias_name(&self) -> String {
        format!("{}bias", self.prefix)
    }

    fn permutation(&self, block: usize) -> Vec<usize> {
        let d = self.cfg.dim;
        if block.is_multiple_of(2) {
            (0..d).collect()
        } else {
            (0..d).map(|i| (i + d / 2) % d).collect()
        }
    }

    /// Applies the block permutation (or its inverse) that decides which
    /// half of the coordinates is active.
    fn permute<T: Scalar>(&self, g: &mut Graph<T>, block: usize, x: Var, inverse: bool) -> Result<Var> {
        if block.is_multiple_of(2) {
            return Ok(x);
        }
        let perm = self.permutation(block);
        let idx = if inverse { invert(&perm) } else { perm };
        g.index_select(x, 1, &idx)
    }

    /// Identity map at initialization: zero output layers, `L = U = I`.
    /// Conditioner hidden layers are random so gradients reach them once
    /// the output layers move. `bias` defaults to zero.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, bias: Option<&[f64]>) -> Result<ParamSet<T>> {
        let d = self.cfg.dim;
        let a = self.active();
        let mut p = ParamSet::new();
        for l in 0..self.cfg.blocks {
            init_mlp2(
                &mut p,
                &self.name(l, "cond"),
                a + self.cfg.context,
                self.cfg.hidden,
                d - a,
                Init::Zero,
                rng,
            );
            p.insert(self.name(l, "lower"), Tensor::zeros(&[d, d]));
            p.insert(self.name(l, "upper"), Tensor::zeros(&[d, d]));
            p.insert(self.name(l, "log_diag"), Tensor::zeros(&[d]));
        }
        let bias = match bias {
            Some(b) if b.len() != d => return Err(shape_err("flow bias", &[b.len()], &[d])),
            Some(b) => Tensor::from_f64(&[d], b)?,
            None => Tensor::zeros(&[d]),
        };
        p.insert(self.bias_name(), bias);
        Ok(p)
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<T>, x: Var, c: Var) -> Result<usize> {
        let xs = g.shape(x);
        let cs = g.shape(c);
        if xs.len() != 2 || xs[1] != self.cfg.dim {
            return Err(shape_err("flow", xs, &[0, self.cfg.dim]));
        }
        if cs.len() != 2 || cs[1] != self.cfg.context || cs[0] != xs[0] {
            return Err(shape_err("flow context", cs, &[xs[0], self.cfg.context]));
        }
        Ok(xs[0])
    }

    /// `(L, U)` of block `l` as full matrices.
    fn lu<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, l: usize) -> Result<(Var, Var)> {
        let d = self.cfg.dim;
        let mut lower_mask = Tensor::zeros(&[d, d]);
        let mut upper_mask = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lower_mask.set(&[i, j], T::one());
                } else if j > i {
                    upper_mask.set(&[i, j], T::one());
                }
            }
        }
        let lm = g.constant(lower_mask);
        let um = g.constant(upper_mask);
        let eye = g.constant(Tensor::eye(d));
        let lower = p.get(&self.name(l, "lower"))?;
        let upper = p.get(&self.name(l, "upper"))?;
        let s = p.get(&self.name(l, "log_diag"))?;
        let lo = g.mul(lower, lm)?;
        let lo = g.add(lo, eye)?;
        let up = g.mul(upper, um)?;
        let es = g.exp(s)?;
        let es = g.expand(es, &[d, d])?;
        let diag = g.mul(es, eye)?;
        let up = g.add(up, diag)?;
        Ok((lo, up))
    }

    fn shift<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, l: usize, x: Var, c: Var) -> Result<(Var, Var, Var)> {
        let (d, a) = (self.cfg.dim, self.active());
        let xa = g.slice(x, 1, 0, a)?;
        let xp = g.slice(x, 1, a, d)?;
        let inp = g.concat(&[xa, c], 1)?;
        let sh = mlp2(g, p, &self.name(l, "cond"), inp)?;
        Ok((xa, xp, sh))
    }

    /// `z (M, d)`, `c (M, C)` → `θ (M, d)`.
    pub fn forward_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, z: Var, c: Var) -> Result<Var> {
        self.check_inputs(g, z, c)?;
        let mut x = z;
        for l in 0..self.cfg.blocks {
            x = self.permute(g, l, x, false)?;
            let (xa, xp, sh) = self.shift(g, p, l, x, c)?;
            let xp = g.add(xp, sh)?;
            x = g.concat(&[xa, xp], 1)?;
            x = self.permute(g, l, x, true)?;
            let (lo, up) = self.lu(g, p, l)?;
            let w = g.matmul(lo, up)?;
            let wt = g.transpose(w)?;
            x = g.matmul(x, wt)?;
        }
        let bias = p.get(&self.bias_name())?;
        g.add(x, bias)
    }

    /// `θ (M, d)`, `c (M, C)` → `(z (M, d), log|det ∂z/∂θ|)`; the log-det is
    /// a scalar shared by every row.
    pub fn inverse_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, theta: Var, c: Var) -> Result<(Var, Var)> {
        self.check_inputs(g, theta, c)?;
        let bias = p.get(&self.bias_name())?;
        let mut x = g.sub(theta, bias)?;
        let mut log_diags = Vec::with_capacity(self.cfg.blocks);
        for l in (0..self.cfg.blocks).rev() {
            let (lo, up) = self.lu(g, p, l)?;
            let xt = g.transpose(x)?;
            let y = g.solve_triangular(lo, xt, true)?;
            let y = g.solve_triangular(up, y, false)?;
            x = g.transpose(y)?;
            x = self.permute(g, l, x, false)?;
            let (xa, xp, sh) = self.shift(g, p, l, x, c)?;
            let xp = g.sub(xp, sh)?;
            x = g.concat(&[xa, xp], 1)?;
            x = self.permute(g, l, x, true)?;
            log_diags.push(p.get(&self.name(l, "log_diag"))?);
        }
        let all = g.concat(&log_diags, 0)?;
        let total = g.sum(all)?;
        let log_det = g.neg(total)?;
        Ok((x, log_det))
    }

    /// `log|det ∂f⁻¹/∂θ| = −Σ log diag(U)` as a scalar on the graph.
    pub fn log_det_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let parts = (0..self.cfg.blocks)
            .map(|l| p.get(&self.name(l, "log_diag")))
            .collect::<Result<Vec<_>>>()?;
        let all = g.concat(&parts, 0)?;
        let total = g.sum(all)?;
        g.neg(total)
    }

    /// Log-density of each row of `θ`, shape `(M)`.
    pub fn log_prob_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, theta: Var, c: Var) -> Result<Var> {
        let (z, log_det) = self.inverse_var(g, p, theta, c)?;
        let zz = g.square(z)?;
        let sq = g.sum_axis(zz, 1)?;
        let half = g.scale(sq, T::lit(-0.5))?;
        let norm = T::lit(-0.5 * self.cfg.dim as f64 * (2.0 * std::f64::consts::PI).ln());
        let lp = g.add_scalar(half, norm)?;
        g.add(lp, log_det)
    }

    /// `f(0; c)` for each row of `c`.
    pub fn mode_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, c: Var) -> Result<Var> {
        let m = g.shape(c)[0];
        let z = g.constant(Tensor::zeros(&[m, self.cfg.dim]));
        self.forward_var(g, p, z, c)
    }

    fn bind<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Bound {
        params.filter_prefix(&self.prefix).bind(g, |_| false)
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, z: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params);
        let (zv, cv) = (g.constant(z.clone()), g.constant(c.clone()));
        let out = self.forward_var(&mut g, &p, zv, cv)?;
        Ok(g.value(out).clone())
    }

    pub fn inverse<T: Scalar>(&self, params: &ParamSet<T>, theta: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params);
        let (tv, cv) = (g.constant(theta.clone()), g.constant(c.clone()));
        let (z, _) = self.inverse_var(&mut g, &p, tv, cv)?;
        Ok(g.value(z).clone())
    }

    pub fn log_prob<T: Scalar>(&self, params: &ParamSet<T>, theta: &Tensor<T>, c: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params);
        let (tv, cv) = (g.constant(theta.clone()), g.constant(c.clone()));
        let lp = self.log_prob_var(&mut g, &p, tv, cv)?;
        Ok(g.value(lp).data().to_vec())
    }

    pub fn mode<T: Scalar>(&self, params: &ParamSet<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        let m = c.shape()[0];
        self.forward(params, &Tensor::zeros(&[m, self.cfg.dim]), c)
    }

    /// `log|det ∂f⁻¹/∂θ|`, independent of z and c.
    pub fn log_det<T: Scalar>(&self, params: &ParamSet<T>) -> Result<T> {
        let mut s = T::zero();
        for l in 0..self.cfg.blocks {
            s += params.get(&self.name(l, "log_diag"))?.sum();
        }
        Ok(-s)
    }

    /// Draws `n` samples for a single context `c` (length C). Returns the
    /// samples `(n, d)` and their log-densities.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        &self,
        params: &ParamSet<T>,
        n: usize,
        c: &[T],
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<T>)> {
        if n == 0 {
            return Err(Error::Domain {
                op: "sample",
                msg: "sample count must be at least 1".into(),
            });
        }
        if c.len() != self.cfg.context {
            return Err(shape_err("sample context", &[c.len()], &[self.cfg.context]));
        }
        let z = standard_normal(&[n, self.cfg.dim], rng);
        let ctx = Tensor::from_vec(&[n, self.cfg.context], c.repeat(n))?;
        let theta = self.forward(params, &z, &ctx)?;
        let lp = self.log_prob(params, &theta, &ctx)?;
        Ok((theta, lp))
    }
}

/// Standard-normal tensor.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Flow::new(FlowConfig { dim: 4, context: 3, blocks: 3, hidden: 8 }, "flow/").unwrap();
        let p = f.init_params::<f64, _>(&mut rng, None).unwrap();
        let z = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let c = Tensor::randn(&[5, 3], 1.0, &mut rng);
        assert_eq!(f.forward(&p, &z, &c).unwrap(), z);
        assert_eq!(f.inverse(&p, &z, &c).unwrap(), z);
        assert_eq!(f.mode(&p, &c).unwrap(), Tensor::zeros(&[5, 4]));
    }

    #[test]
    fn standard_gaussian_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Flow::new(FlowConfig { dim: 2, context: 1, blocks: 2, hidden: 4 }, "f/").unwrap();
        let p = f.init_params::<f64, _>(&mut rng, None).unwrap();
        let lp = f.log_prob(&p, &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 1])).unwrap();
        assert!((lp[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp[0] + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn permutation_inverse() {
        let p = vec![2, 0, 3, 1];
        let inv = invert(&p);
        for i in 0..4 {
            assert_eq!(inv[p[i]], i);
        }
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Flow::new(FlowConfig { dim: 1, ..Default::default() }, "f/").is_err());
        let f = Flow::new(FlowConfig { dim: 4, context: 2, blocks: 1, hidden: 4 }, "f/").unwrap();
        let p = f.init_params::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        assert!(f.forward(&p, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 2])).is_err());
        assert!(f.sample(&p, 0, &[0.0, 0.0], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
