//! Motion discriminator: stacked GRU over pose sequences, softmax attention
//! pooling over time and a sigmoid output, plus the least-squares
//! adversarial losses.
//!
//! GRU update per step, with `σ` the logistic function:
//! `z = σ(x·Wz + h·Uz + bz)`, `r = σ(x·Wr + h·Ur + br)`,
//! `n = tanh(x·Wn + (r⊙h)·Un + bn)`, `h' = (1 − z)⊙n + z⊙h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{init_linear, linear, Init};
use crate::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 2 }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    input: usize,
    cfg: DiscConfig,
    prefix: String,
}

impl Discriminator {
    pub fn new(input: usize, cfg: DiscConfig, prefix: impl Into<String>) -> Result<Self> {
        if input == 0 || cfg.hidden == 0 || cfg.layers == 0 {
            return Err(Error::Config(format!("discriminator extents must be positive, got {cfg:?}")));
        }
        Ok(Self {
            input,
            cfg,
            prefix: prefix.into(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, item: &str) -> String {
        format!("{}{item}", self.prefix)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let h = self.cfg.hidden;
        let mut p = ParamSet::new();
        for l in 0..self.cfg.layers {
            let inp = if l == 0 { self.input } else { h };
            // input and recurrent maps for the (z, r) gates and the candidate
            init_linear(&mut p, &self.name(&format!("gru{l}.x_zr")), inp, 2 * h, Init::Scaled(1.0), rng);
            init_linear(&mut p, &self.name(&format!("gru{l}.h_zr")), h, 2 * h, Init::Scaled(1.0), rng);
            init_linear(&mut p, &self.name(&format!("gru{l}.x_n")), inp, h, Init::Scaled(1.0), rng);
            init_linear(&mut p, &self.name(&format!("gru{l}.h_n")), h, h, Init::Scaled(1.0), rng);
        }
        init_linear(&mut p, &self.name("attn.proj"), h, h, Init::Scaled(1.0), rng);
        p.insert(self.name("attn.v"), Tensor::randn(&[h, 1], 1.0 / (h as f64).sqrt(), rng));
        init_linear(&mut p, &self.name("out"), h, 1, Init::Scaled(1.0), rng);
        p
    }

    fn gru_layer<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, l: usize, xs: &[Var]) -> Result<Vec<Var>> {
        let h = self.cfg.hidden;
        let s = g.shape(xs[0])[0];
        let mut state = g.constant(Tensor::zeros(&[s, h]));
        let one = g.constant(Tensor::ones(&[s, h]));
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            let xzr = linear(g, p, &self.name(&format!("gru{l}.x_zr")), x)?;
            let hzr = linear(g, p, &self.name(&format!("gru{l}.h_zr")), state)?;
            let zr = g.add(xzr, hzr)?;
            let zr = g.sigmoid(zr)?;
            let z = g.slice(zr, 1, 0, h)?;
            let r = g.slice(zr, 1, h, 2 * h)?;
            let xn = linear(g, p, &self.name(&format!("gru{l}.x_n")), x)?;
            let rh = g.mul(r, state)?;
            let hn = linear(g, p, &self.name(&format!("gru{l}.h_n")), rh)?;
            let n = g.add(xn, hn)?;
            let n = g.tanh(n)?;
            let keep = g.sub(one, z)?;
            let a = g.mul(keep, n)?;
            let b = g.mul(z, state)?;
            state = g.add(a, b)?;
            out.push(state);
        }
        Ok(out)
    }

    /// Probabilities `(S)` for pose sequences `(S, T, d)`.
    pub fn discriminate_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, seq: Var) -> Result<Var> {
        let sh = g.shape(seq).to_vec();
        if sh.len() != 3 || sh[2] != self.input {
            return Err(shape_err("discriminate", &sh, &[0, 0, self.input]));
        }
        let (s, t, d) = (sh[0], sh[1], sh[2]);
        if t < 2 {
            return Err(Error::Domain {
                op: "discriminate",
                msg: format!("sequence needs at least 2 frames, got {t}"),
            });
        }
        let h = self.cfg.hidden;
        let mut xs = Vec::with_capacity(t);
        for i in 0..t {
            let x = g.slice(seq, 1, i, i + 1)?;
            xs.push(g.reshape(x, &[s, d])?);
        }
        for l in 0..self.cfg.layers {
            xs = self.gru_layer(g, p, l, &xs)?;
        }
        let mut rows = Vec::with_capacity(t);
        for &x in &xs {
            rows.push(g.reshape(x, &[s, 1, h])?);
        }
        let hs = g.concat(&rows, 1)?; // (S, T, H)
        let flat = g.reshape(hs, &[s * t, h])?;
        let proj = linear(g, p, &self.name("attn.proj"), flat)?;
        let proj = g.tanh(proj)?;
        let scores = g.matmul(proj, p.get(&self.name("attn.v"))?)?;
        let scores = g.reshape(scores, &[s, t])?;
        let w = g.softmax(scores)?;
        let w = g.reshape(w, &[s, 1, t])?;
        let pooled = g.bmm(w, hs)?;
        let pooled = g.reshape(pooled, &[s, h])?;
        let logit = linear(g, p, &self.name("out"), pooled)?;
        let prob = g.sigmoid(logit)?;
        g.reshape(prob, &[s])
    }

    /// Probability for each sequence in a batch of `(T, d)` tensors.
    pub fn discriminate<T: Scalar>(&self, params: &ParamSet<T>, seqs: &[Tensor<T>]) -> Result<Vec<T>> {
        if seqs.is_empty() {
            return Err(Error::Domain {
                op: "discriminate",
                msg: "empty batch".into(),
            });
        }
        let mut g = Graph::new();
        let p = params.filter_prefix(&self.prefix).bind(&mut g, |_| false);
        let shape = seqs[0].shape().to_vec();
        let mut data = Vec::new();
        for s in seqs {
            if s.shape() != shape.as_slice() {
                return Err(shape_err("discriminate", s.shape(), &shape));
            }
            data.extend_from_slice(s.data());
        }
        let mut full = vec![seqs.len()];
        full.extend(shape);
        let x = g.constant(Tensor::from_vec(&full, data)?);
        let out = self.discriminate_var(&mut g, &p, x)?;
        Ok(g.value(out).data().to_vec())
    }
}

fn check_probs<T: Scalar>(g: &Graph<T>, v: Var, op: &'static str) -> Result<()> {
    if g.value(v).data().iter().any(|&x| !(x >= T::zero() && x <= T::one())) {
        return Err(Error::Domain {
            op,
            msg: "probabilities must lie in [0, 1]".into(),
        });
    }
    Ok(())
}

/// `mean[(D(real) − 1)²] + mean[D(fake)²]` over probability vectors.
pub fn disc_loss_var<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    check_probs(g, real, "disc_loss")?;
    check_probs(g, fake, "disc_loss")?;
    let r = g.add_scalar(real, -T::one())?;
    let r = g.square(r)?;
    let r = g.mean(r)?;
    let f = g.square(fake)?;
    let f = g.mean(f)?;
    g.add(r, f)
}

/// `mean[(D(fake) − 1)²]`
pub fn adv_loss_var<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    check_probs(g, fake, "adv_loss")?;
    let f = g.add_scalar(fake, -T::one())?;
    let f = g.square(f)?;
    g.mean(f)
}

pub fn disc_loss<T: Scalar>(real: &[T], fake: &[T]) -> Result<T> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Domain {
            op: "disc_loss",
            msg: "empty batch".into(),
        });
    }
    let mut g = Graph::new();
    let r = g.constant(Tensor::from_vec(&[real.len()], real.to_vec())?);
    let f = g.constant(Tensor::from_vec(&[fake.len()], fake.to_vec())?);
    let l = disc_loss_var(&mut g, r, f)?;
    Ok(g.value(l).item())
}

pub fn adv_loss<T: Scalar>(fake: &[T]) -> Result<T> {
    if fake.is_empty() {
        return Err(Error::Domain {
            op: "adv_loss",
            msg: "empty batch".into(),
        });
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::from_vec(&[fake.len()], fake.to_vec())?);
    let l = adv_loss_var(&mut g, f)?;
    Ok(g.value(l).item())
}
