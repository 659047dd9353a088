//! Dense layers stored in a [`ParamSet`] as `{name}.w` (in × out) and
//! `{name}.b` (out).

use rand::Rng;

use crate::error::Result;
use crate::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Gaussian weights with std `gain / sqrt(fan_in)`, zero bias.
    Scaled(f64),
}

pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) {
    let w = match init {
        Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        Init::Scaled(gain) => Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
    };
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// `x·W + b` for `x` of shape `(M, in)`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `linear(tanh(linear(x)))` with layers `{name}.0` and `{name}.1`.
pub fn mlp2<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.0"), x)?;
    let h = g.tanh(h)?;
    linear(g, p, &format!("{name}.1"), h)
}

/// Two-layer network parameters: hidden layer scaled, output layer `out_init`.
#[allow(clippy::too_many_arguments)]
pub fn init_mlp2<T: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    hidden: usize,
    fan_out: usize,
    out_init: Init,
    rng: &mut R,
) {
    init_linear(params, &format!("{name}.0"), fan_in, hidden, Init::Scaled(1.0), rng);
    init_linear(params, &format!("{name}.1"), hidden, fan_out, out_init, rng);
}
