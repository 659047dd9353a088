use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::tensor::Tensor;
use crate::scalar::Scalar;

/// Largest `|autodiff − central difference| / max(1, |central difference|)`
/// over all coordinates of `point`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    grad_check_inputs(|g, xs| f(g, xs[0]), std::slice::from_ref(point), step, usize::MAX)
}

/// Multi-input variant of [`grad_check`]. At most `max_probes` coordinates
/// per input are probed, evenly spaced.
pub fn grad_check_inputs<T, F>(f: F, points: &[Tensor<T>], step: T, max_probes: usize) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = g.backward(out)?;

    let mut worst = T::zero();
    let mut probe = points.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        let n = points[k].len();
        let stride = n.div_ceil(max_probes.min(n)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = points[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (up - down) / (step + step);
            let err = (analytic.data()[i] - fd).abs() / fd.abs().max(T::one());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
