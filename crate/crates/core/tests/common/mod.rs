#![allow(dead_code)]

use flowpose::flow::{Flow, FlowConfig};
use flowpose::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use flowpose::rotations::{axis_angle_to_matrix, AxisAngle, Mat3};
use flowpose::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Adds Gaussian noise of standard deviation `std` to every parameter, so
/// zero-initialized layers become generic.
pub fn perturb<R: Rng + ?Sized>(params: &ParamSet<f64>, std: f64, rng: &mut R) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let noise = Tensor::<f64>::randn(t.shape(), std, rng);
        out.insert(name.clone(), t.zip_map(&noise, |a, b| a + b).unwrap());
    }
    out
}

/// A flow with generic (non-identity) parameters. Off-diagonal LU entries
/// shrink with the dimension so the linear maps stay well conditioned.
pub fn random_flow(dim: usize, context: usize, seed: u64) -> (Flow, ParamSet<f64>) {
    let flow = Flow::new(
        FlowConfig {
            dim,
            context,
            blocks: 4,
            hidden: 16,
        },
        "flow/",
    )
    .unwrap();
    let mut r = rng(seed);
    let init = flow.init_params::<f64, _>(&mut r, None).unwrap();
    let mut params = ParamSet::new();
    for (name, t) in init.iter() {
        let std = if name.ends_with("lower") || name.ends_with("upper") {
            0.5 / (dim as f64).sqrt()
        } else if name.ends_with("log_diag") {
            0.2
        } else {
            0.4
        };
        let noise = Tensor::<f64>::randn(t.shape(), std, &mut r);
        params.insert(name.clone(), t.zip_map(&noise, |a, b| a + b).unwrap());
    }
    (flow, params)
}

pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3<f64> {
    let axis = [normal(rng), normal(rng), normal(rng)];
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let angle = rng.random_range(0.0..3.1);
    axis_angle_to_matrix(&AxisAngle([axis[0] / n * angle, axis[1] / n * angle, axis[2] / n * angle])).unwrap()
}

/// Largest `|analytic − central difference| / max(1, |central difference|)`
/// over up to `probes` evenly spaced coordinates of every parameter tensor.
pub fn param_grad_error(
    params: &ParamSet<f64>,
    probes: usize,
    step: f64,
    loss: impl Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
) -> f64 {
    let value = |ps: &ParamSet<f64>| -> f64 {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, |_| false);
        let out = loss(&mut g, &p).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| true);
    let out = loss(&mut g, &p).unwrap();
    let grads = p.grads(&g, &g.backward(out).unwrap());
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        let stride = n.div_ceil(probes.min(n)).max(1);
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
        for i in (0..n).step_by(stride) {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = value(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = value(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}
