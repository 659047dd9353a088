//! Fitting body-model parameters to 2D keypoints with the flow as a
//! video-conditioned pose prior.
//!
//! Per frame `t` the variables are a latent `z_t`, shape `β_t` and camera
//! `(log s_t, tx_t, ty_t)`, with pose `θ_t = f(z_t; c_t)`. The energy is
//!
//! `E_t = λ_J·E_J + λ_V·(−ln p(θ_t | c_t)) + λ_β·‖β_t‖²`
//!
//! where `E_J` is the confidence-weighted mean squared reprojection error
//! and `−ln p = ½‖z‖² + (d/2)·ln 2π − ln|det ∂f⁻¹/∂θ|`. Frames do not
//! interact, so optimizing the summed energy with Adam fits every frame
//! independently.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::PoseModel;
use crate::numeric::{AdamState, Bound, Graph, ParamSet, Tensor, Var};
use crate::rotations::{matrix_to_axis_angle, rot6d_to_matrix, Rot6D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda_j: f64,
    pub lambda_v: f64,
    pub lambda_beta: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Stops early once an iteration lowers the energy by less than this.
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_j: 1.0,
            lambda_v: 0.1,
            lambda_beta: 0.001,
            lr: 0.01,
            max_iters: 300,
            tol: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_j, self.lambda_v, self.lambda_beta];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("fit: weights must be non-negative".into()));
        }
        if self.max_iters == 0 || !(self.lr > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Config("fit: need max_iters >= 1, lr > 0 and tol >= 0".into()));
        }
        Ok(())
    }
}

/// Keypoint targets of one sequence in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FitTarget {
    pub keypoints: Vec<Vec<[f64; 2]>>,
    pub confidence: Vec<Vec<f64>>,
}

/// Optimization variables for every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    /// `(T, d)`
    pub z: Tensor<f64>,
    /// `(T, B)`
    pub beta: Tensor<f64>,
    /// `(T, 3)` as `(log s, tx, ty)`
    pub cam: Tensor<f64>,
}

/// Energy terms summed over frames, unweighted, and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub joints: f64,
    pub prior: f64,
    pub shape: f64,
    pub total: f64,
}

struct EnergyVars {
    /// `(T)` weighted per-frame energies
    per_frame: Var,
    joints: Var,
    prior: Var,
    shape: Var,
    theta: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamOut {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

/// Fitted parameters of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFit {
    pub theta_axis_angle: Vec<f64>,
    pub beta: Vec<f64>,
    pub cam: CamOut,
    /// Energy of this frame at every iteration, starting from the
    /// initialization.
    pub energy_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: FitConfig,
    pub frames: Vec<FrameFit>,
}

/// Everything [`fit`] produces.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub report: FitReport,
    /// Lowest-energy state of every frame.
    pub state: FitState,
    /// `(T, 6J)` poses of `state`, equal to `f(z; c)`.
    pub theta6d: Tensor<f64>,
    pub initial: Energy,
    pub final_energy: Energy,
    pub iterations: usize,
}

fn target_tensors(t: &FitTarget, j: usize) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let n = t.keypoints.len();
    if n == 0 || t.confidence.len() != n {
        return Err(shape_err("fit target", &[n], &[t.confidence.len()]));
    }
    for (f, (k, c)) in t.keypoints.iter().zip(&t.confidence).enumerate() {
        if k.len() != j || c.len() != j {
            return Err(Error::Frame {
                frame: f,
                msg: format!("expected {j} joints"),
            });
        }
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Frame {
                frame: f,
                msg: "confidence outside [0, 1]".into(),
            });
        }
    }
    let kp = Tensor::from_vec(&[n, j, 2], t.keypoints.iter().flatten().flatten().copied().collect())?;
    let conf = Tensor::from_vec(&[n, j], t.confidence.iter().flatten().copied().collect())?;
    // frames without any confidence contribute no reprojection term
    let inv = Tensor::from_vec(
        &[n],
        t.confidence
            .iter()
            .map(|c| {
                let s: f64 = c.iter().sum();
                if s > 0.0 {
                    1.0 / s
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    Ok((kp, conf, inv))
}

#[allow(clippy::too_many_arguments)]
fn energy_var(
    model: &PoseModel<f64>,
    g: &mut Graph<f64>,
    p: &Bound,
    cfg: &FitConfig,
    c: Var,
    z: Var,
    beta: Var,
    cam: Var,
    targets: &(Tensor<f64>, Tensor<f64>, Tensor<f64>),
) -> Result<EnergyVars> {
    let n = g.shape(z)[0];
    let theta = model.flow.forward_var(g, p, z, c)?;
    let mesh = model.pose_var(g, theta, beta)?;
    let log_s = g.slice(cam, 1, 0, 1)?;
    let s = g.exp(log_s)?;
    let t = g.slice(cam, 1, 1, 3)?;
    let cam = g.concat(&[s, t], 1)?;
    let proj = crate::camera::project_var(g, mesh.joints, cam)?;
    let kp = g.constant(targets.0.clone());
    let conf = g.constant(targets.1.clone());
    let inv = g.constant(targets.2.clone());
    let d = g.sub(proj, kp)?;
    let d = g.square(d)?;
    let d = g.sum_axis(d, 2)?;
    let d = g.mul(conf, d)?;
    let d = g.sum_axis(d, 1)?;
    let e_j = g.mul(d, inv)?;

    let zz = g.square(z)?;
    let zz = g.sum_axis(zz, 1)?;
    let half = g.scale(zz, 0.5)?;
    let dim = model.pose_dim() as f64;
    let prior = g.add_scalar(half, 0.5 * dim * (2.0 * std::f64::consts::PI).ln())?;
    let log_det = model.flow.log_det_var(g, p)?;
    let prior = g.sub(prior, log_det)?;

    let bb = g.square(beta)?;
    let e_b = g.sum_axis(bb, 1)?;

    let a = g.scale(e_j, cfg.lambda_j)?;
    let b = g.scale(prior, cfg.lambda_v)?;
    let cc = g.scale(e_b, cfg.lambda_beta)?;
    let ab = g.add(a, b)?;
    let per_frame = g.add(ab, cc)?;
    debug_assert_eq!(g.shape(per_frame), [n]);
    let joints = g.sum(e_j)?;
    let prior = g.sum(prior)?;
    let shape = g.sum(e_b)?;
    Ok(EnergyVars {
        per_frame,
        joints,
        prior,
        shape,
        theta,
    })
}

fn summarize(g: &Graph<f64>, e: &EnergyVars) -> Energy {
    Energy {
        joints: g.value(e.joints).item(),
        prior: g.value(e.prior).item(),
        shape: g.value(e.shape).item(),
        total: g.value(e.per_frame).sum(),
    }
}

/// Energy of `state` for contexts `c (T, C)`.
pub fn energy(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    cfg: &FitConfig,
    c: &Tensor<f64>,
    state: &FitState,
    target: &FitTarget,
) -> Result<Energy> {
    let targets = target_tensors(target, model.joints())?;
    let mut g = Graph::new();
    let p = params.filter_prefix(model.flow.prefix()).bind(&mut g, |_| false);
    let cv = g.constant(c.clone());
    let z = g.constant(state.z.clone());
    let b = g.constant(state.beta.clone());
    let cam = g.constant(state.cam.clone());
    let e = energy_var(model, &mut g, &p, cfg, cv, z, b, cam, &targets)?;
    Ok(summarize(&g, &e))
}

/// Total energy as a function of the flattened variables
/// `[z | β | cam]`, for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn energy_graph(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    cfg: &FitConfig,
    c: &Tensor<f64>,
    target: &FitTarget,
    g: &mut Graph<f64>,
    z: Var,
    beta: Var,
    cam: Var,
) -> Result<Var> {
    let targets = target_tensors(target, model.joints())?;
    let p = params.filter_prefix(model.flow.prefix()).bind(g, |_| false);
    let cv = g.constant(c.clone());
    let e = energy_var(model, g, &p, cfg, cv, z, beta, cam, &targets)?;
    g.sum(e.per_frame)
}

/// Initial state from the regression pass: `z = 0` (the mode), shapes and
/// cameras from the head. Returns the state and the contexts.
pub fn initial_state(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    obs: &Tensor<f64>,
) -> Result<(FitState, Tensor<f64>)> {
    let r = model.regress(params, obs)?;
    let n = obs.shape()[0];
    let mut cam = r.cam.clone();
    for row in cam.data_mut().chunks_mut(3) {
        row[0] = row[0].ln();
    }
    Ok((
        FitState {
            z: Tensor::zeros(&[n, model.pose_dim()]),
            beta: r.beta,
            cam,
        },
        r.context,
    ))
}

fn frame_output(model: &PoseModel<f64>, theta: &[f64], beta: &[f64], cam: &[f64], trace: Vec<f64>) -> Result<FrameFit> {
    let mut aa = Vec::with_capacity(3 * model.joints());
    for r6 in theta.chunks(6) {
        let m = rot6d_to_matrix(&Rot6D::from_slice(r6))?;
        aa.extend(matrix_to_axis_angle(&m)?.0);
    }
    Ok(FrameFit {
        theta_axis_angle: aa,
        beta: beta.to_vec(),
        cam: CamOut {
            s: cam[0].exp(),
            tx: cam[1],
            ty: cam[2],
        },
        energy_trace: trace,
    })
}

fn copy_row(dst: &mut Tensor<f64>, src: &Tensor<f64>, row: usize) {
    let w = src.shape()[1];
    dst.data_mut()[row * w..(row + 1) * w].copy_from_slice(&src.data()[row * w..(row + 1) * w]);
}

/// Fits one sequence. `obs (T, 3J)` feeds the regression pass that
/// provides contexts and the initialization; `target` holds the keypoints
/// to explain. Each frame keeps its lowest-energy iterate, so the final
/// energy never exceeds the initial one.
pub fn fit(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    obs: &Tensor<f64>,
    target: &FitTarget,
    cfg: &FitConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    let (state, c) = initial_state(model, params, obs)?;
    fit_from(model, params, &c, state, target, cfg)
}

/// [`fit`] from an explicit state and contexts.
pub fn fit_from(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    c: &Tensor<f64>,
    state: FitState,
    target: &FitTarget,
    cfg: &FitConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    let n = state.z.shape()[0];
    if target.keypoints.len() != n || c.shape()[0] != n {
        return Err(shape_err("fit", &[target.keypoints.len(), c.shape()[0]], &[n]));
    }
    let targets = target_tensors(target, model.joints())?;
    let flow_params = params.filter_prefix(model.flow.prefix());
    let mut vars = ParamSet::new();
    vars.insert("z", state.z);
    vars.insert("beta", state.beta);
    vars.insert("cam", state.cam);
    let mut opt = AdamState::new(cfg.lr);
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut best = vars.clone();
    let mut best_theta = Tensor::zeros(&[n, model.pose_dim()]);
    let mut best_e = vec![f64::INFINITY; n];
    let mut initial = Energy::default();
    let mut best_summary = Energy::default();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..=cfg.max_iters {
        let mut g = Graph::new();
        let p = flow_params.bind(&mut g, |_| false);
        let v = vars.bind(&mut g, |_| true);
        let cv = g.constant(c.clone());
        let e = energy_var(model, &mut g, &p, cfg, cv, v.get("z")?, v.get("beta")?, v.get("cam")?, &targets)?;
        let summary = summarize(&g, &e);
        if !summary.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite energy at iteration {it}")));
        }
        if it == 0 {
            initial = summary;
        } else if summary.total > 10.0 * initial.total.abs() && summary.total > initial.total {
            return Err(Error::Diverged(format!(
                "energy {} at iteration {it} exceeds 10x the initial {} (E_J {}, prior {}, shape {})",
                summary.total, initial.total, summary.joints, summary.prior, summary.shape
            )));
        }
        let per = g.value(e.per_frame).data().to_vec();
        let theta = g.value(e.theta).clone();
        for f in 0..n {
            traces[f].push(per[f]);
            if per[f] < best_e[f] {
                best_e[f] = per[f];
                for name in ["z", "beta", "cam"] {
                    let src = vars.get(name)?.clone();
                    copy_row(best.get_mut(name).expect("present"), &src, f);
                }
                copy_row(&mut best_theta, &theta, f);
            }
        }
        iterations = it;
        let converged = it > 0 && prev - summary.total >= 0.0 && prev - summary.total < cfg.tol;
        if it == cfg.max_iters || converged {
            break;
        }
        prev = summary.total;
        let total = g.sum(e.per_frame)?;
        let grads = v.grads(&g, &g.backward(total)?);
        opt.step(&mut vars, &grads)?;
    }
    let state = FitState {
        z: best.get("z")?.clone(),
        beta: best.get("beta")?.clone(),
        cam: best.get("cam")?.clone(),
    };
    // recompute the breakdown at the selected per-frame states
    let final_energy = {
        let mut g = Graph::new();
        let p = flow_params.bind(&mut g, |_| false);
        let cv = g.constant(c.clone());
        let (z, b, cm) = (
            g.constant(state.z.clone()),
            g.constant(state.beta.clone()),
            g.constant(state.cam.clone()),
        );
        let e = energy_var(model, &mut g, &p, cfg, cv, z, b, cm, &targets)?;
        best_summary.joints = g.value(e.joints).item();
        best_summary.prior = g.value(e.prior).item();
        best_summary.shape = g.value(e.shape).item();
        best_summary.total = g.value(e.per_frame).sum();
        best_summary
    };
    let d = model.pose_dim();
    let b = model.body.num_betas();
    let frames = traces
        .into_iter()
        .enumerate()
        .map(|(f, trace)| {
            frame_output(
                model,
                &best_theta.data()[f * d..(f + 1) * d],
                &state.beta.data()[f * b..(f + 1) * b],
                &state.cam.data()[f * 3..(f + 1) * 3],
                trace,
            )
        })
        .collect::<Result<_>>()?;
    Ok(FitOutput {
        report: FitReport {
            config: cfg.clone(),
            frames,
        },
        state,
        theta6d: best_theta,
        initial,
        final_energy,
        iterations,
    })
}
