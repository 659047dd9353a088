//! The full estimator: observation encoder → temporal encoder → context,
//! then the pose flow and the shape/camera head on each frame's context,
//! plus the motion discriminator used during training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body_model::{BodyModel, MeshVars};
use crate::config::Config;
use crate::data::{observation_tensor, ObservationEncoder, SyntheticSequence};
use crate::discriminator::{adv_loss_var, Discriminator};
use crate::error::{shape_err, Error, Result};
use crate::flow::{identity_pose6d, standard_normal, Flow, FlowConfig};
use crate::losses::{
    loss_2d_var, loss_3d_var, nll_var, orth_loss_var, param_loss_var, LossReport, LossWeights, Term,
};
use crate::numeric::{Bound, CheckpointFile, Graph, ParamSet, Tensor, Var};
use crate::regression_head::RegressionHead;
use crate::rotations::rot6d_to_matrix_var;
use crate::scalar::Scalar;
use crate::temporal_encoder::TemporalEncoder;

pub const OBS_PREFIX: &str = "obs/";
pub const ENCODER_PREFIX: &str = "encoder/";
pub const FLOW_PREFIX: &str = "flow/";
pub const HEAD_PREFIX: &str = "head/";
pub const DISC_PREFIX: &str = "disc/";

/// Per-frame annotations of one window; any field may be missing on any
/// frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervision {
    /// 6D pose, length 6J.
    pub theta6d: Vec<Option<Vec<f64>>>,
    pub beta: Vec<Option<Vec<f64>>>,
    pub joints3d: Vec<Option<Vec<[f64; 3]>>>,
    /// Keypoints with per-joint confidences.
    pub keypoints: Vec<Option<(Vec<[f64; 2]>, Vec<f64>)>>,
}

impl Supervision {
    pub fn frames(&self) -> usize {
        self.theta6d.len()
    }

    /// Every annotation of a synthetic sequence, with its noisy keypoints
    /// as the 2D target.
    pub fn full(seq: &SyntheticSequence) -> Result<Self> {
        let t = seq.frames();
        Ok(Self {
            theta6d: (0..t).map(|f| seq.theta6d(f).map(Some)).collect::<Result<_>>()?,
            beta: vec![Some(seq.beta.clone()); t],
            joints3d: seq.joints3d.iter().cloned().map(Some).collect(),
            keypoints: seq
                .keypoints
                .iter()
                .zip(&seq.confidence)
                .map(|(k, c)| Some((k.clone(), c.clone())))
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        if self.beta.len() != t || self.joints3d.len() != t || self.keypoints.len() != t {
            return Err(Error::Parse("supervision fields disagree on the frame count".into()));
        }
        for f in 0..t {
            let any = self.theta6d[f].is_some()
                || self.beta[f].is_some()
                || self.joints3d[f].is_some()
                || self.keypoints[f].is_some();
            if !any {
                return Err(Error::Frame {
                    frame: f,
                    msg: "no annotation".into(),
                });
            }
            if let Some((_, c)) = &self.keypoints[f] {
                if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Frame {
                        frame: f,
                        msg: "confidence outside [0, 1]".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One training or validation window.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Observation network input `(T, 3J)`.
    pub obs: Tensor<f64>,
    pub supervision: Supervision,
}

impl Window {
    pub fn from_sequence(seq: &SyntheticSequence) -> Result<Self> {
        Ok(Self {
            obs: observation_tensor(&seq.keypoints, &seq.confidence)?,
            supervision: Supervision::full(seq)?,
        })
    }

    pub fn frames(&self) -> usize {
        self.obs.shape()[0]
    }

    /// Ground-truth pose sequence `(T, 6J)` when every frame has one.
    pub fn motion(&self) -> Option<Tensor<f64>> {
        let rows: Option<Vec<&Vec<f64>>> = self.supervision.theta6d.iter().map(|r| r.as_ref()).collect();
        let rows = rows?;
        let d = rows.first()?.len();
        Tensor::from_vec(&[rows.len(), d], rows.into_iter().flatten().copied().collect()).ok()
    }
}

/// Graph outputs of the regression pass over one window.
#[derive(Clone, Copy, Debug)]
pub struct RegressionVars {
    /// `(T, C)`
    pub context: Var,
    /// `(T, 6J)`
    pub mode: Var,
    /// `(T, B)`
    pub beta: Var,
    /// `(T, 3)`
    pub cam: Var,
}

/// Values of [`RegressionVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct Regression<T> {
    pub context: Tensor<T>,
    pub mode: Tensor<T>,
    pub beta: Tensor<T>,
    pub cam: Tensor<T>,
}

/// Output of [`PoseModel::item_loss`].
#[derive(Clone, Debug)]
pub struct ItemLoss<T> {
    pub total: Var,
    pub report: LossReport,
    /// Generated pose sequences `(T, 6J)` for the discriminator: the mode
    /// first, then every sample.
    pub fakes: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct PoseModel<T> {
    pub config: Config,
    pub body: BodyModel<T>,
    pub observer: ObservationEncoder,
    pub encoder: TemporalEncoder,
    pub flow: Flow,
    pub head: RegressionHead,
    pub disc: Discriminator,
}

fn rows<T: Scalar>(data: impl IntoIterator<Item = f64>, shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data.into_iter().map(T::lit).collect())
}

fn frames_with<A>(v: &[Option<A>]) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, a)| a.is_some()).map(|(i, _)| i).collect()
}

impl<T: Scalar> PoseModel<T> {
    pub fn new(config: Config, body: BodyModel<T>) -> Result<Self> {
        config.validate()?;
        let j = body.num_joints();
        let enc = config.encoder.clone();
        let flow_cfg = FlowConfig {
            dim: body.pose_dim(),
            context: enc.context,
            blocks: config.flow.blocks,
            hidden: config.flow.hidden,
        };
        Ok(Self {
            observer: ObservationEncoder::new(j, config.model.obs_hidden, enc.feature, OBS_PREFIX)?,
            head: RegressionHead::new(enc.context, config.model.head_hidden, body.num_betas(), HEAD_PREFIX)?,
            encoder: TemporalEncoder::new(enc, ENCODER_PREFIX)?,
            flow: Flow::new(flow_cfg, FLOW_PREFIX)?,
            disc: Discriminator::new(body.pose_dim(), config.disc.clone(), DISC_PREFIX)?,
            config,
            body,
        })
    }

    /// Builds the model, loading the body model named in the config (the
    /// toy model when none is named).
    pub fn from_config(config: Config) -> Result<Self> {
        let body = match &config.model.body {
            Some(path) => BodyModel::<f64>::load(path)?,
            None => BodyModel::<f64>::toy(),
        };
        Self::new(config, body.cast())
    }

    pub fn joints(&self) -> usize {
        self.body.num_joints()
    }

    pub fn pose_dim(&self) -> usize {
        self.body.pose_dim()
    }

    /// Fresh parameters; every component draws from its own stream of
    /// `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet<T>> {
        let stream = |i: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i);
            r
        };
        let mut p = ParamSet::new();
        p.extend(self.observer.init_params(&mut stream(0)));
        p.extend(self.encoder.init_params(&mut stream(1)));
        let bias = identity_pose6d(self.joints());
        p.extend(self.flow.init_params(&mut stream(2), Some(&bias))?);
        p.extend(self.head.init_params(&mut stream(3)));
        p.extend(self.disc.init_params(&mut stream(4)));
        Ok(p)
    }

    /// Whether `name` receives generator gradients.
    pub fn generator_trainable(&self, name: &str) -> bool {
        !name.starts_with(DISC_PREFIX) && !(self.config.train.freeze_encoder && name.starts_with(OBS_PREFIX))
    }

    /// Observations `(T, 3J)` → contexts, modes, shapes and cameras.
    pub fn regress_var(&self, g: &mut Graph<T>, p: &Bound, obs: Var) -> Result<RegressionVars> {
        let feat = self.observer.encode_var(g, p, obs)?;
        let context = self.encoder.encode_var(g, p, feat)?;
        let mode = self.flow.mode_var(g, p, context)?;
        let head = self.head.predict_var(g, p, context)?;
        Ok(RegressionVars {
            context,
            mode,
            beta: head.beta,
            cam: head.cam,
        })
    }

    /// Poses `(M, 6J)` with shapes `(M, B)`.
    pub fn pose_var(&self, g: &mut Graph<T>, theta: Var, beta: Var) -> Result<MeshVars> {
        let s = g.shape(theta).to_vec();
        if s.len() != 2 || s[1] != self.pose_dim() {
            return Err(shape_err("pose", &s, &[0, self.pose_dim()]));
        }
        let r6 = g.reshape(theta, &[s[0] * self.joints(), 6])?;
        let rots = rot6d_to_matrix_var(g, r6)?;
        self.body.forward_var(g, rots, beta)
    }

    pub fn regress(&self, params: &ParamSet<T>, obs: &Tensor<T>) -> Result<Regression<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let o = g.constant(obs.clone());
        let r = self.regress_var(&mut g, &p, o)?;
        Ok(Regression {
            context: g.value(r.context).clone(),
            mode: g.value(r.mode).clone(),
            beta: g.value(r.beta).clone(),
            cam: g.value(r.cam).clone(),
        })
    }

    /// Joints `(M, J)` and vertices `(M, N)` for poses `(M, 6J)` and shapes
    /// `(M, B)`.
    #[allow(clippy::type_complexity)]
    pub fn pose(&self, theta: &Tensor<T>, beta: &Tensor<T>) -> Result<(Vec<Vec<[T; 3]>>, Vec<Vec<[T; 3]>>)> {
        let mut g = Graph::new();
        let (t, b) = (g.constant(theta.clone()), g.constant(beta.clone()));
        let mesh = self.pose_var(&mut g, t, b)?;
        let split = |v: &Tensor<T>| -> Vec<Vec<[T; 3]>> {
            let s = v.shape();
            v.data()
                .chunks(s[1] * 3)
                .map(|f| f.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
                .collect()
        };
        Ok((split(g.value(mesh.joints)), split(g.value(mesh.vertices))))
    }

    /// Weighted training loss of one window with `samples` flow samples.
    /// Parameters must already be bound on `g`.
    pub fn item_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        win: &Window,
        weights: &LossWeights,
        samples: usize,
        rng: &mut R,
    ) -> Result<ItemLoss<T>> {
        let sup = &win.supervision;
        sup.validate()?;
        let t = win.frames();
        if sup.frames() != t {
            return Err(shape_err("item_loss", &[sup.frames()], &[t]));
        }
        if samples == 0 {
            return Err(Error::Config("at least one flow sample is needed".into()));
        }
        let (d, j, nb) = (self.pose_dim(), self.joints(), self.body.num_betas());
        let obs = g.constant(win.obs.cast());
        let r = self.regress_var(g, p, obs)?;
        let mut terms: Vec<(Term, Var)> = Vec::new();

        let idx = frames_with(&sup.theta6d);
        if !idx.is_empty() {
            let gt = rows(
                idx.iter().flat_map(|&f| sup.theta6d[f].clone().expect("selected")),
                &[idx.len(), d],
            )?;
            let gt = g.constant(gt);
            let c = g.index_select(r.context, 0, &idx)?;
            terms.push((Term::Nll, nll_var(g, &self.flow, p, gt, c)?));
            let m = g.index_select(r.mode, 0, &idx)?;
            terms.push((Term::ModeTheta, param_loss_var(g, m, gt)?));
        }
        let idx = frames_with(&sup.beta);
        if !idx.is_empty() {
            let gt = rows(idx.iter().flat_map(|&f| sup.beta[f].clone().expect("selected")), &[idx.len(), nb])?;
            let gt = g.constant(gt);
            let b = g.index_select(r.beta, 0, &idx)?;
            terms.push((Term::ModeBeta, param_loss_var(g, b, gt)?));
        }
        let mesh = self.pose_var(g, r.mode, r.beta)?;
        let idx = frames_with(&sup.joints3d);
        if !idx.is_empty() {
            let gt = rows(
                idx.iter()
                    .flat_map(|&f| sup.joints3d[f].as_ref().expect("selected").iter().flatten().copied()),
                &[idx.len(), j, 3],
            )?;
            let gt = g.constant(gt);
            let pj = g.index_select(mesh.joints, 0, &idx)?;
            terms.push((Term::Mode3d, loss_3d_var(g, pj, gt)?));
        }
        // frames whose keypoints carry some confidence
        let kp_idx: Vec<usize> = (0..t)
            .filter(|&f| matches!(&sup.keypoints[f], Some((_, c)) if c.iter().sum::<f64>() > 0.0))
            .collect();
        let kp_targets = |g: &mut Graph<T>, reps: usize| -> Result<(Var, Var)> {
            let sel = || (0..reps).flat_map(|_| kp_idx.iter().map(|&f| sup.keypoints[f].as_ref().expect("selected")));
            let kp = rows(sel().flat_map(|(k, _)| k.iter().flatten().copied()), &[reps * kp_idx.len(), j, 2])?;
            let conf = rows(sel().flat_map(|(_, c)| c.iter().copied()), &[reps * kp_idx.len(), j])?;
            Ok((g.constant(kp), g.constant(conf)))
        };
        if !kp_idx.is_empty() {
            let (kp, conf) = kp_targets(g, 1)?;
            let pj = g.index_select(mesh.joints, 0, &kp_idx)?;
            let cam = g.index_select(r.cam, 0, &kp_idx)?;
            terms.push((Term::Mode2d, loss_2d_var(g, pj, cam, kp, conf)?));
        }

        // flow samples: row k·T + f is sample k of frame f
        let rep: Vec<usize> = (0..samples).flat_map(|_| 0..t).collect();
        let z = g.constant(standard_normal(&[samples * t, d], rng));
        let c = g.index_select(r.context, 0, &rep)?;
        let theta = self.flow.forward_var(g, p, z, c)?;
        terms.push((Term::Orth, orth_loss_var(g, theta)?));
        if !kp_idx.is_empty() {
            let beta = g.index_select(r.beta, 0, &rep)?;
            let cam = g.index_select(r.cam, 0, &rep)?;
            let smesh = self.pose_var(g, theta, beta)?;
            let sel: Vec<usize> = (0..samples).flat_map(|k| kp_idx.iter().map(move |&f| k * t + f)).collect();
            let pj = g.index_select(smesh.joints, 0, &sel)?;
            let cam = g.index_select(cam, 0, &sel)?;
            let (kp, conf) = kp_targets(g, samples)?;
            terms.push((Term::Exp2d, loss_2d_var(g, pj, cam, kp, conf)?));
        }
        let mseq = g.reshape(r.mode, &[1, t, d])?;
        let dm = self.disc.discriminate_var(g, p, mseq)?;
        terms.push((Term::ModeAdv, adv_loss_var(g, dm)?));
        let sseq = g.reshape(theta, &[samples, t, d])?;
        let ds = self.disc.discriminate_var(g, p, sseq)?;
        terms.push((Term::ExpAdv, adv_loss_var(g, ds)?));

        terms.sort_by_key(|(term, _)| *term);
        let mut report = LossReport::new();
        let mut weighted = Vec::with_capacity(terms.len());
        for (term, v) in terms {
            report.set(term, g.value(v).item().to_f64_lossy())?;
            let w = g.scale(v, T::lit(weights.get(term)))?;
            weighted.push(g.reshape(w, &[1])?);
        }
        let all = g.concat(&weighted, 0)?;
        let total = g.sum(all)?;

        let mut fakes = vec![g.value(r.mode).clone()];
        let sv = g.value(theta);
        for k in 0..samples {
            fakes.push(Tensor::from_vec(&[t, d], sv.data()[k * t * d..(k + 1) * t * d].to_vec())?);
        }
        Ok(ItemLoss { total, report, fakes })
    }
}

impl PoseModel<f64> {
    pub fn checkpoint(&self, params: &ParamSet<f64>) -> Result<CheckpointFile> {
        Ok(CheckpointFile::new(serde_json::to_value(&self.config)?, params))
    }

    /// Model and parameters stored in a checkpoint.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Self, ParamSet<f64>)> {
        let file = CheckpointFile::load(path)?;
        let config: Config = serde_json::from_value(file.config.clone())?;
        let model = Self::from_config(config)?;
        let params = ParamSet::from_file(&file.params)?;
        let expected = model.init_params(0)?;
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(shape_err("checkpoint", got.shape(), t.shape()));
            }
        }
        Ok((model, params))
    }
}
