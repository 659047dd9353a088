//! Synthetic motion sequences.
//!
//! Every joint's axis-angle components follow a sum of 1 to 3 sinusoids
//! with total amplitude at most `max_amplitude` and periods of at least
//! `min_period` frames. The body is posed with the given model and viewed
//! through a weak-perspective camera fixed per sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{to_points, BodyModel};
use crate::camera::{project, CameraParams};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor};
use crate::rotations::{axis_angle_to_matrix, matrices_to_tensor, AxisAngle, Mat3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub frames: usize,
    pub fps: f64,
    /// Standard deviation of keypoint noise, normalized image units.
    pub noise: f64,
    /// Probability that a joint is marked occluded (confidence 0).
    pub occlusion: f64,
    pub max_sinusoids: usize,
    pub max_amplitude: f64,
    pub min_period: f64,
    pub max_period: f64,
    pub beta_std: f64,
    pub scale_range: [f64; 2],
    pub translation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            fps: 25.0,
            noise: 0.01,
            occlusion: 0.1,
            max_sinusoids: 3,
            max_amplitude: 0.6,
            min_period: 8.0,
            max_period: 48.0,
            beta_std: 0.5,
            scale_range: [0.8, 1.2],
            translation: 0.1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frames >= 1
            && self.fps > 0.0
            && self.noise >= 0.0
            && (0.0..=1.0).contains(&self.occlusion)
            && self.max_sinusoids >= 1
            && self.max_amplitude >= 0.0
            && self.min_period > 0.0
            && self.max_period >= self.min_period
            && self.beta_std >= 0.0
            && self.scale_range[0] > 0.0
            && self.scale_range[1] >= self.scale_range[0]
            && self.translation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid generator settings: {self:?}")))
        }
    }

    /// Upper bound on `|x(t+1) − 2x(t) + x(t−1)|` for any single axis-angle
    /// component of a generated trajectory.
    pub fn second_difference_bound(&self) -> f64 {
        let w = 2.0 * std::f64::consts::PI / self.min_period;
        self.max_amplitude * w * w
    }
}

/// One generated sequence. Per-frame arrays are indexed `[t][joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub fps: f64,
    pub theta: Vec<Vec<[f64; 3]>>,
    pub beta: Vec<f64>,
    pub cam: CameraParams<f64>,
    pub joints3d: Vec<Vec<[f64; 3]>>,
    pub vertices: Vec<Vec<[f64; 3]>>,
    pub clean_keypoints: Vec<Vec<[f64; 2]>>,
    pub keypoints: Vec<Vec<[f64; 2]>>,
    pub confidence: Vec<Vec<f64>>,
}

impl SyntheticSequence {
    pub fn frames(&self) -> usize {
        self.theta.len()
    }

    pub fn joints(&self) -> usize {
        self.theta[0].len()
    }

    /// Rotation matrices of frame `t`.
    pub fn rotations(&self, t: usize) -> Result<Vec<Mat3<f64>>> {
        self.theta[t]
            .iter()
            .map(|v| axis_angle_to_matrix(&AxisAngle(*v)))
            .collect()
    }

    /// Ground-truth pose of frame `t` in the 6D representation.
    pub fn theta6d(&self, t: usize) -> Result<Vec<f64>> {
        Ok(self
            .rotations(t)?
            .iter()
            .flat_map(|r| [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]])
            .collect())
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> SyntheticSequence {
        let r = start..start + len;
        SyntheticSequence {
            fps: self.fps,
            theta: self.theta[r.clone()].to_vec(),
            beta: self.beta.clone(),
            cam: self.cam,
            joints3d: self.joints3d[r.clone()].to_vec(),
            vertices: self.vertices[r.clone()].to_vec(),
            clean_keypoints: self.clean_keypoints[r.clone()].to_vec(),
            keypoints: self.keypoints[r.clone()].to_vec(),
            confidence: self.confidence[r].to_vec(),
        }
    }
}

/// Poses `frames` (each J rotations) with a shared β; returns per-frame
/// vertices and regressed joints.
pub fn pose_frames(
    model: &BodyModel<f64>,
    frames: &[Vec<Mat3<f64>>],
    beta: &[f64],
) -> Result<(Vec<Vec<[f64; 3]>>, Vec<Vec<[f64; 3]>>)> {
    model.check_beta(beta)?;
    let m = frames.len();
    let all: Vec<Mat3<f64>> = frames.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let rots = g.constant(matrices_to_tensor(&all));
    let b = g.constant(Tensor::from_vec(&[m, beta.len()], beta.repeat(m))?);
    let out = model.forward_var(&mut g, rots, b)?;
    let n = model.num_vertices();
    let j = model.num_joints();
    let verts = to_points(g.value(out.vertices));
    let joints = to_points(g.value(out.joints));
    Ok((
        verts.chunks(n).map(|c| c.to_vec()).collect(),
        joints.chunks(j).map(|c| c.to_vec()).collect(),
    ))
}

fn sinusoid_track<R: Rng + ?Sized>(rng: &mut R, cfg: &GeneratorConfig) -> Vec<(f64, f64, f64)> {
    let count = rng.random_range(1..=cfg.max_sinusoids);
    let total = rng.random_range(0.0..=cfg.max_amplitude);
    let shares: Vec<f64> = (0..count).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = shares.iter().sum();
    shares
        .iter()
        .map(|s| {
            let period = rng.random_range(cfg.min_period..=cfg.max_period);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (total * s / sum, period, phase)
        })
        .collect()
}

/// Generates one sequence from `rng`.
pub fn generate_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    model: &BodyModel<f64>,
    cfg: &GeneratorConfig,
) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let (t_len, j) = (cfg.frames, model.num_joints());
    let tracks: Vec<Vec<Vec<(f64, f64, f64)>>> = (0..j)
        .map(|_| (0..3).map(|_| sinusoid_track(rng, cfg)).collect())
        .collect();
    let theta: Vec<Vec<[f64; 3]>> = (0..t_len)
        .map(|t| {
            tracks
                .iter()
                .map(|joint| {
                    let mut v = [0.0; 3];
                    for (k, track) in joint.iter().enumerate() {
                        v[k] = track
                            .iter()
                            .map(|&(a, p, ph)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin())
                            .sum();
                    }
                    v
                })
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, cfg.beta_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let beta: Vec<f64> = (0..model.num_betas())
        .map(|_| normal.sample(rng).clamp(-crate::body_model::BETA_LIMIT, crate::body_model::BETA_LIMIT))
        .collect();
    let s = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let tr = cfg.translation;
    let cam = CameraParams::new(s, [rng.random_range(-tr..=tr), rng.random_range(-tr..=tr)])?;

    let rots = theta
        .iter()
        .map(|f| f.iter().map(|v| axis_angle_to_matrix(&AxisAngle(*v))).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let (vertices, joints3d) = pose_frames(model, &rots, &beta)?;
    let clean: Vec<Vec<[f64; 2]>> = joints3d
        .iter()
        .map(|js| project(js, &cam))
        .collect::<Result<_>>()?;
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut keypoints = clean.clone();
    let mut confidence = vec![vec![1.0; j]; t_len];
    for t in 0..t_len {
        for k in 0..j {
            if cfg.noise > 0.0 {
                keypoints[t][k][0] += noise.sample(rng);
                keypoints[t][k][1] += noise.sample(rng);
            }
            if cfg.occlusion > 0.0 && rng.random_bool(cfg.occlusion) {
                confidence[t][k] = 0.0;
            }
        }
    }
    Ok(SyntheticSequence {
        fps: cfg.fps,
        theta,
        beta,
        cam,
        joints3d,
        vertices,
        clean_keypoints: clean,
        keypoints,
        confidence,
    })
}

/// Sequence `index` of the stream seeded by `seed`; independent of how many
/// other sequences are generated.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` sequences in parallel with per-sequence streams.
pub fn generate_dataset(
    seed: u64,
    count: usize,
    model: &BodyModel<f64>,
    cfg: &GeneratorConfig,
) -> Result<Vec<SyntheticSequence>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_sequence(&mut sequence_rng(seed, i as u64), model, cfg))
        .collect()
}
