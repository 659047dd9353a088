//! Per-frame observation encoder: a two-layer network on the flattened
//! keypoints `[x·conf, y·conf, conf]` of every joint.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{init_mlp2, mlp2, Init};
use crate::numeric::{Bound, Graph, ParamSet, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ObservationEncoder {
    joints: usize,
    hidden: usize,
    feature: usize,
    prefix: String,
}

/// Network input for one sequence: `(T, 3J)`.
pub fn observation_tensor<T: Scalar>(keypoints: &[Vec<[f64; 2]>], confidence: &[Vec<f64>]) -> Result<Tensor<T>> {
    let t = keypoints.len();
    if t == 0 || confidence.len() != t {
        return Err(shape_err("observations", &[t], &[confidence.len()]));
    }
    let j = keypoints[0].len();
    let mut data = Vec::with_capacity(t * j * 3);
    for (f, (kp, cf)) in keypoints.iter().zip(confidence).enumerate() {
        if kp.len() != j || cf.len() != j {
            return Err(Error::Frame {
                frame: f,
                msg: format!("expected {j} joints, found {} keypoints and {} confidences", kp.len(), cf.len()),
            });
        }
        for (p, &c) in kp.iter().zip(cf) {
            data.extend([T::lit(p[0] * c), T::lit(p[1] * c), T::lit(c)]);
        }
    }
    Tensor::from_vec(&[t, 3 * j], data)
}

impl ObservationEncoder {
    pub fn new(joints: usize, hidden: usize, feature: usize, prefix: impl Into<String>) -> Result<Self> {
        if joints == 0 || hidden == 0 || feature == 0 {
            return Err(Error::Config("observation encoder extents must be positive".into()));
        }
        Ok(Self {
            joints,
            hidden,
            feature,
            prefix: prefix.into(),
        })
    }

    fn name(&self) -> String {
        format!("{}mlp", self.prefix)
    }

    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        init_mlp2(
            &mut p,
            &self.name(),
            3 * self.joints,
            self.hidden,
            self.feature,
            Init::Scaled(1.0),
            rng,
        );
        p
    }

    /// `(T, 3J)` → `(T, F)`.
    pub fn encode_var<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, obs: Var) -> Result<Var> {
        let s = g.shape(obs).to_vec();
        if s.len() != 2 || s[1] != 3 * self.joints {
            return Err(shape_err("encode_observation", &s, &[0, 3 * self.joints]));
        }
        mlp2(g, p, &self.name(), obs)
    }

    pub fn encode<T: Scalar>(&self, params: &ParamSet<T>, obs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.filter_prefix(&self.prefix).bind(&mut g, |_| false);
        let o = g.constant(obs.clone());
        let f = self.encode_var(&mut g, &p, o)?;
        Ok(g.value(f).clone())
    }
}
