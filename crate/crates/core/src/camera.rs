//! Weak-perspective camera: `x2d = s·(x, y) + t`, depth discarded.
//!
//! Image coordinates are normalized to `[-1, 1]` over the frame crop.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Graph, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams<T> {
    pub s: T,
    pub t: [T; 2],
}

impl<T: Scalar> CameraParams<T> {
    pub fn new(s: T, t: [T; 2]) -> Result<Self> {
        let c = Self { s, t };
        c.validate()?;
        Ok(c)
    }

    pub fn identity() -> Self {
        Self {
            s: T::one(),
            t: [T::zero(); 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > T::zero()) || !self.s.is_finite() || !self.t.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain {
                op: "camera",
                msg: format!("scale must be positive and finite, got {}", self.s),
            });
        }
        Ok(())
    }

    /// `(s, tx, ty)`
    pub fn to_array(self) -> [T; 3] {
        [self.s, self.t[0], self.t[1]]
    }

    pub fn from_array(a: [T; 3]) -> Result<Self> {
        Self::new(a[0], [a[1], a[2]])
    }
}

pub fn project<T: Scalar>(points: &[[T; 3]], cam: &CameraParams<T>) -> Result<Vec<[T; 2]>> {
    cam.validate()?;
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "project" });
    }
    Ok(points
        .iter()
        .map(|p| [cam.s * p[0] + cam.t[0], cam.s * p[1] + cam.t[1]])
        .collect())
}

/// Batched projection: points `(M, K, 3)` and cameras `(M, 3)` laid out as
/// `(s, tx, ty)` give `(M, K, 2)`.
pub fn project_var<T: Scalar>(g: &mut Graph<T>, points: Var, cam: Var) -> Result<Var> {
    let ps = g.shape(points).to_vec();
    let cs = g.shape(cam).to_vec();
    if ps.len() != 3 || ps[2] != 3 || cs != [ps[0], 3] {
        return Err(shape_err("project", &ps, &cs));
    }
    if g.value(cam).data().chunks(3).any(|c| !(c[0] > T::zero())) {
        return Err(Error::Domain {
            op: "project",
            msg: "camera scale must be positive".into(),
        });
    }
    let (m, k) = (ps[0], ps[1]);
    let xy = g.slice(points, 2, 0, 2)?;
    let s = g.slice(cam, 1, 0, 1)?;
    let s = g.reshape(s, &[m, 1, 1])?;
    let s = g.expand(s, &[m, k, 2])?;
    let t = g.slice(cam, 1, 1, 3)?;
    let t = g.reshape(t, &[m, 1, 2])?;
    let t = g.expand(t, &[m, k, 2])?;
    let scaled = g.mul(s, xy)?;
    g.add(scaled, t)
}
