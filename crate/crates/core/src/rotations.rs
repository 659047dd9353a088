//! Axis-angle, rotation matrix and 6D rotation conversions.
//!
//! Matrices are row-major `[[T; 3]; 3]`. A 6D rotation stores the first two
//! columns of a matrix; flattened it reads `(a1.x, a1.y, a1.z, a2.x, a2.y, a2.z)`.
//!
//! The `*_var` functions are batched graph versions operating on `(M, 6)`,
//! `(M, 3)` and `(M, 3, 3)` tensors.

use crate::error::{Error, Result};
use crate::numeric::graph::{sinc_sqrt, vers_sqrt};
use crate::numeric::{Graph, Tensor, Var};
use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Two 3-vectors spanning the first two columns of a rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D<T> {
    pub a1: Vec3<T>,
    pub a2: Vec3<T>,
}

/// Rotation vector: unit axis times angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle<T>(pub Vec3<T>);

/// Tolerance on `RᵀR = I` and `det R = 1` for matrices handed to conversions.
pub const ORTHO_TOL: f64 = 1e-6;

impl<T: Scalar> Rot6D<T> {
    pub fn identity() -> Self {
        Self {
            a1: [T::one(), T::zero(), T::zero()],
            a2: [T::zero(), T::one(), T::zero()],
        }
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self {
            a1: [v[0], v[1], v[2]],
            a2: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(self) -> [T; 6] {
        [self.a1[0], self.a1[1], self.a1[2], self.a2[0], self.a2[1], self.a2[2]]
    }
}

pub fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Scalar>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn mat_identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec<T: Scalar>(a: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn mat_transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn det<T: Scalar>(a: &Mat3<T>) -> T {
    dot(a[0], cross(a[1], a[2]))
}

fn column<T: Scalar>(r: &Mat3<T>, j: usize) -> Vec3<T> {
    [r[0][j], r[1][j], r[2][j]]
}

fn from_columns<T: Scalar>(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Mat3<T> {
    [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]]
}

/// Largest entry of `|RᵀR − I|` together with `|det R − 1|`.
pub fn orthonormality_error<T: Scalar>(r: &Mat3<T>) -> T {
    let rtr = mat_mul(&mat_transpose(r), r);
    let mut worst = (det(r) - T::one()).abs();
    for (i, row) in rtr.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

fn check_rotation<T: Scalar>(r: &Mat3<T>) -> Result<()> {
    if r.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite rotation matrix".into()));
    }
    let e = orthonormality_error(r);
    if e > T::lit(ORTHO_TOL) {
        return Err(Error::Degenerate(format!("not a rotation matrix (error {e})")));
    }
    Ok(())
}

/// Gram-Schmidt columns `(b1, b2)` of a 6D rotation.
fn gram_schmidt<T: Scalar>(r: &Rot6D<T>) -> Result<(Vec3<T>, Vec3<T>)> {
    if r.a1.iter().chain(&r.a2).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite 6D rotation".into()));
    }
    let n1 = norm(r.a1);
    if n1 <= T::min_positive_value().sqrt() {
        return Err(Error::Degenerate("zero first column in 6D rotation".into()));
    }
    let b1 = r.a1.map(|v| v / n1);
    let d = dot(b1, r.a2);
    let u = [r.a2[0] - d * b1[0], r.a2[1] - d * b1[1], r.a2[2] - d * b1[2]];
    let nu = norm(u);
    if nu <= T::epsilon().sqrt() * norm(r.a2) || nu <= T::min_positive_value().sqrt() {
        return Err(Error::Degenerate("parallel columns in 6D rotation".into()));
    }
    Ok((b1, u.map(|v| v / nu)))
}

pub fn rot6d_to_matrix<T: Scalar>(r: &Rot6D<T>) -> Result<Mat3<T>> {
    let (b1, b2) = gram_schmidt(r)?;
    Ok(from_columns(b1, b2, cross(b1, b2)))
}

pub fn matrix_to_rot6d<T: Scalar>(r: &Mat3<T>) -> Result<Rot6D<T>> {
    check_rotation(r)?;
    Ok(Rot6D {
        a1: column(r, 0),
        a2: column(r, 1),
    })
}

/// Rodrigues' formula. The coefficients switch to their Taylor series near
/// zero, so angles below 1e-8 reduce to `I + K + K²/2`.
pub fn axis_angle_to_matrix<T: Scalar>(v: &AxisAngle<T>) -> Result<Mat3<T>> {
    let v = v.0;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite axis-angle".into()));
    }
    let s = dot(v, v);
    let (a, b) = (sinc_sqrt(s), vers_sqrt(s));
    let k = skew(v);
    let k2 = mat_mul(&k, &k);
    let mut r = mat_identity();
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] += a * k[i][j] + b * k2[i][j];
        }
    }
    Ok(r)
}

fn skew<T: Scalar>(v: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
}

/// Inverse of [`axis_angle_to_matrix`] with the angle in `[0, π]`.
///
/// Near a half turn the axis comes from the dominant diagonal entry of the
/// symmetric part; at exactly π the sign is fixed so that component is
/// positive.
pub fn matrix_to_axis_angle<T: Scalar>(r: &Mat3<T>) -> Result<AxisAngle<T>> {
    check_rotation(r)?;
    let half = T::lit(0.5);
    let cos = ((r[0][0] + r[1][1] + r[2][2] - T::one()) * half).max(-T::one()).min(T::one());
    // 2 sinθ · axis
    let w = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let angle = (norm(w) * half).atan2(cos);
    if angle < T::lit(1e-6) {
        // first order: R ≈ I + [v]×
        return Ok(AxisAngle(w.map(|x| x * half)));
    }
    if angle < T::FRAC_PI_2() {
        let k = angle / (T::lit(2.0) * angle.sin());
        return Ok(AxisAngle(w.map(|x| x * k)));
    }
    // (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·n nᵀ
    let omc = T::one() - cos;
    let sym = |i: usize, j: usize| (r[i][j] + r[j][i]) * half - if i == j { cos } else { T::zero() };
    let i = (0..3)
        .max_by(|&a, &b| sym(a, a).partial_cmp(&sym(b, b)).unwrap())
        .unwrap();
    let denom = (sym(i, i) * omc).sqrt();
    let mut n = [sym(0, i) / denom, sym(1, i) / denom, sym(2, i) / denom];
    let nn = norm(n);
    n = n.map(|x| x / nn);
    let s = dot(n, w);
    let flip = if s.abs() > T::lit(1e-12) { s < T::zero() } else { n[i] < T::zero() };
    if flip {
        n = n.map(|x| -x);
    }
    Ok(AxisAngle(n.map(|x| x * angle)))
}

/// `‖r − matrix_to_rot6d(rot6d_to_matrix(r))‖²`
pub fn orth_residual<T: Scalar>(r: &Rot6D<T>) -> Result<T> {
    let (b1, b2) = gram_schmidt(r)?;
    Ok((0..3)
        .map(|i| (r.a1[i] - b1[i]).powi(2) + (r.a2[i] - b2[i]).powi(2))
        .sum())
}

/// Row-major `(M, 3, 3)` tensor from matrices.
pub fn matrices_to_tensor<T: Scalar>(ms: &[Mat3<T>]) -> Tensor<T> {
    let data: Vec<T> = ms.iter().flat_map(|m| m.iter().flatten().copied()).collect();
    Tensor::from_vec(&[ms.len(), 3, 3], data).expect("non-empty matrix list")
}

pub fn tensor_to_matrices<T: Scalar>(t: &Tensor<T>) -> Vec<Mat3<T>> {
    t.data()
        .chunks(9)
        .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
        .collect()
}

// -------------------------------------------------------------------
// graph versions

fn row_norm_expanded<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let m = g.shape(x)[0];
    let sq = g.square(x)?;
    let s = g.sum_axis(sq, 1)?;
    let n = g.sqrt(s)?;
    let n = g.reshape(n, &[m, 1])?;
    g.expand(n, &[m, 3])
}

/// Gram-Schmidt columns of `(M, 6)` rows, each `(M, 3)`.
fn gram_schmidt_var<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(crate::error::shape_err("rot6d_to_matrix", &shape, &[0, 6]));
    }
    let m = shape[0];
    let a1 = g.slice(x, 1, 0, 3)?;
    let a2 = g.slice(x, 1, 3, 6)?;
    let n1 = row_norm_expanded(g, a1)?;
    let b1 = g.div(a1, n1)?;
    let p = g.mul(b1, a2)?;
    let d = g.sum_axis(p, 1)?;
    let d = g.reshape(d, &[m, 1])?;
    let d = g.expand(d, &[m, 3])?;
    let proj = g.mul(d, b1)?;
    let u = g.sub(a2, proj)?;
    let nu = row_norm_expanded(g, u)?;
    let b2 = g.div(u, nu)?;
    Ok((b1, b2))
}

fn cross_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let a_yzx = g.index_select(a, 1, &[1, 2, 0])?;
    let a_zxy = g.index_select(a, 1, &[2, 0, 1])?;
    let b_yzx = g.index_select(b, 1, &[1, 2, 0])?;
    let b_zxy = g.index_select(b, 1, &[2, 0, 1])?;
    let l = g.mul(a_yzx, b_zxy)?;
    let r = g.mul(a_zxy, b_yzx)?;
    g.sub(l, r)
}

/// `(M, 6) → (M, 3, 3)`
pub fn rot6d_to_matrix_var<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let m = g.shape(x)[0];
    let (b1, b2) = gram_schmidt_var(g, x)?;
    let b3 = cross_var(g, b1, b2)?;
    // column-stacked (b1, b2, b3) → row-major R
    let cols = g.concat(&[b1, b2, b3], 1)?;
    let r = g.index_select(cols, 1, &[0, 3, 6, 1, 4, 7, 2, 5, 8])?;
    g.reshape(r, &[m, 3, 3])
}

/// `(M, 3, 3) → (M, 6)`: the first two columns.
pub fn matrix_to_rot6d_var<T: Scalar>(g: &mut Graph<T>, r: Var) -> Result<Var> {
    let m = g.shape(r)[0];
    let flat = g.reshape(r, &[m, 9])?;
    g.index_select(flat, 1, &[0, 3, 6, 1, 4, 7])
}

/// Per-row orthonormality residual of `(M, 6)` rows, shape `(M)`.
pub fn orth_residual_var<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b1, b2) = gram_schmidt_var(g, x)?;
    let b = g.concat(&[b1, b2], 1)?;
    let d = g.sub(x, b)?;
    let d2 = g.square(d)?;
    g.sum_axis(d2, 1)
}

/// `(M, 3) → (M, 3, 3)` via Rodrigues.
pub fn axis_angle_to_matrix_var<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(crate::error::shape_err("axis_angle_to_matrix", &shape, &[0, 3]));
    }
    let m = shape[0];
    let sq = g.square(v)?;
    let s = g.sum_axis(sq, 1)?;
    let a = g.sinc_sqrt(s)?;
    let b = g.vers_sqrt(s)?;
    let neg = g.neg(v)?;
    let zero = g.constant(Tensor::zeros(&[m, 1]));
    let ext = g.concat(&[v, neg, zero], 1)?;
    // [[0,-z,y],[z,0,-x],[-y,x,0]] over columns (x,y,z,-x,-y,-z,0)
    let k = g.index_select(ext, 1, &[6, 5, 1, 2, 6, 3, 4, 0, 6])?;
    let k = g.reshape(k, &[m, 3, 3])?;
    let k2 = g.bmm(k, k)?;
    let a = g.reshape(a, &[m, 1, 1])?;
    let a = g.expand(a, &[m, 3, 3])?;
    let b = g.reshape(b, &[m, 1, 1])?;
    let b = g.expand(b, &[m, 3, 3])?;
    let ak = g.mul(a, k)?;
    let bk2 = g.mul(b, k2)?;
    let sum = g.add(ak, bk2)?;
    let eye = g.constant(Tensor::eye(3));
    g.add(sum, eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn rot6d_examples() {
        let id = mat_identity::<f64>();
        let r = rot6d_to_matrix(&Rot6D::from_slice(&[1., 0., 0., 0., 1., 0.])).unwrap();
        assert!(close(&r, &id, 0.0));
        let r = rot6d_to_matrix(&Rot6D::from_slice(&[2., 0., 0., 0., 5., 0.])).unwrap();
        assert!(close(&r, &id, 0.0));
        assert!(rot6d_to_matrix(&Rot6D::from_slice(&[0., 0., 0., 0., 1., 0.])).is_err());
        assert!(rot6d_to_matrix(&Rot6D::from_slice(&[1., 0., 0., 3., 0., 0.])).is_err());
    }

    #[test]
    fn matrix_to_rot6d_examples() {
        let r6 = matrix_to_rot6d(&mat_identity::<f64>()).unwrap();
        assert_eq!(r6.to_array(), [1., 0., 0., 0., 1., 0.]);
        let qz = [[0., -1., 0.], [1., 0., 0.], [0., 0., 1.]];
        assert_eq!(matrix_to_rot6d(&qz).unwrap().to_array(), [0., 1., 0., -1., 0., 0.]);
        let bad = [[1.1, 0., 0.], [0., 1., 0.], [0., 0., 1.]];
        assert!(matrix_to_rot6d(&bad).is_err());
        let reflection = [[-1., 0., 0.], [0., 1., 0.], [0., 0., 1.]];
        assert!(matrix_to_rot6d(&reflection).is_err());
    }

    #[test]
    fn axis_angle_examples() {
        let r = axis_angle_to_matrix(&AxisAngle([0.0f64, 0., 0.])).unwrap();
        assert!(close(&r, &mat_identity(), 0.0));
        let r = axis_angle_to_matrix(&AxisAngle([PI, 0., 0.])).unwrap();
        assert!(close(&r, &[[1., 0., 0.], [0., -1., 0.], [0., 0., -1.]], 1e-15));
        let r = axis_angle_to_matrix(&AxisAngle([0., 0., FRAC_PI_2])).unwrap();
        assert!(close(&r, &[[0., -1., 0.], [1., 0., 0.], [0., 0., 1.]], 1e-15));
        // below the Taylor cutoff the result is I + K + K²/2
        let v = [3e-9, -1e-9, 2e-9];
        let r = axis_angle_to_matrix(&AxisAngle(v)).unwrap();
        let k = skew(v);
        let k2 = mat_mul(&k, &k);
        let mut expect = mat_identity();
        for i in 0..3 {
            for j in 0..3 {
                expect[i][j] += k[i][j] + 0.5 * k2[i][j];
            }
        }
        assert!(close(&r, &expect, 1e-24));
    }

    #[test]
    fn matrix_to_axis_angle_examples() {
        assert_eq!(matrix_to_axis_angle(&mat_identity::<f64>()).unwrap().0, [0., 0., 0.]);
        let v = matrix_to_axis_angle(&[[1., 0., 0.], [0., -1., 0.], [0., 0., -1.]]).unwrap().0;
        assert!((v[0] - PI).abs() < 1e-12 && v[1] == 0.0 && v[2] == 0.0, "{v:?}");
        assert!(matrix_to_axis_angle(&[[2.0, 0., 0.], [0., 1., 0.], [0., 0., 1.]]).is_err());
    }

    #[test]
    fn orth_residual_examples() {
        assert_eq!(orth_residual(&Rot6D::from_slice(&[1.0f64, 0., 0., 0., 1., 0.])).unwrap(), 0.0);
        assert_eq!(orth_residual(&Rot6D::from_slice(&[2.0f64, 0., 0., 0., 1., 0.])).unwrap(), 1.0);
    }

    #[test]
    fn single_precision() {
        let r = axis_angle_to_matrix(&AxisAngle([0.0f32, 0., 1.0])).unwrap();
        let back = matrix_to_axis_angle(&r).unwrap().0;
        assert!((back[2] - 1.0).abs() < 1e-5);
    }
}
