//! Parametric body model: shape blending, joint regression, forward
//! kinematics and linear blend skinning.
//!
//! Model files are JSON with the fields `version`, `N`, `J`, `B`,
//! `template` (N×3), `shape_dirs` (flattened N·3·B, index `(n·3 + k)·B + b`),
//! `joint_regressor` (J×N), `parents` (J, `-1` for the root), `skin_weights`
//! (N×J) and optionally `faces`, `joint_names` and `pose_dirs`. Pose
//! corrective offsets in `pose_dirs` are accepted but ignored.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::rotations::{mat_identity, matrices_to_tensor, Mat3};
use crate::scalar::Scalar;

pub const MODEL_VERSION: u32 = 1;
pub const ROW_SUM_TOL: f64 = 1e-6;
/// Plausibility bound on shape coefficients at ingestion.
pub const BETA_LIMIT: f64 = 10.0;

const TOY_MODEL: &str = include_str!("../assets/toy_body.json");

#[derive(Debug, Default, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ModelFile {
    version: Option<u32>,
    N: Option<usize>,
    J: Option<usize>,
    B: Option<usize>,
    template: Option<Vec<Vec<f64>>>,
    shape_dirs: Option<Vec<f64>>,
    joint_regressor: Option<Vec<Vec<f64>>>,
    parents: Option<Vec<i64>>,
    skin_weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    faces: Option<Vec<[usize; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose_dirs: Option<Vec<f64>>,
}

fn need<V>(v: Option<V>, field: &str) -> Result<V> {
    v.ok_or_else(|| Error::MissingField(field.to_string()))
}

fn invalid(field: &'static str, index: usize, msg: impl Into<String>) -> Error {
    Error::Validation {
        field,
        index,
        msg: msg.into(),
    }
}

fn matrix(field: &'static str, rows: Vec<Vec<f64>>, n: usize, m: usize) -> Result<Vec<f64>> {
    if rows.len() != n {
        return Err(invalid(field, rows.len(), format!("expected {n} rows, found {}", rows.len())));
    }
    let mut out = Vec::with_capacity(n * m);
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != m {
            return Err(invalid(field, i, format!("expected {m} columns, found {}", r.len())));
        }
        if let Some(v) = r.iter().find(|v| !v.is_finite()) {
            return Err(invalid(field, i, format!("non-finite entry {v}")));
        }
        out.extend(r);
    }
    Ok(out)
}

fn check_rows(field: &'static str, data: &[f64], width: usize) -> Result<()> {
    for (i, row) in data.chunks(width).enumerate() {
        if let Some(v) = row.iter().find(|&&v| v < 0.0) {
            return Err(invalid(field, i, format!("negative weight {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(invalid(field, i, format!("row sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Parents must form a tree rooted at joint 0. Returns an evaluation order
/// in which every joint follows its parent.
fn kinematic_order(parents: &[Option<usize>]) -> Result<Vec<usize>> {
    let j = parents.len();
    for (i, p) in parents.iter().enumerate() {
        match (i, p) {
            (0, Some(_)) => return Err(invalid("parents", 0, "joint 0 must be the root")),
            (i, None) if i > 0 => return Err(invalid("parents", i, "only joint 0 may be a root")),
            (_, Some(p)) if *p >= j => return Err(invalid("parents", i, format!("parent {p} out of range"))),
            _ => {}
        }
    }
    let mut depth = vec![usize::MAX; j];
    for start in 0..j {
        let mut chain = Vec::new();
        let mut cur = start;
        while depth[cur] == usize::MAX {
            if chain.contains(&cur) {
                return Err(Error::Cycle(cur));
            }
            chain.push(cur);
            match parents[cur] {
                Some(p) => cur = p,
                None => {
                    depth[cur] = 0;
                    chain.pop();
                    break;
                }
            }
        }
        let mut d = depth[cur];
        for &c in chain.iter().rev() {
            d += 1;
            depth[c] = d;
        }
    }
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by_key(|&i| (depth[i], i));
    Ok(order)
}

/// Body model with precomputed rest-joint bases.
#[derive(Clone, Debug)]
pub struct BodyModel<T> {
    n: usize,
    j: usize,
    b: usize,
    template: Tensor<T>,
    shape_dirs: Tensor<T>,
    joint_regressor: Tensor<T>,
    parents: Vec<Option<usize>>,
    skin_weights: Tensor<T>,
    faces: Option<Vec<[usize; 3]>>,
    joint_names: Vec<String>,
    order: Vec<usize>,
    // joint_regressor · template, (J·3)
    rest_joints: Tensor<T>,
    // shape_dirs mapped through the regressor, (B, J·3)
    joint_dirs_t: Tensor<T>,
    // shape_dirs transposed, (B, N·3)
    shape_dirs_t: Tensor<T>,
}

/// Result of posing the model; all positions in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshOutput<T> {
    pub vertices: Vec<[T; 3]>,
    /// Rest joints of the shaped template.
    pub joints: Vec<[T; 3]>,
    pub posed_joints: Vec<[T; 3]>,
}

/// Graph handles produced by [`BodyModel::forward_var`].
#[derive(Clone, Copy, Debug)]
pub struct MeshVars {
    /// `(M, N, 3)`
    pub vertices: Var,
    /// `(M, J, 3)` regressed from the posed vertices
    pub joints: Var,
}

impl BodyModel<f64> {
    /// The bundled 64-vertex, 8-joint, 4-shape-direction model.
    pub fn toy() -> Self {
        Self::from_json(TOY_MODEL).expect("bundled toy model is valid")
    }
}

impl<T: Scalar> BodyModel<T> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    fn from_file(f: ModelFile) -> Result<Self> {
        let version = need(f.version, "version")?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let (n, j, b) = (need(f.N, "N")?, need(f.J, "J")?, need(f.B, "B")?);
        if n == 0 || j == 0 || b == 0 {
            return Err(Error::Validation {
                field: "N/J/B",
                index: 0,
                msg: "extents must be positive".into(),
            });
        }
        let template = matrix("template", need(f.template, "template")?, n, 3)?;
        let shape_dirs = need(f.shape_dirs, "shape_dirs")?;
        if shape_dirs.len() != n * 3 * b {
            return Err(invalid("shape_dirs", shape_dirs.len(), format!("expected {} entries", n * 3 * b)));
        }
        if let Some(i) = shape_dirs.iter().position(|v| !v.is_finite()) {
            return Err(invalid("shape_dirs", i, "non-finite entry"));
        }
        let jreg = matrix("joint_regressor", need(f.joint_regressor, "joint_regressor")?, j, n)?;
        check_rows("joint_regressor", &jreg, n)?;
        let skin = matrix("skin_weights", need(f.skin_weights, "skin_weights")?, n, j)?;
        check_rows("skin_weights", &skin, j)?;
        let raw_parents = need(f.parents, "parents")?;
        if raw_parents.len() != j {
            return Err(invalid("parents", raw_parents.len(), format!("expected {j} entries")));
        }
        let parents = raw_parents
            .iter()
            .enumerate()
            .map(|(i, &p)| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(invalid("parents", i, format!("bad parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let order = kinematic_order(&parents)?;
        if let Some(faces) = &f.faces {
            if let Some(i) = faces.iter().position(|t| t.iter().any(|&v| v >= n)) {
                return Err(invalid("faces", i, "vertex index out of range"));
            }
        }
        let joint_names = f
            .joint_names
            .unwrap_or_else(|| (0..j).map(|i| format!("joint_{i}")).collect());
        if joint_names.len() != j {
            return Err(invalid("joint_names", joint_names.len(), format!("expected {j} names")));
        }

        let template = Tensor::from_f64(&[n, 3], &template)?;
        let shape_dirs = Tensor::from_f64(&[n * 3, b], &shape_dirs)?;
        let joint_regressor = Tensor::from_f64(&[j, n], &jreg)?;
        let skin_weights = Tensor::from_f64(&[n, j], &skin)?;
        let rest_joints = joint_regressor.matmul(&template)?.reshape(&[j * 3])?;
        let dirs3 = shape_dirs.reshape(&[n, 3 * b])?;
        let joint_dirs_t = joint_regressor
            .matmul(&dirs3)?
            .reshape(&[j * 3, b])?
            .transpose()?;
        let shape_dirs_t = shape_dirs.transpose()?;
        Ok(Self {
            n,
            j,
            b,
            template,
            shape_dirs,
            joint_regressor,
            parents,
            skin_weights,
            faces: f.faces,
            joint_names,
            order,
            rest_joints,
            joint_dirs_t,
            shape_dirs_t,
        })
    }

    /// Serializes back to the JSON model format.
    pub fn to_json(&self) -> Result<String> {
        let rows = |t: &Tensor<T>| -> Vec<Vec<f64>> {
            let w = t.shape()[1];
            t.to_f64_vec().chunks(w).map(|c| c.to_vec()).collect()
        };
        let file = ModelFile {
            version: Some(MODEL_VERSION),
            N: Some(self.n),
            J: Some(self.j),
            B: Some(self.b),
            template: Some(rows(&self.template)),
            shape_dirs: Some(self.shape_dirs.to_f64_vec()),
            joint_regressor: Some(rows(&self.joint_regressor)),
            parents: Some(self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()),
            skin_weights: Some(rows(&self.skin_weights)),
            faces: self.faces.clone(),
            joint_names: Some(self.joint_names.clone()),
            pose_dirs: None,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    pub fn num_joints(&self) -> usize {
        self.j
    }

    pub fn num_betas(&self) -> usize {
        self.b
    }

    /// Flow dimension for this model: 6 per joint.
    pub fn pose_dim(&self) -> usize {
        6 * self.j
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn faces(&self) -> Option<&[[usize; 3]]> {
        self.faces.as_deref()
    }

    pub fn template(&self) -> &Tensor<T> {
        &self.template
    }

    /// `(N·3, B)`
    pub fn shape_dirs(&self) -> &Tensor<T> {
        &self.shape_dirs
    }

    pub fn joint_regressor(&self) -> &Tensor<T> {
        &self.joint_regressor
    }

    pub fn skin_weights(&self) -> &Tensor<T> {
        &self.skin_weights
    }

    pub fn cast<U: Scalar>(&self) -> BodyModel<U> {
        BodyModel {
            n: self.n,
            j: self.j,
            b: self.b,
            template: self.template.cast(),
            shape_dirs: self.shape_dirs.cast(),
            joint_regressor: self.joint_regressor.cast(),
            parents: self.parents.clone(),
            skin_weights: self.skin_weights.cast(),
            faces: self.faces.clone(),
            joint_names: self.joint_names.clone(),
            order: self.order.clone(),
            rest_joints: self.rest_joints.cast(),
            joint_dirs_t: self.joint_dirs_t.cast(),
            shape_dirs_t: self.shape_dirs_t.cast(),
        }
    }

    /// Rejects non-finite or implausibly large shape coefficients.
    pub fn check_beta(&self, beta: &[T]) -> Result<()> {
        if beta.len() != self.b {
            return Err(shape_err("beta", &[beta.len()], &[self.b]));
        }
        if let Some(i) = beta
            .iter()
            .position(|v| !v.is_finite() || v.abs() > T::lit(BETA_LIMIT))
        {
            return Err(invalid("beta", i, format!("|beta| must be finite and at most {BETA_LIMIT}")));
        }
        Ok(())
    }

    /// Batched forward pass.
    ///
    /// `rots` holds `M·J` rotation matrices as `(M·J, 3, 3)` (frame-major),
    /// `beta` is `(M, B)`.
    pub fn forward_var(&self, g: &mut Graph<T>, rots: Var, beta: Var) -> Result<MeshVars> {
        let (n, j, b) = (self.n, self.j, self.b);
        let bs = g.shape(beta).to_vec();
        if bs.len() != 2 || bs[1] != b {
            return Err(shape_err("body_model.forward", &bs, &[0, b]));
        }
        let m = bs[0];
        if g.shape(rots) != [m * j, 3, 3] {
            let s = g.shape(rots).to_vec();
            return Err(shape_err("body_model.forward", &s, &[m * j, 3, 3]));
        }
        // shaped template and rest joints
        let dirs_t = g.constant(self.shape_dirs_t.clone());
        let tmpl = g.constant(self.template.reshape(&[n * 3])?);
        let off = g.matmul(beta, dirs_t)?;
        let v_shaped = g.add(off, tmpl)?; // (M, N·3)
        let jdirs_t = g.constant(self.joint_dirs_t.clone());
        let jrest = g.constant(self.rest_joints.clone());
        let joff = g.matmul(beta, jdirs_t)?;
        let joints = g.add(joff, jrest)?; // (M, J·3)

        // kinematic chain: global rotations G_i and displacements
        // d_i = t_i − J_i, so the identity pose gives G_i − I = 0 and d_i = 0
        // exactly
        let rflat = g.reshape(rots, &[m, j * 9])?;
        let eye = g.constant(Tensor::eye(3).reshape(&[1, 3, 3])?);
        let eye = g.expand(eye, &[m, 3, 3])?;
        let zero = g.constant(Tensor::zeros(&[m, 3, 1]));
        let mut glob: Vec<Option<(Var, Var)>> = vec![None; j];
        let mut loc: Vec<Option<Var>> = vec![None; j];
        for &i in &self.order {
            let r = g.slice(rflat, 1, i * 9, i * 9 + 9)?;
            let r = g.reshape(r, &[m, 3, 3])?;
            let ji = g.slice(joints, 1, i * 3, i * 3 + 3)?;
            let ji = g.reshape(ji, &[m, 3, 1])?;
            loc[i] = Some(ji);
            let (rot, disp) = match self.parents[i] {
                None => (r, zero),
                Some(p) => {
                    let (gp, dp) = glob[p].expect("parent evaluated first");
                    let jp = loc[p].expect("parent evaluated first");
                    let rel = g.sub(ji, jp)?;
                    let moved = g.bmm(gp, rel)?;
                    let moved = g.sub(moved, rel)?;
                    (g.bmm(gp, r)?, g.add(dp, moved)?)
                }
            };
            glob[i] = Some((rot, disp));
        }
        // B_i = [G_i − I | d_i − (G_i − I)·J_i], vertex = v + Σ w_i·B_i·[v; 1]
        let mut blocks = Vec::with_capacity(j);
        for i in 0..j {
            let (gi, di) = glob[i].expect("every joint evaluated");
            let gi = g.sub(gi, eye)?;
            let gj = g.bmm(gi, loc[i].expect("every joint evaluated"))?;
            let t = g.sub(di, gj)?;
            let a = g.concat(&[gi, t], 2)?; // (M, 3, 4)
            blocks.push(g.reshape(a, &[m, 1, 12])?);
        }
        let a = g.concat(&blocks, 1)?; // (M, J, 12)

        // skinning
        let w = g.constant(self.skin_weights.clone());
        let w = g.expand(w, &[m, n, j])?;
        let blended = g.bmm(w, a)?; // (M, N, 12)
        let blended = g.reshape(blended, &[m * n, 3, 4])?;
        let vs = g.reshape(v_shaped, &[m * n, 3])?;
        let ones = g.constant(Tensor::ones(&[m * n, 1]));
        let vh = g.concat(&[vs, ones], 1)?;
        let vh = g.reshape(vh, &[m * n, 4, 1])?;
        let delta = g.bmm(blended, vh)?;
        let delta = g.reshape(delta, &[m * n, 3])?;
        let verts = g.add(vs, delta)?;
        let verts = g.reshape(verts, &[m, n, 3])?;
        let joints = self.regress_joints_var(g, verts)?;
        Ok(MeshVars {
            vertices: verts,
            joints,
        })
    }

    /// Joint regressor applied to `(M, N, 3)` vertices, giving `(M, J, 3)`.
    pub fn regress_joints_var(&self, g: &mut Graph<T>, verts: Var) -> Result<Var> {
        let s = g.shape(verts).to_vec();
        if s.len() != 3 || s[1] != self.n || s[2] != 3 {
            return Err(shape_err("regress_joints", &s, &[0, self.n, 3]));
        }
        let jr = g.constant(self.joint_regressor.clone());
        let jr = g.expand(jr, &[s[0], self.j, self.n])?;
        g.bmm(jr, verts)
    }

    /// Poses one frame. `pose` holds J rotation matrices, joint 0 global.
    pub fn forward(&self, pose: &[Mat3<T>], beta: &[T]) -> Result<MeshOutput<T>> {
        if pose.len() != self.j {
            return Err(shape_err("body_model.forward", &[pose.len(), 3, 3], &[self.j, 3, 3]));
        }
        self.check_beta(beta)?;
        let mut g = Graph::new();
        let rots = g.constant(matrices_to_tensor(pose));
        let beta_v = g.constant(Tensor::from_vec(&[1, self.b], beta.to_vec())?);
        let out = self.forward_var(&mut g, rots, beta_v)?;
        let rest = self.rest_joints_for(beta)?;
        Ok(MeshOutput {
            vertices: to_points(g.value(out.vertices)),
            joints: rest,
            posed_joints: to_points(g.value(out.joints)),
        })
    }

    /// Forward pass at the identity pose.
    pub fn rest_mesh(&self, beta: &[T]) -> Result<MeshOutput<T>> {
        self.forward(&vec![mat_identity(); self.j], beta)
    }

    /// `template + shape_dirs·β`
    pub fn shaped_template(&self, beta: &[T]) -> Result<Vec<[T; 3]>> {
        self.check_beta(beta)?;
        let bt = Tensor::from_vec(&[1, self.b], beta.to_vec())?;
        let off = bt.matmul(&self.shape_dirs_t)?;
        let v = off.zip_map(&self.template.reshape(&[1, self.n * 3])?, |a, b| a + b)?;
        Ok(to_points(&v))
    }

    fn rest_joints_for(&self, beta: &[T]) -> Result<Vec<[T; 3]>> {
        let bt = Tensor::from_vec(&[1, self.b], beta.to_vec())?;
        let off = bt.matmul(&self.joint_dirs_t)?;
        let v = off.zip_map(&self.rest_joints.reshape(&[1, self.j * 3])?, |a, b| a + b)?;
        Ok(to_points(&v))
    }

    /// Joint regressor applied to a vertex set.
    pub fn regress_joints3d(&self, vertices: &[[T; 3]]) -> Result<Vec<[T; 3]>> {
        if vertices.len() != self.n {
            return Err(shape_err("regress_joints", &[vertices.len(), 3], &[self.n, 3]));
        }
        let v = points_to_tensor(vertices);
        Ok(to_points(&self.joint_regressor.matmul(&v)?))
    }

    /// Writes vertices and faces as Wavefront OBJ with 9 significant digits.
    pub fn write_obj(&self, vertices: &[[T; 3]], mut w: impl Write) -> Result<()> {
        if vertices.len() != self.n {
            return Err(shape_err("write_obj", &[vertices.len(), 3], &[self.n, 3]));
        }
        for v in vertices {
            writeln!(
                w,
                "v {} {} {}",
                sig9(v[0].to_f64_lossy()),
                sig9(v[1].to_f64_lossy()),
                sig9(v[2].to_f64_lossy())
            )?;
        }
        for f in self.faces.iter().flatten() {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }
}

/// Formats with 9 significant digits, without an exponent for ordinary
/// body-scale magnitudes.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..9).contains(&mag) {
        let decimals = (8 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

pub(crate) fn to_points<T: Scalar>(t: &Tensor<T>) -> Vec<[T; 3]> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub(crate) fn points_to_tensor<T: Scalar>(p: &[[T; 3]]) -> Tensor<T> {
    Tensor::from_vec(&[p.len(), 3], p.iter().flatten().copied().collect()).expect("non-empty point set")
}
