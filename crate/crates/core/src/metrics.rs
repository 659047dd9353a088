//! Pose metrics in millimetres (inputs in metres).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

const MM: f64 = 1000.0;

fn to_vecs<T: Scalar>(p: &[[T; 3]]) -> Vec<Vector3<f64>> {
    p.iter()
        .map(|v| Vector3::new(v[0].to_f64_lossy(), v[1].to_f64_lossy(), v[2].to_f64_lossy()))
        .collect()
}

fn check_pair<T>(op: &'static str, a: &[[T; 3]], b: &[[T; 3]]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err(op, &[a.len(), 3], &[b.len(), 3]));
    }
    Ok(())
}

fn mean(v: &[Vector3<f64>]) -> Vector3<f64> {
    v.iter().sum::<Vector3<f64>>() / v.len() as f64
}

/// Similarity transform `s·R·x + t` that best maps `pred` onto `gt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.scale * self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }
}

/// Closed-form least-squares similarity alignment (Umeyama).
pub fn procrustes<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<Similarity> {
    check_pair("procrustes", pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate("procrustes needs at least 3 points".into()));
    }
    let x = to_vecs(pred);
    let y = to_vecs(gt);
    if x.iter().chain(&y).any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite { op: "procrustes" });
    }
    let (mx, my) = (mean(&x), mean(&y));
    let k = x.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(&y) {
        let (a, b) = (a - mx, b - my);
        cov += b * a.transpose();
        var_x += a.norm_squared();
    }
    cov /= k;
    var_x /= k;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let d = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("finite singular values"));
    let (d0, d1) = (d[order[0]], d[order[1]]);
    if var_x <= f64::EPSILON || d0 <= 0.0 || d1 <= 1e-12 * d0 {
        return Err(Error::Degenerate("rank-deficient cross-covariance in procrustes".into()));
    }
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        // flip the axis of the smallest singular value
        s[(order[2], order[2])] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = (Matrix3::from_diagonal(&d) * s).trace() / var_x;
    let translation = my - scale * rotation * mx;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// `pred` after Procrustes alignment to `gt`.
pub fn procrustes_align<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<Vec<[f64; 3]>> {
    let sim = procrustes(pred, gt)?;
    Ok(to_vecs(pred)
        .iter()
        .map(|v| sim.apply([v.x, v.y, v.z]))
        .collect())
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

fn root_centred(p: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    p.iter().map(|v| v - p[0]).collect()
}

pub fn pa_mpjpe<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?;
    Ok(MM * mean_distance(&to_vecs(&aligned), &to_vecs(gt)))
}

/// Mean joint error after subtracting joint 0 from both sets.
pub fn mpjpe<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]]) -> Result<f64> {
    check_pair("mpjpe", pred, gt)?;
    Ok(MM * mean_distance(&root_centred(&to_vecs(pred)), &root_centred(&to_vecs(gt))))
}

/// Mean vertex error after subtracting each mesh's root joint.
pub fn mpve<T: Scalar>(pred: &[[T; 3]], gt: &[[T; 3]], pred_root: [T; 3], gt_root: [T; 3]) -> Result<f64> {
    check_pair("mpve", pred, gt)?;
    let pr = to_vecs(&[pred_root])[0];
    let gr = to_vecs(&[gt_root])[0];
    let a: Vec<_> = to_vecs(pred).iter().map(|v| v - pr).collect();
    let b: Vec<_> = to_vecs(gt).iter().map(|v| v - gr).collect();
    Ok(MM * mean_distance(&a, &b))
}

/// Mean norm of the difference of second differences, in mm/s².
pub fn accel_error<T: Scalar>(pred: &[Vec<[T; 3]>], gt: &[Vec<[T; 3]>], fps: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err("accel_error", &[pred.len()], &[gt.len()]));
    }
    if pred.len() < 3 {
        return Err(Error::Domain {
            op: "accel_error",
            msg: format!("needs at least 3 frames, got {}", pred.len()),
        });
    }
    let p: Vec<Vec<_>> = pred.iter().map(|f| to_vecs(f)).collect();
    let g: Vec<Vec<_>> = gt.iter().map(|f| to_vecs(f)).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 1..p.len() - 1 {
        check_pair("accel_error", &pred[t], &gt[t])?;
        for k in 0..p[t].len() {
            let ap = p[t + 1][k] - 2.0 * p[t][k] + p[t - 1][k];
            let ag = g[t + 1][k] - 2.0 * g[t][k] + g[t - 1][k];
            total += (ap - ag).norm();
            count += 1;
        }
    }
    Ok(MM * fps * fps * total / count as f64)
}

/// Smallest PA-MPJPE among the hypotheses.
pub fn min_over_n<T: Scalar>(samples: &[Vec<[T; 3]>], gt: &[[T; 3]]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain {
            op: "min_over_n",
            msg: "no hypotheses".into(),
        });
    }
    samples
        .iter()
        .map(|s| pa_mpjpe(s, gt))
        .try_fold(f64::INFINITY, |m, e| e.map(|e| m.min(e)))
}

/// Per-frame values with their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub mean: f64,
    pub per_frame: Vec<f64>,
}

impl Series {
    pub fn new(per_frame: Vec<f64>) -> Self {
        let mean = if per_frame.is_empty() {
            0.0
        } else {
            per_frame.iter().sum::<f64>() / per_frame.len() as f64
        };
        Self { mean, per_frame }
    }
}

/// Metrics of one evaluated sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequence: usize,
    pub joints: usize,
    pub pa_mpjpe: Series,
    pub mpjpe: Series,
    pub mpve: Series,
    /// One value per interior frame.
    pub accel_err: Series,
    /// Min-over-n PA-MPJPE with `n = samples`; absent without sampling.
    pub samples: usize,
    pub min_over_n: Option<Series>,
}

/// Column order of [`report_csv`].
pub const REPORT_COLUMNS: [&str; 8] = [
    "sequence",
    "joints",
    "pa_mpjpe_mm",
    "mpjpe_mm",
    "mpve_mm",
    "accel_err_mm_s2",
    "samples",
    "min_over_n_pa_mpjpe_mm",
];

/// Aggregate of several reports: frame-weighted means of every metric.
pub fn aggregate(reports: &[MetricReport]) -> MetricReport {
    let cat = |f: &dyn Fn(&MetricReport) -> &Series| {
        Series::new(reports.iter().flat_map(|r| f(r).per_frame.iter().copied()).collect())
    };
    let mon = if reports.iter().all(|r| r.min_over_n.is_some()) && !reports.is_empty() {
        Some(Series::new(
            reports
                .iter()
                .flat_map(|r| r.min_over_n.as_ref().expect("checked").per_frame.iter().copied())
                .collect(),
        ))
    } else {
        None
    };
    MetricReport {
        sequence: reports.len(),
        joints: reports.first().map_or(0, |r| r.joints),
        pa_mpjpe: cat(&|r| &r.pa_mpjpe),
        mpjpe: cat(&|r| &r.mpjpe),
        mpve: cat(&|r| &r.mpve),
        accel_err: cat(&|r| &r.accel_err),
        samples: reports.first().map_or(0, |r| r.samples),
        min_over_n: mon,
    }
}

/// CSV with one row per sequence and a final `all` row holding the
/// aggregate; columns as in [`REPORT_COLUMNS`].
pub fn report_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).map_err(|e| Error::Parse(e.to_string()))?;
    let row = |id: String, r: &MetricReport| -> Vec<String> {
        vec![
            id,
            r.joints.to_string(),
            r.pa_mpjpe.mean.to_string(),
            r.mpjpe.mean.to_string(),
            r.mpve.mean.to_string(),
            r.accel_err.mean.to_string(),
            r.samples.to_string(),
            r.min_over_n.as_ref().map_or(String::new(), |s| s.mean.to_string()),
        ]
    };
    for r in reports {
        w.write_record(row(r.sequence.to_string(), r))
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.write_record(row("all".into(), &aggregate(reports)))
        .map_err(|e| Error::Parse(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}
