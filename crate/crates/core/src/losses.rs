//! Training losses and their weighting.
//!
//! Graph-level functions take already-posed joints so they can be checked
//! in isolation; [`crate::model::PoseModel::item_loss`] composes them with
//! the flow, body model and camera.

use serde::{Deserialize, Serialize};

use crate::camera::project_var;
use crate::error::{shape_err, Error, Result};
use crate::flow::Flow;
use crate::numeric::{Bound, Graph, Var};
use crate::rotations::orth_residual_var;
use crate::scalar::Scalar;

/// One weighted term of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Nll,
    Exp2d,
    ExpAdv,
    Mode2d,
    ModeAdv,
    Mode3d,
    ModeTheta,
    ModeBeta,
    Orth,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::Nll,
        Term::Exp2d,
        Term::ExpAdv,
        Term::Mode2d,
        Term::ModeAdv,
        Term::Mode3d,
        Term::ModeTheta,
        Term::ModeBeta,
        Term::Orth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Nll => "nll",
            Term::Exp2d => "exp_2d",
            Term::ExpAdv => "exp_adv",
            Term::Mode2d => "mode_2d",
            Term::ModeAdv => "mode_adv",
            Term::Mode3d => "mode_3d",
            Term::ModeTheta => "mode_theta",
            Term::ModeBeta => "mode_beta",
            Term::Orth => "orth",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub nll: f64,
    pub exp_2d: f64,
    pub exp_adv: f64,
    pub mode_2d: f64,
    pub mode_adv: f64,
    pub mode_3d: f64,
    pub mode_theta: f64,
    pub mode_beta: f64,
    pub orth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nll: 0.001,
            exp_2d: 0.001,
            exp_adv: 0.01,
            mode_2d: 0.01,
            mode_adv: 0.01,
            mode_3d: 0.05,
            mode_theta: 0.001,
            mode_beta: 0.0005,
            orth: 0.1,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Nll => self.nll,
            Term::Exp2d => self.exp_2d,
            Term::ExpAdv => self.exp_adv,
            Term::Mode2d => self.mode_2d,
            Term::ModeAdv => self.mode_adv,
            Term::Mode3d => self.mode_3d,
            Term::ModeTheta => self.mode_theta,
            Term::ModeBeta => self.mode_beta,
            Term::Orth => self.orth,
        }
    }

    pub fn sum(&self) -> f64 {
        Term::ALL.iter().map(|&t| self.get(t)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        match Term::ALL.iter().find(|&&t| !(self.get(t) >= 0.0 && self.get(t).is_finite())) {
            Some(t) => Err(Error::Config(format!("loss weight `{}` must be non-negative", t.name()))),
            None => Ok(()),
        }
    }
}

/// Unweighted value of every term; `None` marks a term whose annotation
/// was absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    values: [Option<f64>; 9],
}

impl LossReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        self.values[term.index()]
    }

    /// Records a term; non-finite values are rejected by name.
    pub fn set(&mut self, term: Term, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(term.name().into()));
        }
        self.values[term.index()] = Some(value);
        Ok(())
    }

    pub fn present(&self) -> impl Iterator<Item = (Term, f64)> + '_ {
        Term::ALL
            .iter()
            .filter_map(|&t| self.values[t.index()].map(|v| (t, v)))
    }

    /// Dot product with the weights over present terms.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.present().map(|(t, v)| w.get(t) * v).sum()
    }
}

/// Accumulates term values over several reports (one mean per term over
/// the reports where it is present).
#[derive(Clone, Debug, Default)]
pub struct ReportMean {
    sums: [f64; 9],
    counts: [usize; 9],
}

impl ReportMean {
    pub fn add(&mut self, r: &LossReport) {
        for (t, v) in r.present() {
            self.sums[t.index()] += v;
            self.counts[t.index()] += 1;
        }
    }

    pub fn mean(&self) -> LossReport {
        let mut out = LossReport::new();
        for t in Term::ALL {
            let i = t.index();
            if self.counts[i] > 0 {
                out.values[i] = Some(self.sums[i] / self.counts[i] as f64);
            }
        }
        out
    }
}

/// Confidence-weighted reprojection error
/// `Σ conf·‖project(joints) − kp‖² / Σ conf` over all frames and joints.
///
/// `joints (M, K, 3)`, `cam (M, 3)`, `kp (M, K, 2)`, `conf (M, K)`.
pub fn loss_2d_var<T: Scalar>(g: &mut Graph<T>, joints: Var, cam: Var, kp: Var, conf: Var) -> Result<Var> {
    let js = g.shape(joints).to_vec();
    let (m, k) = (js[0], js[1]);
    if g.shape(kp) != [m, k, 2] || g.shape(conf) != [m, k] {
        let (a, b) = (g.shape(kp).to_vec(), g.shape(conf).to_vec());
        return Err(shape_err("loss_2d", &a, &b));
    }
    let total = g.value(conf).sum();
    if g.value(conf).data().iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
        return Err(Error::Domain {
            op: "loss_2d",
            msg: "confidences must lie in [0, 1]".into(),
        });
    }
    if !(total > T::zero()) {
        return Err(Error::Domain {
            op: "loss_2d",
            msg: "all confidences are zero".into(),
        });
    }
    let proj = project_var(g, joints, cam)?;
    let d = g.sub(proj, kp)?;
    let d = g.square(d)?;
    let d = g.sum_axis(d, 2)?; // (M, K)
    let w = g.mul(conf, d)?;
    let s = g.sum(w)?;
    g.scale(s, T::one() / total)
}

/// Mean squared joint distance after subtracting joint 0 from both sets.
pub fn loss_3d_var<T: Scalar>(g: &mut Graph<T>, joints: Var, gt: Var) -> Result<Var> {
    let s = g.shape(joints).to_vec();
    if s.len() != 3 || s[2] != 3 || g.shape(gt) != s.as_slice() {
        let b = g.shape(gt).to_vec();
        return Err(shape_err("loss_3d", &s, &b));
    }
    let centre = |g: &mut Graph<T>, x: Var| -> Result<Var> {
        let root = g.slice(x, 1, 0, 1)?;
        let root = g.expand(root, &s)?;
        g.sub(x, root)
    };
    let a = centre(g, joints)?;
    let b = centre(g, gt)?;
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    let d = g.sum_axis(d, 2)?;
    g.mean(d)
}

/// `−mean log p(θ | c)` over the rows of `theta`.
pub fn nll_var<T: Scalar>(g: &mut Graph<T>, flow: &Flow, p: &Bound, theta: Var, c: Var) -> Result<Var> {
    let lp = flow.log_prob_var(g, p, theta, c)?;
    let m = g.mean(lp)?;
    g.neg(m)
}

/// Mean over rows of the squared Euclidean distance between `a` and `b`.
pub fn param_loss_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 2 {
        return Err(shape_err("param_loss", &s, &[0, 0]));
    }
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    let d = g.sum_axis(d, 1)?;
    g.mean(d)
}

/// Mean orthonormality residual of every joint rotation in `theta (M, 6J)`.
pub fn orth_loss_var<T: Scalar>(g: &mut Graph<T>, theta: Var) -> Result<Var> {
    let s = g.shape(theta).to_vec();
    if s.len() != 2 || !s[1].is_multiple_of(6) {
        return Err(shape_err("orth_loss", &s, &[0, 6]));
    }
    let rows = g.reshape(theta, &[s[0] * s[1] / 6, 6])?;
    let r = orth_residual_var(g, rows)?;
    g.mean(r)
}
