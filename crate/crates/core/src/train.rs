//! Mixed-supervision training: per batch, one generator step on the
//! weighted loss and one discriminator step on real versus generated pose
//! sequences.
//!
//! Batch items run on the rayon pool, each on its own graph; gradients are
//! summed in item order, so results do not depend on the thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::SyntheticSequence;
use crate::discriminator::disc_loss_var;
use crate::error::{Error, Result};
use crate::losses::{LossReport, ReportMean, Term};
use crate::model::{PoseModel, Window, DISC_PREFIX};
use crate::numeric::{AdamState, GradMap, Graph, ParamSet, Tensor};

/// Metrics of one epoch. Epoch 0 describes the initialization and has no
/// training columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean of each term over the epoch's windows.
    pub train: LossReport,
    /// Mean weighted total.
    pub total: Option<f64>,
    pub disc_loss: Option<f64>,
    pub val_nll: f64,
    /// Mean over validation frames of the mode's PA-MPJPE, mm.
    pub val_pa_mpjpe: f64,
}

/// Column order of the metrics log.
pub fn csv_header() -> Vec<&'static str> {
    let mut h = vec!["epoch", "total"];
    h.extend(Term::ALL.iter().map(|t| t.name()));
    h.extend(["disc_loss", "val_nll", "val_pa_mpjpe_mm"]);
    h
}

impl EpochRow {
    pub fn csv_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut r = vec![self.epoch.to_string(), opt(self.total)];
        r.extend(Term::ALL.iter().map(|&t| opt(self.train.get(t))));
        r.extend([opt(self.disc_loss), self.val_nll.to_string(), self.val_pa_mpjpe.to_string()]);
        r
    }
}

pub fn metrics_csv(rows: &[EpochRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(csv_header()).map_err(err)?;
    for r in rows {
        w.write_record(r.csv_record()).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Cuts sequences into consecutive windows of `frames` frames (shorter
/// sequences become one window when they have at least 2 frames).
pub fn windows(seqs: &[SyntheticSequence], frames: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in seqs {
        let t = s.frames();
        if t < frames {
            if t >= 2 {
                out.push(Window::from_sequence(s)?);
            }
            continue;
        }
        for k in 0..t / frames {
            out.push(Window::from_sequence(&s.window(k * frames, frames))?);
        }
    }
    Ok(out)
}

/// Splits off the last `val_fraction` of the sequences (at least one when
/// the fraction is positive and there are two or more sequences).
pub fn split(seqs: &[SyntheticSequence], val_fraction: f64) -> (&[SyntheticSequence], &[SyntheticSequence]) {
    let n = seqs.len();
    let mut v = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && v == 0 && n >= 2 {
        v = 1;
    }
    seqs.split_at(n - v.min(n))
}

/// Validation NLL (mean over frames) and mean mode PA-MPJPE in mm.
pub fn validate(model: &PoseModel<f64>, params: &ParamSet<f64>, val: &[Window]) -> Result<(f64, f64)> {
    let per: Vec<(f64, f64, usize)> = val
        .par_iter()
        .map(|w| -> Result<(f64, f64, usize)> {
            let r = model.regress(params, &w.obs)?;
            let mut nll = 0.0;
            if let Some(gt) = w.motion() {
                nll = -model.flow.log_prob(params, &gt, &r.context)?.iter().sum::<f64>();
            }
            let (joints, _) = model.pose(&r.mode, &r.beta)?;
            let mut pa = 0.0;
            let mut count = 0;
            for (f, gt) in w.supervision.joints3d.iter().enumerate() {
                if let Some(gt) = gt {
                    pa += crate::metrics::pa_mpjpe(&joints[f], gt)?;
                    count += 1;
                }
            }
            Ok((nll, pa, count))
        })
        .collect::<Result<_>>()?;
    let frames: usize = val.iter().filter(|w| w.motion().is_some()).map(Window::frames).sum();
    let count: usize = per.iter().map(|p| p.2).sum();
    let nll = per.iter().map(|p| p.0).sum::<f64>() / frames.max(1) as f64;
    let pa = per.iter().map(|p| p.1).sum::<f64>() / count.max(1) as f64;
    Ok((nll, pa))
}

fn item_rng(seed: u64, epoch: usize, item: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f10e);
    r.set_stream(((epoch as u64) << 32) | item as u64);
    r
}

fn add_into(acc: &mut GradMap<f64>, g: GradMap<f64>) -> Result<()> {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => *a = a.zip_map(&v, |x, y| x + y)?,
            None => {
                acc.insert(k, v);
            }
        }
    }
    Ok(())
}

fn scale(acc: &mut GradMap<f64>, k: f64) {
    for v in acc.values_mut() {
        *v = v.map(|x| x * k);
    }
}

struct StepOut {
    report: LossReport,
    total: f64,
    disc: f64,
}

fn batch_step(
    model: &PoseModel<f64>,
    params: &mut ParamSet<f64>,
    gen_opt: &mut AdamState<f64>,
    disc_opt: &mut AdamState<f64>,
    batch: &[(usize, &Window)],
    epoch: usize,
) -> Result<Vec<StepOut>> {
    let cfg = &model.config.train;
    let frozen: &ParamSet<f64> = params;
    let items: Vec<(GradMap<f64>, LossReport, f64, Vec<Tensor<f64>>)> = batch
        .par_iter()
        .map(|&(idx, w)| {
            let mut g = Graph::new();
            let p = frozen.bind(&mut g, |n| model.generator_trainable(n));
            let mut rng = item_rng(cfg.seed, epoch, idx);
            let out = model.item_loss(&mut g, &p, w, &model.config.loss, cfg.sample_count, &mut rng)?;
            let total = g.value(out.total).item();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss("total".into()));
            }
            let grads = p.grads(&g, &g.backward(out.total)?);
            Ok((grads, out.report, total, out.fakes))
        })
        .collect::<Result<_>>()?;
    let n = items.len() as f64;
    let mut grads = GradMap::new();
    let mut fakes = Vec::new();
    let mut reports = Vec::new();
    for (gm, rep, total, f) in items {
        add_into(&mut grads, gm)?;
        reports.push((rep, total));
        fakes.extend(f);
    }
    scale(&mut grads, 1.0 / n);
    gen_opt.step(params, &grads)?;

    let real: Vec<Tensor<f64>> = batch.iter().filter_map(|(_, w)| w.motion()).collect();
    let disc = if real.is_empty() {
        f64::NAN
    } else {
        let stack = |ts: &[Tensor<f64>]| -> Result<Tensor<f64>> {
            let mut shape = vec![ts.len()];
            shape.extend_from_slice(ts[0].shape());
            Tensor::from_vec(&shape, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
        };
        let mut g = Graph::new();
        let p = params.filter_prefix(DISC_PREFIX).bind(&mut g, |_| true);
        let r = g.constant(stack(&real)?);
        let f = g.constant(stack(&fakes)?);
        let dr = model.disc.discriminate_var(&mut g, &p, r)?;
        let df = model.disc.discriminate_var(&mut g, &p, f)?;
        let loss = disc_loss_var(&mut g, dr, df)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss("disc".into()));
        }
        let grads = p.grads(&g, &g.backward(loss)?);
        disc_opt.step(params, &grads)?;
        value
    };
    Ok(reports
        .into_iter()
        .map(|(report, total)| StepOut { report, total, disc })
        .collect())
}

/// Trains for `config.train.epochs` epochs. `on_epoch` sees every row
/// (epoch 0 first) together with the parameters after that epoch; an
/// error from a later epoch leaves whatever it stored intact.
pub fn train(
    model: &PoseModel<f64>,
    mut params: ParamSet<f64>,
    train_set: &[Window],
    val_set: &[Window],
    mut on_epoch: impl FnMut(&EpochRow, &ParamSet<f64>) -> Result<()>,
) -> Result<(ParamSet<f64>, Vec<EpochRow>)> {
    let cfg = &model.config.train;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut gen_opt = AdamState::new(cfg.lr);
    let mut disc_opt = AdamState::new(cfg.lr);
    let mut rows = Vec::new();
    let (val_nll, val_pa) = validate(model, &params, val_set)?;
    let row = EpochRow {
        epoch: 0,
        train: LossReport::new(),
        total: None,
        disc_loss: None,
        val_nll,
        val_pa_mpjpe: val_pa,
    };
    on_epoch(&row, &params)?;
    rows.push(row);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut mean = ReportMean::default();
        let (mut total, mut disc, mut disc_batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(usize, &Window)> = chunk.iter().map(|&i| (i, &train_set[i])).collect();
            let outs = batch_step(model, &mut params, &mut gen_opt, &mut disc_opt, &batch, epoch)?;
            for o in &outs {
                mean.add(&o.report);
                total += o.total;
            }
            if let Some(o) = outs.first() {
                if o.disc.is_finite() {
                    disc += o.disc;
                    disc_batches += 1;
                }
            }
        }
        let (val_nll, val_pa) = validate(model, &params, val_set)?;
        if !val_nll.is_finite() {
            return Err(Error::NonFiniteLoss("val_nll".into()));
        }
        let row = EpochRow {
            epoch,
            train: mean.mean(),
            total: Some(total / train_set.len() as f64),
            disc_loss: (disc_batches > 0).then(|| disc / disc_batches as f64),
            val_nll,
            val_pa_mpjpe: val_pa,
        };
        log::info!(
            "epoch {epoch}: total {:.6} val_nll {:.4} val_pa_mpjpe {:.2} mm",
            row.total.unwrap_or(f64::NAN),
            val_nll,
            val_pa
        );
        on_epoch(&row, &params)?;
        rows.push(row);
    }
    Ok((params, rows))
}

/// [`train`] writing `checkpoint.json` and `metrics.csv` into `out` after
/// every epoch.
pub fn train_to_dir(
    model: &PoseModel<f64>,
    params: ParamSet<f64>,
    train_set: &[Window],
    val_set: &[Window],
    out: &Path,
) -> Result<(ParamSet<f64>, Vec<EpochRow>)> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    train(model, params, train_set, val_set, |row, p| {
        rows.push(row.clone());
        model.checkpoint(p)?.save(out.join("checkpoint.json"))?;
        std::fs::write(out.join("metrics.csv"), metrics_csv(&rows)?)?;
        Ok(())
    })
}
