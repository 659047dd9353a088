//! Evaluation of a model on synthetic sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{observation_tensor, SyntheticSequence};
use crate::error::Result;
use crate::metrics::{accel_error, min_over_n, mpjpe, mpve, pa_mpjpe, MetricReport, Series};
use crate::model::PoseModel;
use crate::numeric::{ParamSet, Tensor};

/// Random stream for the hypotheses of frame `frame` of sequence `seq`.
/// The first `k` hypotheses do not depend on how many are drawn.
pub fn hypothesis_rng(seed: u64, seq: usize, frame: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((seq as u64) << 32) | frame as u64);
    r
}

/// Metrics of the mode prediction, plus min-over-n PA-MPJPE over `samples`
/// flow hypotheses per frame when `samples > 0`.
pub fn evaluate_sequence(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    seq: &SyntheticSequence,
    index: usize,
    samples: usize,
    seed: u64,
) -> Result<MetricReport> {
    let t = seq.frames();
    let obs = observation_tensor(&seq.keypoints, &seq.confidence)?;
    let r = model.regress(params, &obs)?;
    let (joints, verts) = model.pose(&r.mode, &r.beta)?;
    let mut pa = Vec::with_capacity(t);
    let mut mp = Vec::with_capacity(t);
    let mut mv = Vec::with_capacity(t);
    for f in 0..t {
        pa.push(pa_mpjpe(&joints[f], &seq.joints3d[f])?);
        mp.push(mpjpe(&joints[f], &seq.joints3d[f])?);
        mv.push(mpve(&verts[f], &seq.vertices[f], joints[f][0], seq.joints3d[f][0])?);
    }
    let mut acc = Vec::new();
    for f in 1..t.saturating_sub(1) {
        acc.push(accel_error(&joints[f - 1..f + 2], &seq.joints3d[f - 1..f + 2], seq.fps)?);
    }
    let min_n = if samples > 0 {
        let ctx = r.context.data();
        let c = model.config.encoder.context;
        let b = model.body.num_betas();
        let mut per = Vec::with_capacity(t);
        for f in 0..t {
            let mut rng = hypothesis_rng(seed, index, f);
            let (theta, _) = model
                .flow
                .sample(params, samples, &ctx[f * c..(f + 1) * c], &mut rng)?;
            let beta = Tensor::from_vec(&[samples, b], r.beta.row(f).repeat(samples))?;
            let (hyp, _) = model.pose(&theta, &beta)?;
            per.push(min_over_n(&hyp, &seq.joints3d[f])?);
        }
        Some(Series::new(per))
    } else {
        None
    };
    Ok(MetricReport {
        sequence: index,
        joints: model.joints(),
        pa_mpjpe: Series::new(pa),
        mpjpe: Series::new(mp),
        mpve: Series::new(mv),
        accel_err: Series::new(acc),
        samples,
        min_over_n: min_n,
    })
}

/// [`evaluate_sequence`] over every sequence, in parallel, in order.
pub fn evaluate(
    model: &PoseModel<f64>,
    params: &ParamSet<f64>,
    seqs: &[SyntheticSequence],
    samples: usize,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    seqs.par_iter()
        .enumerate()
        .map(|(i, s)| evaluate_sequence(model, params, s, i, samples, seed))
        .collect()
}
