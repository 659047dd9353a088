mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use flowpose::data::ObservationEncoder;
use flowpose::discriminator::{adv_loss, adv_loss_var, disc_loss, disc_loss_var, DiscConfig, Discriminator};
use flowpose::flow::{identity_pose6d, Flow, FlowConfig};
use flowpose::numeric::{grad_check_inputs, Graph, ParamSet, Tensor};
use flowpose::regression_head::RegressionHead;
use flowpose::temporal_encoder::{window_indices, EncoderConfig, TemporalEncoder};

use common::{perturb, random_flow, rng};

fn mat(p: &ParamSet<f64>, name: &str) -> DMatrix<f64> {
    let t = p.get(name).unwrap();
    let (r, c) = (t.shape()[0], t.shape().get(1).copied().unwrap_or(1));
    DMatrix::from_row_slice(r, c, t.data())
}

fn rows(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn flow_with(dim: usize, context: usize) -> Flow {
    Flow::new(FlowConfig { dim, context, blocks: 3, hidden: 8 }, "flow/").unwrap()
}

// ---- flow ----

#[test]
fn identity_flow_examples() {
    let flow = flow_with(2, 3);
    let p = flow.init_params::<f64, _>(&mut rng(0), None).unwrap();
    let mut r = rng(1);
    let z = Tensor::<f64>::randn(&[5, 2], 1.0, &mut r);
    let c = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
    assert_eq!(flow.forward(&p, &z, &c).unwrap().data(), z.data());
    assert_eq!(flow.inverse(&p, &z, &c).unwrap().data(), z.data());
    assert!(flow.mode(&p, &c).unwrap().data().iter().all(|&v| v == 0.0));
    let lp = flow.log_prob(&p, &Tensor::zeros(&[1, 2]), &c.row_tensor(0)).unwrap()[0];
    assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

trait RowTensor {
    fn row_tensor(&self, i: usize) -> Tensor<f64>;
}

impl RowTensor for Tensor<f64> {
    fn row_tensor(&self, i: usize) -> Tensor<f64> {
        Tensor::from_vec(&[1, self.shape()[1]], self.row(i).to_vec()).unwrap()
    }
}

#[test]
fn pose_bias_sets_the_initial_mode() {
    let flow = flow_with(12, 3);
    let bias = identity_pose6d(2);
    let p = flow.init_params::<f64, _>(&mut rng(0), Some(&bias)).unwrap();
    let c = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(1));
    let mode = flow.mode(&p, &c).unwrap();
    for i in 0..4 {
        assert_eq!(mode.row(i), bias.as_slice());
    }
}

#[test]
fn batch_inversion_equals_per_item() {
    let (flow, p) = random_flow(6, 4, 2);
    let mut r = rng(3);
    let th = Tensor::<f64>::randn(&[7, 6], 1.0, &mut r);
    let c = Tensor::<f64>::randn(&[7, 4], 1.0, &mut r);
    let batch = flow.inverse(&p, &th, &c).unwrap();
    for i in 0..7 {
        let one = flow.inverse(&p, &th.row_tensor(i), &c.row_tensor(i)).unwrap();
        assert_eq!(one.data(), batch.row(i));
    }
}

#[test]
fn log_prob_is_base_density_plus_constant() {
    let (flow, p) = random_flow(6, 4, 4);
    let mut r = rng(5);
    let z = Tensor::<f64>::randn(&[20, 6], 1.0, &mut r);
    let c0 = Tensor::<f64>::randn(&[1, 4], 1.0, &mut r);
    let c = Tensor::from_vec(&[20, 4], c0.data().repeat(20)).unwrap();
    let th = flow.forward(&p, &z, &c).unwrap();
    let lp = flow.log_prob(&p, &th, &c).unwrap();
    let ld = flow.log_det(&p).unwrap();
    for (i, l) in lp.iter().enumerate() {
        let sq: f64 = z.row(i).iter().map(|v| v * v).sum();
        let base = -0.5 * sq - 3.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((l - base - ld).abs() < 1e-9);
    }
}

#[test]
fn sampling_is_seeded_and_self_consistent() {
    let (flow, p) = random_flow(6, 4, 6);
    let c: Vec<f64> = vec![0.3, -0.2, 1.0, 0.5];
    let (a, la) = flow.sample(&p, 50, &c, &mut rng(7)).unwrap();
    let (b, lb) = flow.sample(&p, 50, &c, &mut rng(7)).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(la, lb);
    let cc = Tensor::from_vec(&[50, 4], c.repeat(50)).unwrap();
    let direct = flow.log_prob(&p, &a, &cc).unwrap();
    for (x, y) in la.iter().zip(&direct) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let flow = flow_with(4, 2);
    let p = flow.init_params::<f64, _>(&mut rng(0), None).unwrap();
    let n = 10_000;
    let (s, _) = flow.sample(&p, n, &[0.0, 0.0], &mut rng(8)).unwrap();
    for k in 0..4 {
        let mean: f64 = (0..n).map(|i| s.row(i)[k]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "coordinate {k}: {mean}");
    }
}

#[test]
fn flow_graph_ops_pass_grad_check() {
    let (flow, p) = random_flow(6, 4, 9);
    let mut r = rng(10);
    let th = Tensor::<f64>::randn(&[3, 6], 1.0, &mut r);
    let c = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    let e = grad_check_inputs(
        |g, xs| {
            let b = p.bind(g, |_| false);
            let lp = flow.log_prob_var(g, &b, xs[0], xs[1])?;
            g.sum(lp)
        },
        &[th, c.clone()],
        1e-5,
        usize::MAX,
    )
    .unwrap();
    assert!(e < 1e-4, "log_prob {e}");
    let e = grad_check_inputs(
        |g, xs| {
            let b = p.bind(g, |_| false);
            let m = flow.mode_var(g, &b, xs[0])?;
            let m = g.mul(m, m)?;
            g.sum(m)
        },
        &[c],
        1e-5,
        usize::MAX,
    )
    .unwrap();
    assert!(e < 1e-4, "mode {e}");
}

#[test]
fn flow_rejects_dimension_mismatch() {
    let (flow, p) = random_flow(6, 4, 11);
    assert!(flow.forward(&p, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[2, 4])).is_err());
    assert!(flow.inverse(&p, &Tensor::zeros(&[2, 6]), &Tensor::zeros(&[2, 3])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flow_round_trip(seed in 0u64..1000, d in prop::sample::select(vec![2usize, 5, 12])) {
        let (flow, p) = random_flow(d, 3, seed);
        let mut r = rng(seed + 1);
        let z = Tensor::<f64>::randn(&[8, d], 2.0, &mut r);
        let c = Tensor::<f64>::randn(&[8, 3], 1.0, &mut r);
        let back = flow.inverse(&p, &flow.forward(&p, &z, &c).unwrap(), &c).unwrap();
        prop_assert!(back.max_abs_diff(&z) < 1e-8);
    }

    #[test]
    fn mode_dominates_samples(seed in 0u64..1000) {
        let (flow, p) = random_flow(4, 3, seed);
        let mut r = rng(seed + 2);
        let c = Tensor::<f64>::randn(&[1, 3], 1.0, &mut r);
        let m = flow.mode(&p, &c).unwrap();
        let lm = flow.log_prob(&p, &m, &c).unwrap()[0];
        let (_, lps) = flow.sample(&p, 200, c.data(), &mut r).unwrap();
        prop_assert!(lps.iter().all(|&l| l <= lm));
    }
}

// ---- temporal encoder ----

fn encoder(f: usize, c: usize) -> TemporalEncoder {
    TemporalEncoder::new(
        EncoderConfig {
            feature: f,
            context: c,
            ..EncoderConfig::default()
        },
        "encoder/",
    )
    .unwrap()
}

fn moca(enc: &TemporalEncoder, p: &ParamSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, |_| false);
    let xv = g.constant(x.clone());
    let y = enc.moca_var(&mut g, &b, xv).unwrap();
    g.value(y).clone()
}

fn blend(enc: &TemporalEncoder, p: &ParamSet<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, |_| false);
    let hv = g.constant(h.clone());
    let y = enc.blend_var(&mut g, &b, hv).unwrap();
    g.value(y).clone()
}

#[test]
fn moca_initialization_is_identity() {
    let enc = encoder(5, 3);
    let p = enc.init_params::<f64, _>(&mut rng(0));
    let x = Tensor::<f64>::randn(&[1, 5], 1.0, &mut rng(1));
    assert!(moca(&enc, &p, &x).max_abs_diff(&x) < 1e-15);
    let v = Tensor::<f64>::randn(&[1, 5], 1.0, &mut rng(2));
    let same = Tensor::from_vec(&[4, 5], v.data().repeat(4)).unwrap();
    let out = moca(&enc, &perturb(&p, 0.3, &mut rng(3)), &same);
    for i in 1..4 {
        assert!(out.row(i).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn moca_matches_loop_oracle() {
    let enc = encoder(4, 3);
    let p = perturb(&enc.init_params::<f64, _>(&mut rng(0)), 0.5, &mut rng(1));
    let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng(2));
    let xm = rows(&x);
    let (q, k, v) = (&xm * mat(&p, "encoder/moca.q"), &xm * mat(&p, "encoder/moca.k"), &xm * mat(&p, "encoder/moca.v"));
    let a = p.get("encoder/moca.attn").unwrap().item();
    let res = p.get("encoder/moca.residual").unwrap().item();
    let out = moca(&enc, &p, &x);
    let attn = enc.attention(&p, &x).unwrap();
    for i in 0..5 {
        let logits: Vec<f64> = (0..5).map(|j| q.row(i).dot(&k.row(j)) / 2.0).collect();
        let w = softmax(&logits);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for f in 0..4 {
            let mixed: f64 = (0..5).map(|j| w[j] * v[(j, f)]).sum();
            assert!((out.at(&[i, f]) - (a * mixed + res * xm[(i, f)])).abs() < 1e-10);
        }
        for j in 0..5 {
            assert!((attn.at(&[i, j]) - w[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn hafi_matches_two_level_oracle() {
    let enc = encoder(4, 3);
    let p = perturb(&enc.init_params::<f64, _>(&mut rng(0)), 0.5, &mut rng(4));
    let h = Tensor::<f64>::randn(&[1, 9, 4], 1.0, &mut rng(5));
    let hm = DMatrix::from_row_slice(9, 4, h.data());
    let level = |hm: &DMatrix<f64>, l: usize| -> DMatrix<f64> {
        let v = DVector::from_row_slice(p.get(&format!("encoder/hafi.{l}.v")).unwrap().data());
        let pos = p.get(&format!("encoder/hafi.{l}.pos")).unwrap().data().to_vec();
        let n = hm.nrows() / 3;
        let mut out = DMatrix::zeros(n, 4);
        for gi in 0..n {
            let s: Vec<f64> = (0..3).map(|k| hm.row(gi * 3 + k).dot(&v.transpose()) + pos[k]).collect();
            let w = softmax(&s);
            for k in 0..3 {
                let row = hm.row(gi * 3 + k) * w[k];
                let mut target = out.row_mut(gi);
                target += row;
            }
        }
        out
    };
    let top = level(&level(&hm, 0), 1);
    let got = blend(&enc, &p, &h);
    for f in 0..4 {
        assert!((got.data()[f] - top[(0, f)]).abs() < 1e-10);
    }
}

#[test]
fn hafi_of_equal_features_is_that_feature() {
    let enc = encoder(4, 3);
    let p = perturb(&enc.init_params::<f64, _>(&mut rng(0)), 0.5, &mut rng(6));
    let v = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng(7));
    for n in [1usize, 2, 5, 9] {
        let h = Tensor::from_vec(&[1, n, 4], v.data().repeat(n)).unwrap();
        assert!(blend(&enc, &p, &h).data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() < 1e-12), "n = {n}");
    }
}

#[test]
fn encode_uses_clamped_windows() {
    assert_eq!(window_indices(0, 12, 9), vec![0, 0, 0, 0, 0, 1, 2, 3, 4]);
    assert_eq!(window_indices(11, 12, 9), vec![7, 8, 9, 10, 11, 11, 11, 11, 11]);
    assert_eq!(window_indices(1, 3, 9), vec![0, 1, 2]);
    let enc = encoder(4, 3);
    let p = perturb(&enc.init_params::<f64, _>(&mut rng(0)), 0.5, &mut rng(8));
    let x = Tensor::<f64>::randn(&[12, 4], 1.0, &mut rng(9));
    let c = enc.encode(&p, &x).unwrap();
    let h = moca(&enc, &p, &x);
    let idx = window_indices(0, 12, 9);
    let win: Vec<f64> = idx.iter().flat_map(|&i| h.row(i).to_vec()).collect();
    let pre = blend(&enc, &p, &Tensor::from_vec(&[1, 9, 4], win).unwrap());
    let out = DMatrix::from_row_slice(1, 4, pre.data()) * mat(&p, "encoder/hafi.out.w")
        + DMatrix::from_row_slice(1, 3, p.get("encoder/hafi.out.b").unwrap().data());
    for k in 0..3 {
        assert!((c.at(&[0, k]) - out[(0, k)]).abs() < 1e-10);
    }
    let constant = Tensor::from_vec(&[6, 4], x.row(0).repeat(6)).unwrap();
    let cc = enc.encode(&p, &constant).unwrap();
    for i in 1..6 {
        assert!(cc.row(i).iter().zip(cc.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn encoder_is_order_sensitive_and_differentiable() {
    let enc = encoder(4, 3);
    let p = perturb(&enc.init_params::<f64, _>(&mut rng(0)), 0.5, &mut rng(10));
    let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng(11));
    let order = [3usize, 0, 4, 1, 2];
    let xp = Tensor::from_vec(&[5, 4], order.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
    let (a, b) = (enc.encode(&p, &x).unwrap(), enc.encode(&p, &xp).unwrap());
    let diff = (0..5)
        .map(|i| a.row(order[i]).iter().zip(b.row(i)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    assert!(diff > 1e-6);
    let e = grad_check_inputs(
        |g, xs| {
            let bp = p.bind(g, |_| false);
            let c = enc.encode_var(g, &bp, xs[0])?;
            let c = g.mul(c, c)?;
            g.sum(c)
        },
        &[x],
        1e-5,
        usize::MAX,
    )
    .unwrap();
    assert!(e < 1e-4, "{e}");
}

// ---- regression head and observation encoder ----

#[test]
fn head_initialization_and_oracle() {
    let head = RegressionHead::new(5, 6, 4, "head/").unwrap();
    let p = head.init_params::<f64, _>(&mut rng(0));
    let out = head.predict(&p, &Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng(1))).unwrap();
    for (beta, cam) in &out {
        assert!(beta.iter().all(|&b| b == 0.0));
        assert_eq!(cam.to_array(), [1.0, 0.0, 0.0]);
    }
    let p = perturb(&p, 0.5, &mut rng(2));
    let c = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng(3));
    let hidden = (rows(&c) * mat(&p, "head/mlp.0.w")).map(|v| v);
    let b0 = mat(&p, "head/mlp.0.b").transpose();
    let b1 = mat(&p, "head/mlp.1.b").transpose();
    let got = head.predict(&p, &c).unwrap();
    for i in 0..3 {
        let h = (hidden.row(i) + &b0).map(f64::tanh);
        let o = h * mat(&p, "head/mlp.1.w") + &b1;
        for k in 0..4 {
            assert!((got[i].0[k] - o[k]).abs() < 1e-10);
        }
        let cam = got[i].1.to_array();
        assert!(cam[0] > 0.0 && (cam[0] - o[4].exp()).abs() < 1e-10);
        assert!((cam[1] - o[5]).abs() < 1e-10 && (cam[2] - o[6]).abs() < 1e-10);
    }
}

#[test]
fn observation_encoder_examples() {
    let obs = ObservationEncoder::new(3, 5, 4, "obs/").unwrap();
    let mut p = obs.init_params::<f64, _>(&mut rng(0));
    let x = Tensor::<f64>::randn(&[2, 9], 1.0, &mut rng(1));
    let dup = Tensor::from_vec(&[2, 9], x.row(0).repeat(2)).unwrap();
    let f = obs.encode(&p, &dup).unwrap();
    assert_eq!(f.row(0), f.row(1));
    assert!(obs.encode(&p, &Tensor::zeros(&[2, 12])).is_err());
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        let t = p.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(obs.encode(&p, &x).unwrap().data().iter().all(|&v| v == 0.0));
}

// ---- discriminator ----

fn gru_oracle(disc_p: &ParamSet<f64>, layers: usize, seq: &DMatrix<f64>) -> f64 {
    let lin = |name: &str, x: &DVector<f64>| -> DVector<f64> {
        mat(disc_p, &format!("disc/{name}.w")).transpose() * x + DVector::from_row_slice(disc_p.get(&format!("disc/{name}.b")).unwrap().data())
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut xs: Vec<DVector<f64>> = (0..seq.nrows()).map(|t| seq.row(t).transpose()).collect();
    for l in 0..layers {
        let h_dim = disc_p.get(&format!("disc/gru{l}.h_n.b")).unwrap().len();
        let mut h = DVector::zeros(h_dim);
        let mut out = Vec::new();
        for x in &xs {
            let zr = (lin(&format!("gru{l}.x_zr"), x) + lin(&format!("gru{l}.h_zr"), &h)).map(sig);
            let z = zr.rows(0, h_dim).into_owned();
            let r = zr.rows(h_dim, h_dim).into_owned();
            let n = (lin(&format!("gru{l}.x_n"), x) + lin(&format!("gru{l}.h_n"), &r.component_mul(&h))).map(f64::tanh);
            h = (DVector::repeat(h_dim, 1.0) - &z).component_mul(&n) + z.component_mul(&h);
            out.push(h.clone());
        }
        xs = out;
    }
    let v = mat(disc_p, "disc/attn.v");
    let scores: Vec<f64> = xs.iter().map(|h| (lin("attn.proj", h).map(f64::tanh).transpose() * &v)[0]).collect();
    let w = softmax(&scores);
    let pooled = xs.iter().zip(&w).fold(DVector::zeros(xs[0].len()), |acc, (h, w)| acc + h * *w);
    sig(lin("out", &pooled)[0])
}

#[test]
fn discriminator_matches_unrolled_recurrence() {
    let disc = Discriminator::new(4, DiscConfig { hidden: 5, layers: 2 }, "disc/").unwrap();
    let p = disc.init_params::<f64, _>(&mut rng(0));
    let seqs: Vec<Tensor<f64>> = (0..3).map(|i| Tensor::randn(&[3, 4], 1.0, &mut rng(10 + i))).collect();
    let probs = disc.discriminate(&p, &seqs).unwrap();
    for (s, prob) in seqs.iter().zip(&probs) {
        assert!((prob - gru_oracle(&p, 2, &rows(s))).abs() < 1e-8);
        assert!(*prob > 0.0 && *prob < 1.0);
    }
    assert!(disc.discriminate(&p, &[Tensor::zeros(&[1, 4])]).is_err());
}

#[test]
fn zero_discriminator_outputs_one_half() {
    let disc = Discriminator::new(4, DiscConfig { hidden: 5, layers: 2 }, "disc/").unwrap();
    let mut p = disc.init_params::<f64, _>(&mut rng(0));
    let names: Vec<String> = p.names().cloned().collect();
    for n in names {
        p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let probs = disc.discriminate(&p, &[Tensor::<f64>::randn(&[6, 4], 3.0, &mut rng(1))]).unwrap();
    assert_eq!(probs, vec![0.5]);
}

#[test]
fn discriminator_output_stays_in_open_interval() {
    for seed in 0..100 {
        let disc = Discriminator::new(4, DiscConfig { hidden: 5, layers: 2 }, "disc/").unwrap();
        let p = perturb(&disc.init_params::<f64, _>(&mut rng(seed)), 1.0, &mut rng(seed + 1000));
        let prob = disc.discriminate(&p, &[Tensor::<f64>::randn(&[4, 4], 2.0, &mut rng(seed + 2000))]).unwrap()[0];
        assert!(prob > 0.0 && prob < 1.0);
    }
}

#[test]
fn adversarial_loss_examples() {
    assert_eq!(disc_loss(&[1.0], &[0.0]).unwrap(), 0.0);
    assert_eq!(disc_loss(&[0.5], &[0.5]).unwrap(), 0.5);
    assert_eq!(adv_loss(&[1.0]).unwrap(), 0.0);
    assert_eq!(adv_loss(&[0.0]).unwrap(), 1.0);
    assert!((adv_loss(&[0.2f64, 0.8]).unwrap() - 0.34).abs() < 1e-15);
    assert!(disc_loss::<f64>(&[], &[0.5]).is_err());
    assert!(adv_loss::<f64>(&[]).is_err());
    let (real, fake) = ([0.9, 0.3, 0.6], [0.1, 0.7]);
    let expect = real.iter().map(|r| (r - 1.0) * (r - 1.0)).sum::<f64>() / 3.0 + fake.iter().map(|f| f * f).sum::<f64>() / 2.0;
    assert!((disc_loss(&real, &fake).unwrap() - expect).abs() < 1e-15);
}

#[test]
fn adversarial_losses_pass_grad_check() {
    let real = Tensor::from_vec(&[3], vec![0.9, 0.3, 0.6]).unwrap();
    let fake = Tensor::from_vec(&[2], vec![0.1, 0.7]).unwrap();
    let e = grad_check_inputs(|g, xs| disc_loss_var(g, xs[0], xs[1]), &[real, fake.clone()], 1e-5, usize::MAX).unwrap();
    assert!(e < 1e-4);
    let e = grad_check_inputs(|g, xs| adv_loss_var(g, xs[0]), &[fake], 1e-5, usize::MAX).unwrap();
    assert!(e < 1e-4);
}
