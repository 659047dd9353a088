mod common;

use proptest::prelude::*;

use flowpose::data::generate_dataset;
use flowpose::flow::{Flow, FlowConfig};
use flowpose::losses::{loss_2d_var, loss_3d_var, nll_var, orth_loss_var, LossWeights, Term};
use flowpose::model::{PoseModel, Window, DISC_PREFIX};
use flowpose::numeric::{Graph, ParamSet, Tensor};
use flowpose::train::{metrics_csv, split, train, train_to_dir, validate, windows};
use flowpose::Config;

use common::{perturb, rng};

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.encoder.feature = 12;
    cfg.encoder.context = 10;
    cfg.model.obs_hidden = 12;
    cfg.model.head_hidden = 10;
    cfg.flow.hidden = 10;
    cfg.disc.hidden = 6;
    cfg.data.frames = 6;
    cfg.train.frames = 6;
    cfg.train.batch = 3;
    cfg.train.epochs = 2;
    cfg
}

fn eval1(f: impl FnOnce(&mut Graph<f64>) -> flowpose::Result<flowpose::numeric::Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn loss_2d_examples() {
    let joints = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut rng(0));
    let cam = t(&[2, 3], vec![1.5, 0.1, -0.2, 0.8, 0.0, 0.3]);
    let proj: Vec<f64> = (0..2)
        .flat_map(|m| {
            let c = cam.row(m).to_vec();
            let j = joints.clone();
            (0..3).flat_map(move |k| [c[0] * j.at(&[m, k, 0]) + c[1], c[0] * j.at(&[m, k, 1]) + c[2]])
        })
        .collect();
    let conf = Tensor::<f64>::ones(&[2, 3]);
    let exact = eval1(|g| {
        let (a, b, c, d) = (g.constant(joints.clone()), g.constant(cam.clone()), g.constant(t(&[2, 3, 2], proj.clone())), g.constant(conf.clone()));
        loss_2d_var(g, a, b, c, d)
    });
    assert_eq!(exact, 0.0);

    let mut shifted = proj.clone();
    shifted[0] += 0.1;
    let mut one = vec![0.0; 6];
    one[0] = 1.0;
    let single = eval1(|g| {
        let (a, b, c, d) = (g.constant(joints.clone()), g.constant(cam.clone()), g.constant(t(&[2, 3, 2], shifted.clone())), g.constant(t(&[2, 3], one.clone())));
        loss_2d_var(g, a, b, c, d)
    });
    assert!((single - 0.01).abs() < 1e-12);

    let kp = Tensor::<f64>::randn(&[2, 3, 2], 1.0, &mut rng(1));
    let w = t(&[2, 3], vec![0.2, 1.0, 0.0, 0.5, 0.7, 0.9]);
    let got = eval1(|g| {
        let (a, b, c, d) = (g.constant(joints.clone()), g.constant(cam.clone()), g.constant(kp.clone()), g.constant(w.clone()));
        loss_2d_var(g, a, b, c, d)
    });
    let (mut num, mut den) = (0.0, 0.0);
    for m in 0..2 {
        for k in 0..3 {
            let (c, wk) = (cam.row(m), w.at(&[m, k]));
            let dx = c[0] * joints.at(&[m, k, 0]) + c[1] - kp.at(&[m, k, 0]);
            let dy = c[0] * joints.at(&[m, k, 1]) + c[2] - kp.at(&[m, k, 1]);
            num += wk * (dx * dx + dy * dy);
            den += wk;
        }
    }
    assert!((got - num / den).abs() < 1e-12);

    let mut g = Graph::new();
    let (a, b, c, d) = (g.constant(joints), g.constant(cam), g.constant(kp), g.constant(Tensor::zeros(&[2, 3])));
    assert!(loss_2d_var(&mut g, a, b, c, d).is_err());
}

#[test]
fn loss_3d_examples() {
    let a = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng(2));
    let b = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng(3));
    let moved = a.map(|v| v + 0.7);
    let l = |x: &Tensor<f64>, y: &Tensor<f64>| {
        eval1(|g| {
            let (p, q) = (g.constant(x.clone()), g.constant(y.clone()));
            loss_3d_var(g, p, q)
        })
    };
    assert_eq!(l(&a, &a), 0.0);
    assert!(l(&a, &moved) < 1e-28);
    let mut sum = 0.0;
    for m in 0..2 {
        for k in 0..4 {
            for c in 0..3 {
                let d = (a.at(&[m, k, c]) - a.at(&[m, 0, c])) - (b.at(&[m, k, c]) - b.at(&[m, 0, c]));
                sum += d * d;
            }
        }
    }
    assert!((l(&a, &b) - sum / 8.0).abs() < 1e-12);
}

#[test]
fn nll_examples() {
    let flow = Flow::new(FlowConfig { dim: 2, context: 3, blocks: 2, hidden: 4 }, "flow/").unwrap();
    let p = flow.init_params::<f64, _>(&mut rng(0), None).unwrap();
    let v = eval1(|g| {
        let b = p.bind(g, |_| false);
        let (th, c) = (g.constant(Tensor::zeros(&[1, 2])), g.constant(Tensor::ones(&[1, 3])));
        nll_var(g, &flow, &b, th, c)
    });
    assert!((v - 1.837877066409345).abs() < 1e-12);

    let (flow, p) = common::random_flow(4, 3, 1);
    let c = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng(2));
    let mode = flow.mode(&p, &c).unwrap();
    let nll = |th: &Tensor<f64>| {
        eval1(|g| {
            let b = p.bind(g, |_| false);
            let (tv, cv) = (g.constant(th.clone()), g.constant(c.clone()));
            nll_var(g, &flow, &b, tv, cv)
        })
    };
    let at_mode = nll(&mode);
    assert!((at_mode + flow.log_prob(&p, &mode, &c).unwrap()[0]).abs() < 1e-12);
    for seed in 0..20 {
        let th = mode.zip_map(&Tensor::randn(&[1, 4], 0.5, &mut rng(seed + 10)), |a, b| a + b).unwrap();
        assert!(nll(&th) >= at_mode);
    }
}

#[test]
fn orth_loss_vanishes_on_orthonormal_input() {
    let id = t(&[2, 12], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].repeat(4));
    let v = eval1(|g| {
        let x = g.constant(id.clone());
        orth_loss_var(g, x)
    });
    assert_eq!(v, 0.0);
    let scaled = t(&[1, 6], vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let v = eval1(|g| {
        let x = g.constant(scaled.clone());
        orth_loss_var(g, x)
    });
    assert_eq!(v, 1.0);
}

#[test]
fn published_weights_sum() {
    let w = LossWeights::default();
    let expect = [0.001, 0.001, 0.01, 0.01, 0.01, 0.05, 0.001, 0.0005, 0.1];
    for (term, e) in Term::ALL.iter().zip(expect) {
        assert_eq!(w.get(*term), e, "{}", term.name());
    }
    assert!((w.sum() - 0.1835).abs() < 1e-15);
}

struct Fixture {
    model: PoseModel<f64>,
    params: ParamSet<f64>,
    win: Window,
}

fn fixture() -> Fixture {
    let cfg = small_config();
    let model = PoseModel::from_config(cfg.clone()).unwrap();
    let params = perturb(&model.init_params(1).unwrap(), 0.05, &mut rng(2));
    let seq = generate_dataset(3, 1, &model.body, &cfg.data).unwrap().remove(0);
    Fixture {
        model,
        params,
        win: Window::from_sequence(&seq).unwrap(),
    }
}

fn item(f: &Fixture, win: &Window, trainable: impl Fn(&str) -> bool) -> (f64, flowpose::losses::LossReport, Vec<String>) {
    let mut g = Graph::new();
    let p = f.params.bind(&mut g, trainable);
    let out = f
        .model
        .item_loss(&mut g, &p, win, &f.model.config.loss, 2, &mut rng(9))
        .unwrap();
    let total = g.value(out.total).item();
    let grads = p.grads(&g, &g.backward(out.total).unwrap());
    (total, out.report, grads.keys().cloned().collect())
}

#[test]
fn total_is_weighted_sum_of_report() {
    let f = fixture();
    let (total, report, _) = item(&f, &f.win, |_| false);
    assert_eq!(report.present().count(), 9);
    let w = &f.model.config.loss;
    assert!((total - report.total(w)).abs() <= 1e-14 * total.abs().max(1.0));
    let manual: f64 = report.present().map(|(term, v)| w.get(term) * v).sum();
    assert!((total - manual).abs() <= 1e-14 * total.abs().max(1.0));
    assert!(report.present().all(|(term, v)| term == Term::Nll || v >= 0.0));
}

#[test]
fn annotations_gate_their_terms() {
    let f = fixture();
    let (_, full, _) = item(&f, &f.win, |_| false);

    let mut no3d = f.win.clone();
    no3d.supervision.joints3d.iter_mut().for_each(|j| *j = None);
    let (_, r, _) = item(&f, &no3d, |_| false);
    for term in Term::ALL {
        if term == Term::Mode3d {
            assert_eq!(r.get(term), None);
        } else {
            assert_eq!(r.get(term), full.get(term), "{}", term.name());
        }
    }

    let mut only2d = f.win.clone();
    let n = only2d.frames();
    only2d.supervision.joints3d = vec![None; n];
    only2d.supervision.theta6d = vec![None; n];
    only2d.supervision.beta = vec![None; n];
    let (_, r, _) = item(&f, &only2d, |_| false);
    let present: Vec<Term> = r.present().map(|(t, _)| t).collect();
    assert_eq!(present, vec![Term::Exp2d, Term::ExpAdv, Term::Mode2d, Term::ModeAdv, Term::Orth]);
}

#[test]
fn generator_and_discriminator_gradients_are_isolated() {
    let f = fixture();
    let (_, _, keys) = item(&f, &f.win, |n| f.model.generator_trainable(n));
    assert!(!keys.is_empty());
    assert!(keys.iter().all(|k| !k.starts_with(DISC_PREFIX)));
    assert!(keys.iter().any(|k| k.starts_with("flow/")));
    assert!(keys.iter().any(|k| k.starts_with("encoder/")));

    let mut g = Graph::new();
    let p = f.params.filter_prefix(DISC_PREFIX).bind(&mut g, |_| true);
    let real = g.constant(f.win.motion().unwrap().reshape(&[1, f.win.frames(), f.model.pose_dim()]).unwrap());
    let reg = f.model.regress(&f.params, &f.win.obs).unwrap();
    let fake = g.constant(reg.mode.reshape(&[1, f.win.frames(), f.model.pose_dim()]).unwrap());
    let dr = f.model.disc.discriminate_var(&mut g, &p, real).unwrap();
    let df = f.model.disc.discriminate_var(&mut g, &p, fake).unwrap();
    let loss = flowpose::discriminator::disc_loss_var(&mut g, dr, df).unwrap();
    let grads = p.grads(&g, &g.backward(loss).unwrap());
    assert!(!grads.is_empty());
    assert!(grads.keys().all(|k| k.starts_with(DISC_PREFIX)));
}

fn small_windows(cfg: &Config, model: &PoseModel<f64>, n: usize) -> (Vec<Window>, Vec<Window>) {
    let seqs = generate_dataset(cfg.train.seed, n, &model.body, &cfg.data).unwrap();
    let (tr, va) = split(&seqs, 0.25);
    (windows(tr, cfg.train.frames).unwrap(), windows(va, cfg.train.frames).unwrap())
}

#[test]
fn zero_epochs_returns_initialization() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let model = PoseModel::from_config(cfg.clone()).unwrap();
    let (tr, va) = small_windows(&cfg, &model, 8);
    let init = model.init_params(cfg.train.seed).unwrap();
    let (out, rows) = train(&model, init.clone(), &tr, &va, |_, _| Ok(())).unwrap();
    assert_eq!(rows.len(), 1);
    for (name, t) in init.iter() {
        assert_eq!(out.get(name).unwrap().data(), t.data());
    }
}

#[test]
fn training_is_reproducible_and_writes_artifacts() {
    let cfg = small_config();
    let model = PoseModel::from_config(cfg.clone()).unwrap();
    let (tr, va) = small_windows(&cfg, &model, 8);
    let init = model.init_params(cfg.train.seed).unwrap();
    let (a, rows_a) = train(&model, init.clone(), &tr, &va, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (b, rows_b) = train_to_dir(&model, init, &tr, &va, dir.path()).unwrap();
    assert_eq!(rows_a[1].total.unwrap().to_bits(), rows_b[1].total.unwrap().to_bits());
    assert_eq!(metrics_csv(&rows_a).unwrap(), metrics_csv(&rows_b).unwrap());
    for (name, t) in a.iter() {
        assert_eq!(b.get(name).unwrap().data(), t.data(), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), rows_a.len() + 1);
    let (loaded_model, loaded) = PoseModel::load_checkpoint(dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(loaded_model.config, model.config);
    for (name, t) in b.iter() {
        assert_eq!(loaded.get(name).unwrap().data(), t.data(), "{name}");
    }
    let d = rows_a[1].disc_loss.unwrap();
    assert!(d > 0.0 && d < 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut r);
        let kp = Tensor::<f64>::randn(&[2, 3, 2], 1.0, &mut r);
        let l3 = eval1(|g| { let (x, y) = (g.constant(a.clone()), g.constant(b.clone())); loss_3d_var(g, x, y) });
        let l2 = eval1(|g| {
            let (x, c, k, w) = (g.constant(a.clone()), g.constant(t(&[2, 3], vec![1.0, 0.0, 0.0, 2.0, 0.1, 0.1])), g.constant(kp.clone()), g.constant(Tensor::ones(&[2, 3])));
            loss_2d_var(g, x, c, k, w)
        });
        let th = Tensor::<f64>::randn(&[3, 12], 1.0, &mut r);
        let lo = eval1(|g| { let x = g.constant(th.clone()); orth_loss_var(g, x) });
        prop_assert!(l3 >= 0.0 && l2 >= 0.0 && lo >= 0.0);
    }
}

#[test]
fn default_smoke_run_lowers_training_nll() {
    let mut cfg = Config::default();
    cfg.train.sequences = 200;
    cfg.train.epochs = 5;
    let model = PoseModel::from_config(cfg.clone()).unwrap();
    let seqs = generate_dataset(cfg.train.seed, cfg.train.sequences, &model.body, &cfg.data).unwrap();
    let (tr, va) = split(&seqs, cfg.train.val_fraction);
    let (tr, va) = (windows(tr, cfg.train.frames).unwrap(), windows(va, cfg.train.frames).unwrap());
    let init = model.init_params(cfg.train.seed).unwrap();
    let (before, _) = validate(&model, &init, &tr).unwrap();
    let (params, rows) = train(&model, init, &tr, &va, |_, _| Ok(())).unwrap();
    let (after, _) = validate(&model, &params, &tr).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(after < before, "training NLL {before} -> {after}");
}
