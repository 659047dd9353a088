//! `flowpose` command-line driver.
//!
//! ```text
//! flowpose generate --seed 7 --sequences 10 --out data.fpds
//! flowpose train --dataset data.fpds --out run/
//! flowpose eval --checkpoint run/checkpoint.json --dataset data.fpds --samples 25 --out eval/
//! flowpose sample --checkpoint init --keypoints kp.json --samples 5 --out samples.json
//! flowpose fit --checkpoint run/checkpoint.json --keypoints kp.json --out fit.json
//! flowpose export-mesh --fit fit.json --out meshes/
//! ```
//!
//! Verbosity follows the `FLOWPOSE_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use flowpose::data::{generate_dataset, ingest_keypoints, observation_tensor, read_dataset, write_dataset};
use flowpose::eval::{evaluate, hypothesis_rng};
use flowpose::fitting::{fit, FitReport, FitTarget};
use flowpose::metrics::{aggregate, report_csv};
use flowpose::rotations::{axis_angle_to_matrix, matrix_to_axis_angle, rot6d_to_matrix, AxisAngle, Rot6D};
use flowpose::train::{split, train_to_dir, windows};
use flowpose::{Config, ParamSet, PoseModel, Tensor};

#[derive(Debug, Parser)]
#[command(name = "flowpose", version, about = "Temporal probabilistic pose and shape estimation")]
struct Cli {
    /// TOML configuration file; built-in defaults otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides `train.seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Generate {
        /// Number of sequences.
        #[arg(long, value_name = "N", default_value_t = 100)]
        sequences: usize,
        /// Dataset file to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train and write `checkpoint.json` and `metrics.csv` into a directory.
    Train {
        /// Training data; generated from the seed when absent.
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write `report.csv` and `report.json` with per-sequence metrics.
    Eval {
        /// Checkpoint file, or `init` for fresh parameters.
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
        /// Dataset file to evaluate.
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Hypotheses per frame for min-over-n PA-MPJPE (0 skips it).
        #[arg(long, value_name = "N", default_value_t = 0)]
        samples: usize,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write pose hypotheses with their log-densities as JSON.
    Sample {
        /// Checkpoint file, or `init` for fresh parameters.
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
        #[command(flatten)]
        input: InputArgs,
        /// Hypotheses per frame.
        #[arg(long, value_name = "N", default_value_t = 10)]
        samples: usize,
        /// JSON file to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Fit poses, shapes and cameras to keypoints; writes JSON.
    Fit {
        /// Checkpoint file, or `init` for fresh parameters.
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
        #[command(flatten)]
        input: InputArgs,
        /// JSON file to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also write one OBJ mesh per fitted frame here.
        #[arg(long, value_name = "DIR")]
        meshes: Option<PathBuf>,
    },
    /// Write OBJ meshes, one per frame, from a fit result or from the
    /// regression mode of a checkpoint.
    ExportMesh {
        /// Fit result written by `fit`.
        #[arg(long, value_name = "PATH", conflicts_with = "checkpoint")]
        fit: Option<PathBuf>,
        /// Checkpoint whose regression mode is exported, or `init`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<String>,
        #[command(flatten)]
        input: InputArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Where observations come from: a keypoint file or one dataset sequence.
#[derive(Debug, Args)]
struct InputArgs {
    /// Keypoint detection JSON.
    #[arg(long, value_name = "PATH", conflicts_with = "dataset")]
    keypoints: Option<PathBuf>,
    /// Dataset file holding the input sequence.
    #[arg(long, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Sequence index within `--dataset`.
    #[arg(long, value_name = "N", default_value_t = 0)]
    sequence: usize,
}

struct Observed {
    obs: Tensor,
    target: FitTarget,
}

impl InputArgs {
    fn load(&self) -> anyhow::Result<Observed> {
        let (kp, conf) = if let Some(path) = &self.keypoints {
            let o = ingest_keypoints(path).with_context(|| format!("--keypoints {}", path.display()))?;
            (o.keypoints, o.confidence)
        } else if let Some(path) = &self.dataset {
            let mut seqs = read_dataset(path).with_context(|| format!("--dataset {}", path.display()))?;
            if self.sequence >= seqs.len() {
                bail!("--sequence {} is out of range ({} sequences)", self.sequence, seqs.len());
            }
            let s = seqs.swap_remove(self.sequence);
            (s.keypoints, s.confidence)
        } else {
            bail!("one of --keypoints or --dataset is required");
        };
        Ok(Observed {
            obs: observation_tensor(&kp, &conf)?,
            target: FitTarget {
                keypoints: kp,
                confidence: conf,
            },
        })
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("--config {}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_model(checkpoint: &str, cfg: Config) -> anyhow::Result<(PoseModel, ParamSet)> {
    if checkpoint == "init" {
        let seed = cfg.train.seed;
        let model = PoseModel::from_config(cfg)?;
        let params = model.init_params(seed)?;
        return Ok((model, params));
    }
    PoseModel::load_checkpoint(checkpoint).with_context(|| format!("--checkpoint {checkpoint}"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("--out {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn axis_angles(theta6d: &[f64]) -> anyhow::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(theta6d.len() / 2);
    for r in theta6d.chunks(6) {
        out.extend(matrix_to_axis_angle(&rot6d_to_matrix(&Rot6D::from_slice(r))?)?.0);
    }
    Ok(out)
}

fn write_meshes(model: &PoseModel, poses: &[(Vec<[[f64; 3]; 3]>, Vec<f64>)], dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (t, (rots, beta)) in poses.iter().enumerate() {
        let mesh = model.body.forward(rots, beta)?;
        let f = File::create(dir.join(format!("frame_{t:04}.obj")))?;
        model.body.write_obj(&mesh.vertices, BufWriter::new(f))?;
    }
    Ok(())
}

fn fit_poses(report: &FitReport) -> anyhow::Result<Vec<(Vec<[[f64; 3]; 3]>, Vec<f64>)>> {
    report
        .frames
        .iter()
        .map(|f| {
            let rots = f
                .theta_axis_angle
                .chunks(3)
                .map(|v| axis_angle_to_matrix(&AxisAngle([v[0], v[1], v[2]])))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((rots, f.beta.clone()))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("--threads")?;
    let cfg = load_config(&cli)?;
    let seed = cfg.train.seed;
    match &cli.command {
        Command::Generate { sequences, out } => {
            let model = PoseModel::from_config(cfg.clone())?;
            let seqs = generate_dataset(seed, *sequences, &model.body, &cfg.data)?;
            write_dataset(&seqs, out).with_context(|| format!("--out {}", out.display()))?;
            println!("wrote {} sequences to {}", seqs.len(), out.display());
        }
        Command::Train { dataset, out } => {
            let model = PoseModel::from_config(cfg.clone())?;
            let seqs = match dataset {
                Some(p) => read_dataset(p).with_context(|| format!("--dataset {}", p.display()))?,
                None => generate_dataset(seed, cfg.train.sequences, &model.body, &cfg.data)?,
            };
            let (tr, va) = split(&seqs, cfg.train.val_fraction);
            let (tr, va) = (windows(tr, cfg.train.frames)?, windows(va, cfg.train.frames)?);
            let params = model.init_params(seed)?;
            let (_, rows) = train_to_dir(&model, params, &tr, &va, out)?;
            let last = rows.last().expect("epoch 0 row");
            println!(
                "trained {} epochs: val_nll {:.4}, val_pa_mpjpe {:.2} mm",
                last.epoch, last.val_nll, last.val_pa_mpjpe
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            samples,
            out,
        } => {
            let (model, params) = load_model(checkpoint, cfg)?;
            let seqs = read_dataset(dataset).with_context(|| format!("--dataset {}", dataset.display()))?;
            let reports = evaluate(&model, &params, &seqs, *samples, seed)?;
            std::fs::create_dir_all(out).with_context(|| format!("--out {}", out.display()))?;
            std::fs::write(out.join("report.csv"), report_csv(&reports)?)?;
            let all = aggregate(&reports);
            write_json(&out.join("report.json"), &json!({ "sequences": reports, "aggregate": all }))?;
            println!("pa_mpjpe {:.2} mm over {} sequences", all.pa_mpjpe.mean, reports.len());
        }
        Command::Sample {
            checkpoint,
            input,
            samples,
            out,
        } => {
            if *samples == 0 {
                bail!("--samples must be at least 1");
            }
            let (model, params) = load_model(checkpoint, cfg)?;
            let o = input.load()?;
            let r = model.regress(&params, &o.obs)?;
            let c = model.config.encoder.context;
            let mut frames = Vec::new();
            for f in 0..o.obs.shape()[0] {
                let mut rng = hypothesis_rng(seed, 0, f);
                let (theta, lp) = model
                    .flow
                    .sample(&params, *samples, &r.context.data()[f * c..(f + 1) * c], &mut rng)?;
                let hyps = (0..*samples)
                    .map(|k| Ok(json!({ "theta_axis_angle": axis_angles(theta.row(k))?, "log_prob": lp[k] })))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                frames.push(json!({ "hypotheses": hyps }));
            }
            write_json(out, &json!({ "samples": samples, "frames": frames }))?;
            println!("wrote {} frames x {} hypotheses to {}", frames.len(), samples, out.display());
        }
        Command::Fit {
            checkpoint,
            input,
            out,
            meshes,
        } => {
            let fit_cfg = cfg.fit.clone();
            let (model, params) = load_model(checkpoint, cfg)?;
            let o = input.load()?;
            let result = fit(&model, &params, &o.obs, &o.target, &fit_cfg)?;
            write_json(out, &result.report)?;
            if let Some(dir) = meshes {
                write_meshes(&model, &fit_poses(&result.report)?, dir)?;
            }
            println!(
                "fitted {} frames: energy {:.6} -> {:.6}",
                result.report.frames.len(),
                result.initial.total,
                result.final_energy.total
            );
        }
        Command::ExportMesh {
            fit,
            checkpoint,
            input,
            out,
        } => {
            let (model, poses) = if let Some(path) = fit {
                let text = std::fs::read_to_string(path).with_context(|| format!("--fit {}", path.display()))?;
                let report: FitReport = serde_json::from_str(&text).with_context(|| format!("--fit {}", path.display()))?;
                (PoseModel::from_config(cfg)?, fit_poses(&report)?)
            } else if let Some(ck) = checkpoint {
                let (model, params) = load_model(ck, cfg)?;
                let o = input.load()?;
                let r = model.regress(&params, &o.obs)?;
                let poses = (0..o.obs.shape()[0])
                    .map(|f| {
                        let rots = r
                            .mode
                            .row(f)
                            .chunks(6)
                            .map(|v| rot6d_to_matrix(&Rot6D::from_slice(v)))
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok((rots, r.beta.row(f).to_vec()))
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                (model, poses)
            } else {
                bail!("one of --fit or --checkpoint is required");
            };
            write_meshes(&model, &poses, out)?;
            println!("wrote {} meshes to {}", poses.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FLOWPOSE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // first line only; clap appends usage and a help hint
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
