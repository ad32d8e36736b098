//! `nplf` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelBackend;
use crate::linalg::Rigid;
use crate::model::Model;
use crate::scene_io::{load_scene, split_frames, CameraView, RunConfig, Scene};
use crate::synth_scenes::{write_scene, SceneSpec};
use crate::training::{
    evaluate, load_checkpoint, check_compatible, run_ablation, run_training, save_checkpoint,
    EvalReport, MetricRecord, MetricsLog, Task, TrainState, CHECKPOINT_FILE, METRICS_FILE,
    ABLATION_ROWS_FILE, ABLATION_TABLE_FILE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_EXISTS: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_INCOMPATIBLE: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "nplf", version, about = "Neural point light fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene directory from a scene spec JSON.
    GenScene {
        spec: PathBuf,
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train on a scene, writing checkpoints and a metrics log.
    Train {
        scene: PathBuf,
        config: PathBuf,
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Render the holdout frames, or the poses listed in a JSON file.
    Render {
        checkpoint: PathBuf,
        scene: PathBuf,
        out: PathBuf,
        /// JSON list of 16 row-major camera-to-world values per pose.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Config the checkpoint must have been trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score reconstruction and interpolation quality.
    Eval {
        checkpoint: PathBuf,
        scene: PathBuf,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train every aggregation/K variant and write the comparison table.
    Ablate {
        scene: PathBuf,
        config: PathBuf,
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
}

/// Failure of a command together with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
            Error::VersionMismatch { .. } | Error::Incompatible(_) => EXIT_INCOMPATIBLE,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn refuse(path: &Path) -> CliError {
    CliError {
        code: EXIT_EXISTS,
        message: format!("{} already exists; pass --force to overwrite", path.display()),
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Creates `dir`, clearing it first under `force`; refuses a non-empty
/// directory otherwise.
fn prepare_out_dir(dir: &Path, force: bool) -> std::result::Result<(), CliError> {
    if dir.is_file() || is_nonempty_dir(dir) {
        if !force {
            return Err(refuse(dir));
        }
        if dir.is_file() {
            fs::remove_file(dir).map_err(|e| Error::io(dir, e))?;
        } else {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path, seed: Option<u64>, steps: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.total_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_for(cfg: &RunConfig, scene: Scene) -> Result<Scene> {
    split_frames(scene, cfg.holdout_fraction, cfg.seed)
}

/// Loads a checkpoint, checks it against an optional config file and
/// builds the matching model and split scene.
fn load_trained(
    checkpoint: &Path,
    scene_dir: &Path,
    config: Option<&Path>,
) -> Result<(Model, TrainState, Scene)> {
    let state = load_checkpoint(checkpoint)?;
    if let Some(p) = config {
        let cfg = RunConfig::load(p)?;
        if cfg.hash() != state.config.hash() {
            return Err(Error::Incompatible(format!(
                "config hash {} does not match checkpoint hash {}",
                cfg.hash(),
                state.config.hash()
            )));
        }
    }
    let model = Model::new(&state.config, KernelBackend::from_env()?);
    check_compatible(&model, &state)?;
    let scene = split_for(&state.config, load_scene(scene_dir)?)?;
    Ok((model, state, scene))
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::GenScene {
            spec,
            out,
            seed,
            force,
        } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let mut spec = SceneSpec::from_json(&text)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            prepare_out_dir(&out, force)?;
            let scene = write_scene(&spec, &out)?;
            fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec).map_err(Error::from)? + "\n")
                .map_err(|e| Error::io(out.join("spec.json"), e))?;
            info!("wrote {} frames to {}", scene.frames.len(), out.display());
            Ok(())
        }
        Command::Train {
            scene,
            config,
            out,
            steps,
            seed,
            resume,
            force,
        } => {
            let ckpt = out.join(CHECKPOINT_FILE);
            let (model, mut state, scene) = if resume && ckpt.exists() {
                let mut state = load_checkpoint(&ckpt)?;
                let cfg = load_config(&config, seed, steps)?;
                // Only the step budget may change across a resume.
                let mut expect = state.config.clone();
                expect.total_steps = cfg.total_steps;
                if expect.hash() != cfg.hash() {
                    return Err(Error::Incompatible(
                        "config differs from the checkpoint being resumed".into(),
                    )
                    .into());
                }
                state.config = cfg.clone();
                let model = Model::new(&cfg, KernelBackend::from_env()?);
                check_compatible(&model, &state)?;
                let scene = split_for(&cfg, load_scene(&scene)?)?;
                (model, state, scene)
            } else {
                let cfg = load_config(&config, seed, steps)?;
                let scene = split_for(&cfg, load_scene(&scene)?)?;
                prepare_out_dir(&out, force)?;
                let model = Model::new(&cfg, KernelBackend::from_env()?);
                let state = TrainState::new(&model, &scene)?;
                fs::write(out.join("config.json"), cfg.to_json() + "\n")
                    .map_err(|e| Error::io(out.join("config.json"), e))?;
                (model, state, scene)
            };
            let total = state.config.total_steps;
            let result = run_training(&model, &mut state, &scene, total, Some(&out), |r| {
                if r.step % 100 == 0 {
                    info!("step {} loss/ray {:.6} lr {:.3e}", r.step, r.loss_per_ray, r.lr);
                }
            });
            if let Err(Error::NonFiniteLoss { step, detail }) = &result {
                let dump = out.join("nonfinite_batch.json");
                let _ = fs::write(&dump, format!("{{\"step\":{step},\"detail\":{detail}}}\n"));
            }
            result?;
            save_checkpoint(&state, &ckpt)?;
            Ok(())
        }
        Command::Render {
            checkpoint,
            scene,
            out,
            poses,
            config,
            force,
        } => {
            let (model, state, scene) = load_trained(&checkpoint, &scene, config.as_deref())?;
            prepare_out_dir(&out, force)?;
            let views: Vec<(String, CameraView, usize)> = match poses {
                None => scene
                    .holdout_indices()
                    .into_iter()
                    .map(|i| {
                        let f = &scene.frames[i];
                        (format!("frame_{:04}.png", f.camera.frame_index), f.camera.clone(), i)
                    })
                    .collect(),
                Some(p) => {
                    let list: Vec<Vec<f64>> = read_json_file(&p)?;
                    let base = scene.frames[0].camera.clone();
                    list.iter()
                        .enumerate()
                        .map(|(n, m)| {
                            let pose = Rigid::from_row_major(m)?;
                            let camera = CameraView {
                                cam_to_world: pose,
                                frame_index: n,
                                ..base.clone()
                            };
                            let cloud = nearest_cloud(&scene, &camera);
                            Ok((format!("pose_{n:04}.png"), camera, cloud))
                        })
                        .collect::<Result<_>>()?
                }
            };
            let mut evaluations = Vec::new();
            for (name, camera, cloud) in &views {
                let r = model.render_view(&state.params, state.d_inf, camera, &scene.frames[*cloud].cloud)?;
                r.image.save_png(&out.join(name))?;
                evaluations.push(RenderRecord {
                    image: name.clone(),
                    cloud_frame: scene.frames[*cloud].camera.frame_index,
                    radiance_evaluations: r.evaluations,
                    gate_fraction: r.gate.iter().filter(|g| **g).count() as f64 / r.gate.len().max(1) as f64,
                });
            }
            let p = out.join("render.json");
            fs::write(&p, serde_json::to_string_pretty(&evaluations).map_err(Error::from)? + "\n")
                .map_err(|e| Error::io(&p, e))?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            scene,
            out,
            config,
            force,
        } => {
            let (model, state, scene) = load_trained(&checkpoint, &scene, config.as_deref())?;
            if let Some(p) = &out {
                if p.exists() && !force {
                    return Err(refuse(p));
                }
            }
            let report = eval_report(&model, &state, &scene)?;
            let log_path = checkpoint.with_file_name(METRICS_FILE);
            if log_path.exists() {
                let mut log = MetricsLog::open_append(&log_path)?;
                log_eval(&mut log, &report.reconstruction)?;
                log_eval(&mut log, &report.interpolation)?;
            }
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Ablate {
            scene,
            config,
            out,
            steps,
            seed,
            force,
        } => {
            let cfg = load_config(&config, seed, steps)?;
            let scene = split_for(&cfg, load_scene(&scene)?)?;
            let partial = out.join(ABLATION_ROWS_FILE).exists() && !out.join(ABLATION_TABLE_FILE).exists();
            if force || !partial {
                prepare_out_dir(&out, force)?;
            }
            let rows = run_ablation(&scene, &cfg, KernelBackend::from_env()?, Some(&out), |r| {
                info!(
                    "{}: reconstruction {:.2} dB",
                    r.variant.name, r.reconstruction.mean_psnr
                );
            })?;
            for r in &rows {
                println!(
                    "{:<14} K={} reconstruction_psnr={:.3} interpolation_psnr={}",
                    r.variant.name,
                    r.variant.k,
                    r.reconstruction.mean_psnr,
                    r.interpolation
                        .as_ref()
                        .map_or("n/a".to_string(), |e| format!("{:.3}", e.mean_psnr))
                );
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct RenderRecord {
    image: String,
    cloud_frame: usize,
    radiance_evaluations: u64,
    gate_fraction: f64,
}

/// Both evaluation tasks of a trained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub step: u64,
    pub config_hash: String,
    pub reconstruction: EvalReport,
    pub interpolation: EvalReport,
}

pub fn eval_report(model: &Model, state: &TrainState, scene: &Scene) -> Result<FullReport> {
    Ok(FullReport {
        step: state.step,
        config_hash: state.config.hash(),
        reconstruction: evaluate(model, state, scene, &scene.train_indices(), Task::Reconstruction)?,
        interpolation: evaluate(model, state, scene, &scene.holdout_indices(), Task::Interpolation)?,
    })
}

/// Training frame whose camera center is closest to `camera`'s.
fn nearest_cloud(scene: &Scene, camera: &CameraView) -> usize {
    let c = camera.center();
    scene
        .train_indices()
        .into_iter()
        .min_by(|&a, &b| {
            let da = (scene.frames[a].camera.center() - c).norm();
            let db = (scene.frames[b].camera.center() - c).norm();
            da.total_cmp(&db)
        })
        .expect("split leaves training frames")
}

/// Appends evaluation records for `report` to a metrics log.
pub fn log_eval(log: &mut MetricsLog, report: &EvalReport) -> Result<()> {
    for f in &report.frames {
        log.append(&MetricRecord::Eval {
            task: report.task,
            frame: f.frame,
            psnr: f.psnr,
            ssim: f.ssim,
        })?;
    }
    Ok(())
}
