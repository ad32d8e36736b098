//! Joint optimization, evaluation, checkpoints, metric logs and the
//! aggregation/K ablation.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::generate_rays;
use crate::kernel::KernelBackend;
use crate::model::{Model, RayGroup};
use crate::nn::{ParamStore, Session};
use crate::point_encoder::sample_cloud;
use crate::ray_aggregation::{compute_d_inf, AggregationMode, D_INF_MAX_PAIRS};
use crate::scene_io::{ImageRgb, RunConfig, Scene};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const PSNR_CAP: f64 = 99.0;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NPLFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, Adam moments and the run they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub step: u64,
    pub config: RunConfig,
    /// Beyond-cloud distance threshold, fixed at initialization.
    pub d_inf: f64,
}

impl TrainState {
    pub fn new(model: &Model, scene: &Scene) -> Result<Self> {
        let params = model.init_params(model.config.seed);
        Ok(Self {
            adam_m: params.zeros_like(),
            adam_v: params.zeros_like(),
            params,
            step: 0,
            config: model.config.clone(),
            d_inf: scene_d_inf(scene, &model.config)?,
        })
    }
}

/// Largest per-frame d_inf over the training clouds.
pub fn scene_d_inf(scene: &Scene, cfg: &RunConfig) -> Result<f64> {
    let mut best: f64 = 0.0;
    for i in scene.train_indices() {
        let cloud = &scene.frames[i].cloud;
        let seed = cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        best = best.max(compute_d_inf(
            &cloud.points,
            cfg.d_inf_percentile,
            seed,
            D_INF_MAX_PAIRS,
        )?);
    }
    Ok(best)
}

/// `lr_start` at step 0, `lr_end` at `total_steps`, linear in between.
pub fn learning_rate(cfg: &RunConfig, step: u64) -> f64 {
    let t = (step as f64 / cfg.total_steps as f64).min(1.0);
    cfg.lr_start * (1.0 - t) + cfg.lr_end * t
}

/// Rays of one training frame and the cloud they are conditioned on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameBatch {
    pub frame: usize,
    pub cloud_frame: usize,
    pub cloud_seed: u64,
    pub pixels: Vec<(u32, u32)>,
}

/// The batch drawn at `step`; a pure function of the seed and the step.
pub fn plan_batch(cfg: &RunConfig, scene: &Scene, step: u64) -> Result<Vec<FrameBatch>> {
    let train = scene.train_indices();
    if train.is_empty() {
        return Err(Error::InvalidArgument("scene has no training frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let frames = cfg.frames_per_step;
    let jitter = cfg.cloud_time_jitter as i64;
    let last = scene.frames.len() as i64 - 1;
    (0..frames)
        .map(|g| {
            let frame = train[rng.gen_range(0..train.len())];
            let delta = rng.gen_range(-jitter..=jitter);
            let mut cloud_frame = (frame as i64 + delta).clamp(0, last) as usize;
            if scene.frames[cloud_frame].holdout {
                cloud_frame = frame;
            }
            let cam = &scene.frames[frame].camera;
            let count = cfg.ray_batch / frames + usize::from(g < cfg.ray_batch % frames);
            let pixels = (0..count)
                .map(|_| (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height)))
                .collect();
            Ok(FrameBatch {
                frame,
                cloud_frame,
                cloud_seed: rng.gen(),
                pixels,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub loss_per_ray: f64,
    pub lr: f64,
    pub gate_fraction: f64,
}

/// Loss and parameter gradients of one batch, without updating anything.
pub fn batch_loss_and_grads(
    model: &Model,
    params: &ParamStore,
    d_inf: f64,
    scene: &Scene,
    batch: &[FrameBatch],
) -> Result<(f64, usize, f64, ParamStore)> {
    let clouds: Vec<_> = batch
        .iter()
        .map(|b| {
            sample_cloud(
                &scene.frames[b.cloud_frame].cloud,
                model.config.n_sample_points,
                b.cloud_seed,
            )
        })
        .collect();
    let mut rays = Vec::with_capacity(batch.len());
    let mut target = Vec::new();
    for b in batch {
        let f = &scene.frames[b.frame];
        rays.push(generate_rays(&f.camera, Some(&b.pixels))?);
        for &(u, v) in &b.pixels {
            target.extend(f.image.pixel(u, v));
        }
    }
    let groups: Vec<RayGroup<'_>> = batch
        .iter()
        .zip(&rays)
        .zip(&clouds)
        .map(|((b, r), c)| RayGroup {
            camera: &scene.frames[b.frame].camera,
            cloud: c,
            rays: r,
        })
        .collect();
    let n_rays = target.len() / 3;
    let mut s = Session::new(params);
    let out = model.forward(&mut s, &groups, d_inf, None)?;
    let loss = s
        .tape
        .sum_squared_error(out.colors, Tensor::from_vec(&[n_rays, 3], target));
    let value = s.value(loss).data()[0];
    let gate_fraction = out.layout.gate_fraction();
    let grads = s.param_grads(loss);
    Ok((value, n_rays, gate_fraction, grads))
}

/// One Adam update on the batch of `state.step`.
pub fn train_step(model: &Model, state: &mut TrainState, scene: &Scene) -> Result<StepReport> {
    let batch = plan_batch(&state.config, scene, state.step)?;
    train_on_batch(model, state, scene, &batch)
}

/// One Adam update on an explicit batch.
pub fn train_on_batch(
    model: &Model,
    state: &mut TrainState,
    scene: &Scene,
    batch: &[FrameBatch],
) -> Result<StepReport> {
    let (loss, rays, gate_fraction, grads) =
        match batch_loss_and_grads(model, &state.params, state.d_inf, scene, batch) {
            // Diverged weights blow up activations before the loss is formed.
            Err(Error::InvalidArgument(msg)) if msg.starts_with("non-finite") => {
                let detail = serde_json::json!({ "reason": msg, "batch": batch });
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    detail: detail.to_string(),
                });
            }
            r => r?,
        };
    let grads_finite = grads.iter().all(|(_, g)| g.all_finite());
    if !loss.is_finite() || !grads_finite {
        let detail = serde_json::json!({
            "loss": if loss.is_finite() { serde_json::json!(loss) } else { serde_json::json!(loss.to_string()) },
            "gradients_finite": grads_finite,
            "batch": batch,
        });
        return Err(Error::NonFiniteLoss {
            step: state.step,
            detail: detail.to_string(),
        });
    }
    let lr = learning_rate(&state.config, state.step);
    adam_update(state, &grads, lr);
    let report = StepReport {
        step: state.step,
        loss,
        loss_per_ray: loss / rays as f64,
        lr,
        gate_fraction,
    };
    state.step += 1;
    Ok(report)
}

fn adam_update(state: &mut TrainState, grads: &ParamStore, lr: f64) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in state.params.iter_mut() {
        let g = grads.expect(name).data();
        let m = state.adam_m.get_mut(name).expect("moment exists").data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = state.adam_v.get_mut(name).expect("moment exists").data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let m = state.adam_m.expect(name).data();
        let v = state.adam_v.expect(name).data();
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reconstruction,
    Interpolation,
    Extrapolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

pub fn mse(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "image size mismatch");
    let n = a.data.len().max(1) as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImageRgb, gt: &ImageRgb) -> f64 {
    let m = mse(pred, gt);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5), averaged over
/// the three channels. Images smaller than the window use the largest odd
/// window that fits.
pub fn ssim(pred: &ImageRgb, gt: &ImageRgb) -> f64 {
    assert_eq!((pred.width, pred.height), (gt.width, gt.height), "image size mismatch");
    let (w, h) = (pred.width as usize, pred.height as usize);
    let mut size = 11.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (w - size + 1, h - size + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..w * h).map(|i| pred.data[i * 3 + ch]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| gt.data[i * 3 + ch]).collect();
        let filter = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
            // Separable: rows then columns.
            let mut tmp = vec![0.0; ow * h];
            for r in 0..h {
                for c in 0..ow {
                    tmp[r * ow + c] = (0..size).map(|k| g[k] * img(r * w + c + k)).sum();
                }
            }
            let mut out = vec![0.0; ow * oh];
            for r in 0..oh {
                for c in 0..ow {
                    out[r * ow + c] = (0..size).map(|k| g[k] * tmp[(r + k) * ow + c]).sum();
                }
            }
            out
        };
        let mx = filter(&|i| x[i]);
        let my = filter(&|i| y[i]);
        let sxx = filter(&|i| x[i] * x[i]);
        let syy = filter(&|i| y[i] * y[i]);
        let sxy = filter(&|i| x[i] * y[i]);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    total / 3.0
}

pub fn summarize(task: Task, frames: Vec<FrameMetrics>) -> EvalReport {
    let n = frames.len().max(1) as f64;
    EvalReport {
        task,
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
    }
}

/// Renders every listed frame from its own cloud and scores it against the
/// ground truth.
pub fn evaluate(
    model: &Model,
    state: &TrainState,
    scene: &Scene,
    frames: &[usize],
    task: Task,
) -> Result<EvalReport> {
    let mut out = Vec::with_capacity(frames.len());
    for &i in frames {
        let f = scene.frames.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("frame position {i} outside the scene"))
        })?;
        let r = model.render_view(&state.params, state.d_inf, &f.camera, &f.cloud)?;
        out.push(FrameMetrics {
            frame: f.camera.frame_index,
            psnr: psnr(&r.image, &f.image),
            ssim: ssim(&r.image, &f.image),
        });
    }
    Ok(summarize(task, out))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    version: u32,
    step: u64,
    config_hash: String,
    config: RunConfig,
    d_inf: f64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

fn checkpoint_arrays(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (prefix, store) in [
        ("param", &state.params),
        ("adam_m", &state.adam_m),
        ("adam_v", &state.adam_v),
    ] {
        for (name, t) in store.iter() {
            out.push((format!("{prefix}.{name}"), t));
        }
    }
    out
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let arrays = checkpoint_arrays(state);
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step: state.step,
        config_hash: state.config.hash(),
        config: state.config.clone(),
        d_inf: state.d_inf,
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, t) in arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let corrupt = |m: String| Error::CorruptCheckpoint(m);
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing checkpoint header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| corrupt(format!("metadata needs {meta_len} bytes, file is truncated")))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end])
        .map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: meta.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Incompatible(
            "checkpoint config does not match its recorded hash".into(),
        ));
    }
    let total: usize = meta
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>())
        .sum();
    let expected = meta_end + total * 8;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes of checkpoint data, found {}",
            bytes.len()
        )));
    }
    let mut stores: BTreeMap<&str, ParamStore> = BTreeMap::new();
    let mut pos = meta_end;
    for a in &meta.arrays {
        let n: usize = a.shape.iter().product();
        let data = bytes[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += n * 8;
        let (prefix, name) = a
            .name
            .split_once('.')
            .ok_or_else(|| corrupt(format!("bad array name {:?}", a.name)))?;
        let store = match prefix {
            "param" | "adam_m" | "adam_v" => stores.entry(prefix).or_default(),
            other => return Err(corrupt(format!("unknown array group {other:?}"))),
        };
        store.insert(name, Tensor::from_vec(&a.shape, data));
    }
    let mut take = |k: &str| stores.remove(k).unwrap_or_default();
    let state = TrainState {
        params: take("param"),
        adam_m: take("adam_m"),
        adam_v: take("adam_v"),
        step: meta.step,
        config: meta.config,
        d_inf: meta.d_inf,
    };
    let names = |s: &ParamStore| s.names().cloned().collect::<Vec<_>>();
    if names(&state.params) != names(&state.adam_m) || names(&state.params) != names(&state.adam_v) {
        return Err(corrupt("parameter and moment arrays disagree".into()));
    }
    Ok(state)
}

/// Checks that `state` holds exactly the parameters `model` expects.
pub fn check_compatible(model: &Model, state: &TrainState) -> Result<()> {
    if state.config.hash() != model.config.hash() {
        return Err(Error::Incompatible(format!(
            "checkpoint config hash {} differs from {}",
            state.config.hash(),
            model.config.hash()
        )));
    }
    let fresh = model.init_params(0);
    for (name, t) in fresh.iter() {
        match state.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Incompatible(format!("checkpoint lacks {name}"))),
        }
    }
    if fresh.len() != state.params.len() {
        return Err(Error::Incompatible("checkpoint has extra parameters".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metric logs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepReport),
    Eval {
        task: Task,
        frame: usize,
        psnr: f64,
        ssim: f64,
    },
}

/// Append-only JSON-lines log.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    /// Opens an existing log for a resumed run, dropping step records at or
    /// past `step` along with everything after them.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                match serde_json::from_str::<MetricRecord>(&line) {
                    Ok(MetricRecord::Step(r)) if r.step >= step => break,
                    Ok(_) => kept.push(line),
                    Err(_) => break,
                }
            }
        }
        let mut log = Self::create(path)?;
        for line in kept {
            writeln!(log.file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(log)
    }

    /// Opens `path` for appending, creating it when missing.
    pub fn open_append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io("metrics log", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

// ---------------------------------------------------------------------------
// Training driver

pub const CHECKPOINT_FILE: &str = "checkpoint.nplf";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains until `state.step == until`, logging every step and writing a
/// checkpoint every `checkpoint_every` steps and at the end when `out_dir`
/// is given.
pub fn run_training(
    model: &Model,
    state: &mut TrainState,
    scene: &Scene,
    until: u64,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    let mut log = match out_dir {
        Some(d) => Some(MetricsLog::resume(&d.join(METRICS_FILE), state.step)?),
        None => None,
    };
    let mut reports = Vec::new();
    while state.step < until {
        let r = train_step(model, state, scene)?;
        if let Some(log) = log.as_mut() {
            log.append(&MetricRecord::Step(r))?;
        }
        on_step(&r);
        reports.push(r);
        if let Some(d) = out_dir {
            if state.step % state.config.checkpoint_every == 0 || state.step == until {
                save_checkpoint(state, &d.join(CHECKPOINT_FILE))?;
            }
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub aggregation: AggregationMode,
    pub k: usize,
}

/// Naive sum and inverse-distance weighting at K=8, then attention at
/// K = 0, 1, 2, 8.
pub fn ablation_variants() -> Vec<AblationVariant> {
    let v = |name: &str, aggregation, k| AblationVariant {
        name: name.to_string(),
        aggregation,
        k,
    };
    vec![
        v("naive_sum", AggregationMode::NaiveSum, 8),
        v("heuristic", AggregationMode::Heuristic, 8),
        v("attention_k0", AggregationMode::Attention, 0),
        v("attention_k1", AggregationMode::Attention, 1),
        v("attention_k2", AggregationMode::Attention, 2),
        v("attention_k8", AggregationMode::Attention, 8),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub steps: u64,
    pub final_loss_per_ray: f64,
    pub reconstruction: EvalReport,
    pub interpolation: Option<EvalReport>,
}

pub const ABLATION_ROWS_FILE: &str = "ablation_rows.jsonl";
pub const ABLATION_TABLE_FILE: &str = "ablation.json";

/// Trains every variant from the same seed for `base.total_steps` steps.
/// With `out_dir`, rows are appended as they finish and variants already
/// present are skipped.
pub fn run_ablation(
    scene: &Scene,
    base: &RunConfig,
    backend: KernelBackend,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let rows_path: Option<PathBuf> = out_dir.map(|d| d.join(ABLATION_ROWS_FILE));
    let mut done: Vec<AblationRow> = match &rows_path {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect()
        }
        _ => Vec::new(),
    };
    let mut rows = Vec::new();
    for variant in ablation_variants() {
        if let Some(pos) = done.iter().position(|r| r.variant == variant) {
            rows.push(done.remove(pos));
            continue;
        }
        let mut cfg = base.clone();
        cfg.aggregation = variant.aggregation;
        cfg.k_closest = variant.k;
        let model = Model::new(&cfg, backend);
        let mut state = TrainState::new(&model, scene)?;
        let reports = run_training(&model, &mut state, scene, cfg.total_steps, None, |_| {})?;
        let tail = &reports[reports.len().saturating_sub(10)..];
        let final_loss = tail.iter().map(|r| r.loss_per_ray).sum::<f64>() / tail.len().max(1) as f64;
        let reconstruction = evaluate(&model, &state, scene, &scene.train_indices(), Task::Reconstruction)?;
        let holdout = scene.holdout_indices();
        let interpolation = if holdout.is_empty() {
            None
        } else {
            Some(evaluate(&model, &state, scene, &holdout, Task::Interpolation)?)
        };
        let row = AblationRow {
            variant,
            steps: state.step,
            final_loss_per_ray: final_loss,
            reconstruction,
            interpolation,
        };
        if let Some(p) = &rows_path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(p, e))?;
        }
        on_row(&row);
        rows.push(row);
    }
    if let Some(d) = out_dir {
        let p = d.join(ABLATION_TABLE_FILE);
        fs::write(&p, serde_json::to_string_pretty(&rows)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: u32, h: u32, v: f64) -> ImageRgb {
        ImageRgb::filled(w, h, [v; 3])
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(psnr(&gray(8, 8, 0.3), &gray(8, 8, 0.3)), PSNR_CAP);
        assert!((psnr(&gray(8, 8, 0.5), &gray(8, 8, 0.4)) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_monotone_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut img = ImageRgb::new(32, 24);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(0.2..0.8);
        }
        assert!((ssim(&img, &img) - 1.0).abs() < 1e-12);
        let noise: Vec<f64> = (0..img.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = 1.0;
        for sigma in [0.02, 0.05, 0.1, 0.2, 0.4] {
            let mut noisy = img.clone();
            for (v, n) in noisy.data.iter_mut().zip(&noise) {
                *v += sigma * n;
            }
            let s = ssim(&noisy, &img);
            assert!(s < last, "ssim {s} at sigma {sigma} not below {last}");
            last = s;
        }
    }

    #[test]
    fn learning_rate_endpoints() {
        let cfg = RunConfig {
            total_steps: 100,
            ..RunConfig::default()
        };
        assert_eq!(learning_rate(&cfg, 0), cfg.lr_start);
        assert_eq!(learning_rate(&cfg, 100), cfg.lr_end);
        let mid = learning_rate(&cfg, 50);
        assert!((mid - (cfg.lr_start + cfg.lr_end) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn ablation_has_six_rows() {
        let v = ablation_variants();
        assert_eq!(v.len(), 6);
        assert_eq!(v.iter().filter(|x| x.aggregation == AggregationMode::Attention).count(), 4);
    }
}
