//! Scene data model, the on-disk scene directory and run configuration.
//!
//! A scene directory holds `scene.json`, one 8-bit RGB PNG per frame under
//! `images/` and one ASCII PLY point cloud per frame under `points/`. Point
//! clouds are expressed in the capturing camera's local frame, so the frame
//! pose doubles as the cloud's local-to-world transform.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Rigid, Vec3};
use crate::ray_aggregation::AggregationMode;

pub const SCENE_VERSION: &str = "nplf-scene/1";

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            skew: 0.0,
        }
    }

    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 9 {
            return Err(Error::Validation(format!(
                "intrinsics need 9 values, got {}",
                m.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("intrinsics are not finite".into()));
        }
        if m[3] != 0.0 || m[6] != 0.0 || m[7] != 0.0 || m[8] != 1.0 {
            return Err(Error::Validation(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if !(m[0] > 0.0 && m[4] > 0.0) {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        Ok(Self {
            fx: m[0],
            skew: m[1],
            cx: m[2],
            fy: m[4],
            cy: m[5],
        })
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        [
            self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0,
        ]
    }

    /// Projects a camera-frame point with positive depth to pixel coordinates.
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        let (x, y) = (p.x / p.z, p.y / p.z);
        (self.fx * x + self.skew * y + self.cx, self.fy * y + self.cy)
    }

    /// Camera-frame direction (unnormalized, `z = 1`) through pixel position
    /// `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        let y = (v - self.cy) / self.fy;
        let x = (u - self.cx - self.skew * y) / self.fx;
        Vec3::new(x, y, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub cam_to_world: Rigid,
    pub width: u32,
    pub height: u32,
    pub frame_index: usize,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image dimensions must be >= 1".into()));
        }
        if !(self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0) {
            return Err(Error::Validation("focal lengths must be positive".into()));
        }
        self.cam_to_world.validate()
    }

    pub fn center(&self) -> Vec3 {
        self.cam_to_world.translation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// Coordinates in the sensor's local frame.
    pub points: Vec<Vec3>,
    pub frame_index: usize,
    pub local_to_world: Rigid,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn world_points(&self) -> Vec<Vec3> {
        self.points
            .iter()
            .map(|p| self.local_to_world.apply_point(*p))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::corrupt(Some(self.frame_index), "point cloud is empty"));
        }
        if self.points.iter().any(|p| !p.is_finite()) {
            return Err(Error::corrupt(
                Some(self.frame_index),
                "point cloud has non-finite coordinates",
            ));
        }
        Ok(())
    }
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snaps every channel onto the 8-bit grid used by the PNG files.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| quantize(*v) as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| quantize(*v)).collect();
        let img = image::RgbImage::from_raw(self.width, self.height, bytes)
            .expect("buffer matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub camera: CameraView,
    pub image: ImageRgb,
    pub cloud: PointCloud,
    pub holdout: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frames: Vec<Frame>,
}

impl Scene {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| !self.frames[i].holdout)
            .collect()
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].holdout)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::corrupt(None, "scene has no frames"))?;
        for f in &self.frames {
            f.camera.validate().map_err(|e| match e {
                Error::Validation(m) => {
                    Error::Validation(format!("frame {}: {m}", f.camera.frame_index))
                }
                other => other,
            })?;
            if f.camera.intrinsics != first.camera.intrinsics
                || f.camera.width != first.camera.width
                || f.camera.height != first.camera.height
            {
                return Err(Error::corrupt(
                    Some(f.camera.frame_index),
                    "frames must share intrinsics and image size",
                ));
            }
            if f.image.width != f.camera.width || f.image.height != f.camera.height {
                return Err(Error::corrupt(
                    Some(f.camera.frame_index),
                    format!(
                        "image is {}x{}, expected {}x{}",
                        f.image.width, f.image.height, f.camera.width, f.camera.height
                    ),
                ));
            }
            f.cloud.validate()?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: String,
    intrinsics: Vec<f64>,
    width: u32,
    height: u32,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    index: usize,
    pose: Vec<f64>,
    image: String,
    points: String,
}

pub fn image_rel_path(index: usize) -> String {
    format!("images/frame_{index:04}.png")
}

pub fn points_rel_path(index: usize) -> String {
    format!("points/frame_{index:04}.ply")
}

/// Writes `scene` as a scene directory. Images are quantized to 8 bits and
/// point coordinates to 32-bit floats.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    for sub in ["images", "points"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let first = &scene.frames[0].camera;
    let mut entries = Vec::with_capacity(scene.frames.len());
    for f in &scene.frames {
        let idx = f.camera.frame_index;
        let image = image_rel_path(idx);
        let points = points_rel_path(idx);
        f.image.save_png(&dir.join(&image))?;
        write_ply(&dir.join(&points), &f.cloud.points)?;
        entries.push(FrameEntry {
            index: idx,
            pose: f.camera.cam_to_world.to_row_major().to_vec(),
            image,
            points,
        });
    }
    let file = SceneFile {
        version: SCENE_VERSION.to_string(),
        intrinsics: first.intrinsics.to_row_major().to_vec(),
        width: first.width,
        height: first.height,
        frames: entries,
    };
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: SceneFile = serde_json::from_str(&text)
        .map_err(|e| Error::corrupt(None, format!("scene.json: {e}")))?;
    if file.version != SCENE_VERSION {
        return Err(Error::corrupt(
            None,
            format!("unsupported scene version {:?}", file.version),
        ));
    }
    let intrinsics = Intrinsics::from_row_major(&file.intrinsics)?;
    let mut entries = file.frames;
    entries.sort_by_key(|e| e.index);
    if entries.windows(2).any(|w| w[0].index == w[1].index) {
        return Err(Error::corrupt(None, "duplicate frame indices"));
    }
    let mut frames = Vec::with_capacity(entries.len());
    for e in entries {
        let cam_to_world = Rigid::from_row_major(&e.pose).map_err(|err| match err {
            Error::Validation(m) => Error::Validation(format!("frame {}: {m}", e.index)),
            other => other,
        })?;
        let camera = CameraView {
            intrinsics,
            cam_to_world,
            width: file.width,
            height: file.height,
            frame_index: e.index,
        };
        let image_path = dir.join(&e.image);
        if !image_path.is_file() {
            return Err(Error::corrupt(
                Some(e.index),
                format!("missing image {}", e.image),
            ));
        }
        let image = ImageRgb::load_png(&image_path)
            .map_err(|err| Error::corrupt(Some(e.index), format!("{}: {err}", e.image)))?;
        let points_path = dir.join(&e.points);
        if !points_path.is_file() {
            return Err(Error::corrupt(
                Some(e.index),
                format!("missing point cloud {}", e.points),
            ));
        }
        let points = read_ply(&points_path)
            .map_err(|err| Error::corrupt(Some(e.index), format!("{}: {err}", e.points)))?;
        frames.push(Frame {
            camera,
            image,
            cloud: PointCloud {
                points,
                frame_index: e.index,
                local_to_world: cam_to_world,
            },
            holdout: false,
        });
    }
    let scene = Scene { frames };
    scene.validate()?;
    Ok(scene)
}

/// ASCII PLY with `float` x/y/z vertex properties.
pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 32 + 128);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text).map_err(|m| Error::corrupt(None, m))
}

fn parse_ply(text: &str) -> std::result::Result<Vec<Vec3>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(format!("unsupported ply format {fmt}"))
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|e| e.to_string())?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or("no vertex element")?;
    let axis = |n: &str| {
        props
            .iter()
            .position(|p| p == n)
            .ok_or_else(|| format!("missing property {n}"))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let line = lines.next().ok_or_else(|| format!("expected {count} vertices, got {i}"))?;
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>().map_err(|e| format!("vertex {i}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() < props.len() {
            return Err(format!("vertex {i} has {} values", vals.len()));
        }
        points.push(Vec3::new(vals[ix] as f64, vals[iy] as f64, vals[iz] as f64));
    }
    Ok(points)
}

/// Marks every `ceil(1 / fraction)`-th frame as holdout, starting at an
/// interior offset drawn from `seed`.
pub fn split_frames(mut scene: Scene, holdout_fraction: f64, seed: u64) -> Result<Scene> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must be in [0, 1), got {holdout_fraction}"
        )));
    }
    for f in &mut scene.frames {
        f.holdout = false;
    }
    if holdout_fraction > 0.0 {
        let stride = (1.0 / holdout_fraction).ceil() as usize;
        let offset = if stride >= 2 {
            use rand::Rng;
            1 + ChaCha8Rng::seed_from_u64(seed).gen_range(0..stride - 1)
        } else {
            0
        };
        for (i, f) in scene.frames.iter_mut().enumerate() {
            f.holdout = i >= offset && (i - offset) % stride == 0;
        }
    }
    if scene.train_indices().is_empty() {
        return Err(Error::InvalidArgument(
            "holdout split leaves no training frames".into(),
        ));
    }
    Ok(scene)
}

/// Every numeric knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(rename = "K_closest")]
    pub k_closest: usize,
    #[serde(rename = "N_sample_points")]
    pub n_sample_points: usize,
    pub feature_dim: usize,
    pub n_heads: usize,
    pub pe_bands: usize,
    pub d_inf_percentile: f64,
    pub ray_batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
    pub projection_resolution: usize,
    pub seed: u64,
    pub encoder_channels: usize,
    pub kv_hidden: usize,
    pub lf_width: usize,
    pub lf_layers: usize,
    pub frames_per_step: usize,
    pub aggregation: AggregationMode,
    pub holdout_fraction: f64,
    pub cloud_time_jitter: usize,
    pub checkpoint_every: u64,
    pub render_chunk: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_closest: 8,
            n_sample_points: 20000,
            feature_dim: 128,
            n_heads: 8,
            pe_bands: 4,
            d_inf_percentile: 1.0,
            ray_batch: 8192,
            lr_start: 5e-4,
            lr_end: 5e-5,
            total_steps: 50_000,
            projection_resolution: 128,
            seed: 0,
            encoder_channels: 64,
            kv_hidden: 256,
            lf_width: 256,
            lf_layers: 8,
            frames_per_step: 4,
            aggregation: AggregationMode::Attention,
            holdout_fraction: 0.1,
            cloud_time_jitter: 1,
            checkpoint_every: 1000,
            render_chunk: 1024,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("N_sample_points", self.n_sample_points),
            ("feature_dim", self.feature_dim),
            ("n_heads", self.n_heads),
            ("pe_bands", self.pe_bands),
            ("ray_batch", self.ray_batch),
            ("projection_resolution", self.projection_resolution),
            ("encoder_channels", self.encoder_channels),
            ("kv_hidden", self.kv_hidden),
            ("lf_width", self.lf_width),
            ("lf_layers", self.lf_layers),
            ("frames_per_step", self.frames_per_step),
            ("render_chunk", self.render_chunk),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.feature_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} is not divisible by n_heads {}",
                self.feature_dim, self.n_heads
            )));
        }
        if self.projection_resolution < 4 || self.projection_resolution % 4 != 0 {
            return Err(Error::Config(
                "projection_resolution must be a positive multiple of 4".into(),
            ));
        }
        if self.lf_layers < 2 {
            return Err(Error::Config("lf_layers must be at least 2".into()));
        }
        if !(self.d_inf_percentile > 0.0 && self.d_inf_percentile <= 100.0) {
            return Err(Error::Config("d_inf_percentile must be in (0, 100]".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.total_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "total_steps and checkpoint_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
