//! Procedural street-like scenes made of axis-aligned primitives, a ray-cast
//! ground-truth renderer and a simulated lidar.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::generate_rays;
use crate::linalg::{Mat3, Rigid, Vec3};
use crate::scene_io::{save_scene, CameraView, Frame, ImageRgb, Intrinsics, PointCloud, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Corridor,
    Curve,
    Intersection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Material {
    Solid { color: [f64; 3] },
    /// Alternating squares of side `period` in the surface's own
    /// coordinates.
    Checker { a: [f64; 3], b: [f64; 3], period: f64 },
}

impl Material {
    /// Color at in-plane coordinates `(s, t)`.
    pub fn color_at(&self, s: f64, t: f64) -> [f64; 3] {
        match *self {
            Material::Solid { color } => color,
            Material::Checker { a, b, period } => {
                let parity = (s / period).floor() as i64 + (t / period).floor() as i64;
                if parity.rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        min: [f64; 3],
        max: [f64; 3],
        material: Material,
    },
    /// Rectangle at `coord[axis] == offset`, spanning `min..max` along the
    /// in-plane axes `(axis + 1) % 3` and `(axis + 2) % 3`.
    Rect {
        axis: usize,
        offset: f64,
        min: [f64; 2],
        max: [f64; 2],
        material: Material,
    },
}

/// Piecewise-linear yaw keyframe (degrees; 0 looks down +Z, +90 down +X).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YawKey {
    pub frame: usize,
    pub yaw_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub frames: usize,
    pub forward_step: f64,
    /// Start position on the ground plane, `[x, z]`.
    pub start: [f64; 2],
    pub yaw_profile: Vec<YawKey>,
    pub camera_height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub layout: Layout,
    /// Length of the street blocks in meters.
    pub extent: f64,
    /// Overrides the layout's geometry when present.
    #[serde(default)]
    pub primitives: Option<Vec<Primitive>>,
    pub trajectory: Trajectory,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub points_per_frame: usize,
    pub noise_sigma: f64,
    pub lidar_max_height: f64,
    pub lidar_range: f64,
    pub sky_color: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    /// 40 frames at 80x60 with 5000 points per frame.
    pub fn preset(layout: Layout) -> Self {
        let yaw_profile = match layout {
            Layout::Corridor => vec![YawKey { frame: 0, yaw_deg: 0.0 }],
            Layout::Curve => vec![
                YawKey { frame: 0, yaw_deg: 0.0 },
                YawKey { frame: 12, yaw_deg: 0.0 },
                YawKey { frame: 27, yaw_deg: 90.0 },
            ],
            Layout::Intersection => vec![
                YawKey { frame: 0, yaw_deg: -4.0 },
                YawKey { frame: 20, yaw_deg: 4.0 },
                YawKey { frame: 39, yaw_deg: -4.0 },
            ],
        };
        Self {
            layout,
            extent: 40.0,
            primitives: None,
            trajectory: Trajectory {
                frames: 40,
                forward_step: 0.5,
                start: [0.0, 0.0],
                yaw_profile,
                camera_height: 1.5,
            },
            width: 80,
            height: 60,
            focal: 60.0,
            points_per_frame: 5000,
            noise_sigma: 0.01,
            lidar_max_height: 3.0,
            lidar_range: 30.0,
            sky_color: [0.55, 0.75, 0.95],
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trajectory;
        if t.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("frames and image size must be positive".into()));
        }
        if self.points_per_frame < 100 {
            return Err(Error::Config("points_per_frame must be at least 100".into()));
        }
        let positive = [
            ("extent", self.extent),
            ("focal", self.focal),
            ("lidar_range", self.lidar_range),
            ("lidar_max_height", self.lidar_max_height),
            ("camera_height", t.camera_height),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(t.forward_step >= 0.0 && t.forward_step.is_finite()) {
            return Err(Error::Config("forward_step must be non-negative".into()));
        }
        if t.yaw_profile.is_empty() {
            return Err(Error::Config("yaw_profile needs at least one key".into()));
        }
        if t.yaw_profile.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(Error::Config("yaw keys must have increasing frames".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
        )
    }

    pub fn primitives(&self) -> Vec<Primitive> {
        match &self.primitives {
            Some(p) => p.clone(),
            None => layout_primitives(self.layout, self.extent),
        }
    }

    /// Ground-plane rectangles `[x0, z0, x1, z1]` the camera may occupy.
    pub fn free_regions(&self) -> Vec<[f64; 4]> {
        let e = self.extent;
        match self.layout {
            Layout::Corridor => vec![[-ROAD_HALF, -5.0, ROAD_HALF, e + 5.0]],
            Layout::Curve => vec![
                [-ROAD_HALF, -5.0, ROAD_HALF, CURVE_Z + 2.0 * ROAD_HALF],
                [-ROAD_HALF, CURVE_Z, e, CURVE_Z + 2.0 * ROAD_HALF],
            ],
            Layout::Intersection => vec![
                [-ROAD_HALF, -5.0, ROAD_HALF, e + 5.0],
                [-e / 2.0, CROSS_Z - ROAD_HALF, e / 2.0, CROSS_Z + ROAD_HALF],
            ],
        }
    }

    fn yaw_at(&self, frame: usize) -> f64 {
        let keys = &self.trajectory.yaw_profile;
        let deg = if frame <= keys[0].frame {
            keys[0].yaw_deg
        } else if let Some(w) = keys.windows(2).find(|w| frame <= w[1].frame) {
            let t = (frame - w[0].frame) as f64 / (w[1].frame - w[0].frame) as f64;
            w[0].yaw_deg + (w[1].yaw_deg - w[0].yaw_deg) * t
        } else {
            keys[keys.len() - 1].yaw_deg
        };
        deg.to_radians()
    }

    /// Camera-to-world poses along the trajectory. Each step moves forward
    /// along the current heading, then turns.
    pub fn poses(&self) -> Result<Vec<Rigid>> {
        let t = &self.trajectory;
        let regions = self.free_regions();
        let mut pos = [t.start[0], t.start[1]];
        let mut out = Vec::with_capacity(t.frames);
        for i in 0..t.frames {
            let yaw = self.yaw_at(i);
            if i > 0 {
                let prev = self.yaw_at(i - 1);
                pos[0] += t.forward_step * prev.sin();
                pos[1] += t.forward_step * prev.cos();
            }
            let inside = regions.iter().any(|r| {
                pos[0] >= r[0] + CAMERA_MARGIN
                    && pos[0] <= r[2] - CAMERA_MARGIN
                    && pos[1] >= r[1] + CAMERA_MARGIN
                    && pos[1] <= r[3] - CAMERA_MARGIN
            });
            if !inside {
                return Err(Error::TrajectoryOutsideLayout(format!(
                    "frame {i} at x={:.3}, z={:.3} leaves the {:?} layout",
                    pos[0], pos[1], self.layout
                )));
            }
            out.push(Rigid::new(
                Mat3::rotation_y(yaw).mul_mat(&CAMERA_TO_BODY),
                Vec3::new(pos[0], t.camera_height, pos[1]),
            ));
        }
        Ok(out)
    }
}

const ROAD_HALF: f64 = 4.0;
const CURVE_Z: f64 = 8.0;
const CROSS_Z: f64 = 20.0;
const CAMERA_MARGIN: f64 = 0.3;
const WALL_HEIGHT: f64 = 7.0;
const SURFACE_EPS: f64 = 1e-9;

/// Camera axes (x right, y down, z forward) expressed in a Y-up body frame
/// looking down +Z.
pub const CAMERA_TO_BODY: Mat3 = Mat3([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);

const FACADES: [[f64; 3]; 6] = [
    [0.80, 0.30, 0.25],
    [0.85, 0.75, 0.45],
    [0.35, 0.55, 0.70],
    [0.60, 0.60, 0.55],
    [0.45, 0.65, 0.35],
    [0.75, 0.50, 0.70],
];

fn solid(color: [f64; 3]) -> Material {
    Material::Solid { color }
}

fn road() -> Material {
    Material::Checker {
        a: [0.30, 0.30, 0.32],
        b: [0.42, 0.42, 0.44],
        period: 2.0,
    }
}

fn facade(i: usize) -> Material {
    if i % 3 == 2 {
        Material::Checker {
            a: FACADES[i % FACADES.len()],
            b: [0.15, 0.18, 0.25],
            period: 1.5,
        }
    } else {
        solid(FACADES[i % FACADES.len()])
    }
}

/// Facade segments of length ~8 m along a wall at `x = x0` (thickness
/// towards `outward`) from `z0` to `z1`.
fn wall_x(out: &mut Vec<Primitive>, x0: f64, outward: f64, z0: f64, z1: f64, salt: usize) {
    let n = ((z1 - z0) / 8.0).ceil().max(1.0) as usize;
    let len = (z1 - z0) / n as f64;
    for i in 0..n {
        let (xa, xb) = if outward > 0.0 { (x0, x0 + 0.5) } else { (x0 - 0.5, x0) };
        out.push(Primitive::Box {
            min: [xa, 0.0, z0 + i as f64 * len],
            max: [xb, WALL_HEIGHT - (i + salt) as f64 % 3.0, z0 + (i + 1) as f64 * len],
            material: facade(i + salt),
        });
    }
}

fn wall_z(out: &mut Vec<Primitive>, z0: f64, outward: f64, x0: f64, x1: f64, salt: usize) {
    let n = ((x1 - x0) / 8.0).ceil().max(1.0) as usize;
    let len = (x1 - x0) / n as f64;
    for i in 0..n {
        let (za, zb) = if outward > 0.0 { (z0, z0 + 0.5) } else { (z0 - 0.5, z0) };
        out.push(Primitive::Box {
            min: [x0 + i as f64 * len, 0.0, za],
            max: [x0 + (i + 1) as f64 * len, WALL_HEIGHT - (i + salt) as f64 % 3.0, zb],
            material: facade(i + salt),
        });
    }
}

fn ground(x0: f64, z0: f64, x1: f64, z1: f64) -> Primitive {
    // In-plane axes of a Y-normal rect are (z, x).
    Primitive::Rect {
        axis: 1,
        offset: 0.0,
        min: [z0, x0],
        max: [z1, x1],
        material: road(),
    }
}

fn car(x: f64, z: f64, color: [f64; 3]) -> Primitive {
    Primitive::Box {
        min: [x - 0.9, 0.0, z - 2.0],
        max: [x + 0.9, 1.4, z + 2.0],
        material: solid(color),
    }
}

pub fn layout_primitives(layout: Layout, extent: f64) -> Vec<Primitive> {
    let e = extent;
    let r = ROAD_HALF;
    let mut p = Vec::new();
    match layout {
        Layout::Corridor => {
            p.push(ground(-r, -5.0, r, e + 5.0));
            wall_x(&mut p, r, 1.0, -5.0, e + 5.0, 0);
            wall_x(&mut p, -r, -1.0, -5.0, e + 5.0, 3);
            wall_z(&mut p, e + 5.0, 1.0, -r, r, 1);
            p.push(car(2.6, 9.0, [0.9, 0.9, 0.2]));
            p.push(car(-2.6, 16.0, [0.2, 0.3, 0.8]));
            p.push(car(2.6, 24.0, [0.9, 0.9, 0.9]));
        }
        Layout::Curve => {
            let z1 = CURVE_Z + 2.0 * r;
            p.push(ground(-r, -5.0, r, z1));
            p.push(ground(r, CURVE_Z, e, z1));
            wall_x(&mut p, -r, -1.0, -5.0, z1, 0);
            wall_x(&mut p, r, 1.0, -5.0, CURVE_Z, 2);
            wall_z(&mut p, z1, 1.0, -r, e, 4);
            wall_z(&mut p, CURVE_Z, -1.0, r, e, 1);
            wall_x(&mut p, e, 1.0, CURVE_Z, z1, 5);
            p.push(car(-2.6, 3.0, [0.9, 0.9, 0.2]));
            p.push(Primitive::Box {
                min: [14.0, 0.0, z1 - 2.5],
                max: [18.0, 1.4, z1 - 0.7],
                material: solid([0.2, 0.3, 0.8]),
            });
        }
        Layout::Intersection => {
            let (c0, c1) = (CROSS_Z - r, CROSS_Z + r);
            p.push(ground(-r, -5.0, r, e + 5.0));
            p.push(ground(-e / 2.0, c0, -r, c1));
            p.push(ground(r, c0, e / 2.0, c1));
            wall_x(&mut p, r, 1.0, -5.0, c0, 0);
            wall_x(&mut p, -r, -1.0, -5.0, c0, 1);
            wall_x(&mut p, r, 1.0, c1, e + 5.0, 2);
            wall_x(&mut p, -r, -1.0, c1, e + 5.0, 3);
            wall_z(&mut p, c0, -1.0, r, e / 2.0, 4);
            wall_z(&mut p, c0, -1.0, -e / 2.0, -r, 5);
            wall_z(&mut p, c1, 1.0, r, e / 2.0, 0);
            wall_z(&mut p, c1, 1.0, -e / 2.0, -r, 1);
            wall_x(&mut p, e / 2.0, 1.0, c0, c1, 2);
            wall_x(&mut p, -e / 2.0, -1.0, c0, c1, 3);
            wall_z(&mut p, e + 5.0, 1.0, -r, r, 4);
            p.push(car(2.6, 8.0, [0.9, 0.9, 0.2]));
            p.push(car(-2.6, 30.0, [0.2, 0.3, 0.8]));
        }
    }
    p
}

/// Nearest intersection of a ray with one primitive: distance and color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub color: [f64; 3],
    pub primitive: usize,
}

fn in_plane(axis: usize, p: Vec3) -> (f64, f64) {
    (p.axis((axis + 1) % 3), p.axis((axis + 2) % 3))
}

fn intersect_plane_rect(
    origin: Vec3,
    dir: Vec3,
    axis: usize,
    offset: f64,
    min: [f64; 2],
    max: [f64; 2],
) -> Option<f64> {
    let d = dir.axis(axis);
    if d == 0.0 {
        return None;
    }
    let t = (offset - origin.axis(axis)) / d;
    if t <= SURFACE_EPS {
        return None;
    }
    let (s, u) = in_plane(axis, origin + dir * t);
    (s >= min[0] && s <= max[0] && u >= min[1] && u <= max[1]).then_some(t)
}

impl Primitive {
    /// Distance along `dir` to the first surface crossing and the color
    /// there.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, [f64; 3])> {
        match *self {
            Primitive::Rect {
                axis,
                offset,
                min,
                max,
                material,
            } => intersect_plane_rect(origin, dir, axis, offset, min, max).map(|t| {
                let (s, u) = in_plane(axis, origin + dir * t);
                (t, material.color_at(s, u))
            }),
            Primitive::Box { min, max, material } => {
                let mut best: Option<(f64, usize)> = None;
                for axis in 0..3 {
                    let a1 = (axis + 1) % 3;
                    let a2 = (axis + 2) % 3;
                    for offset in [min[axis], max[axis]] {
                        if let Some(t) = intersect_plane_rect(
                            origin,
                            dir,
                            axis,
                            offset,
                            [min[a1], min[a2]],
                            [max[a1], max[a2]],
                        ) {
                            if best.map_or(true, |b| t < b.0) {
                                best = Some((t, axis));
                            }
                        }
                    }
                }
                best.map(|(t, axis)| {
                    let (s, u) = in_plane(axis, origin + dir * t);
                    (t, material.color_at(s, u))
                })
            }
        }
    }

    /// The primitive's surface as axis-aligned rectangles.
    pub fn faces(&self) -> Vec<(usize, f64, [f64; 2], [f64; 2], Material)> {
        match *self {
            Primitive::Rect {
                axis,
                offset,
                min,
                max,
                material,
            } => vec![(axis, offset, min, max, material)],
            Primitive::Box { min, max, material } => {
                let mut out = Vec::with_capacity(6);
                for axis in 0..3 {
                    let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                    for offset in [min[axis], max[axis]] {
                        out.push((axis, offset, [min[a1], min[a2]], [max[a1], max[a2]], material));
                    }
                }
                out
            }
        }
    }

    /// Distance from `p` to the primitive's surface.
    pub fn surface_distance(&self, p: Vec3) -> f64 {
        self.faces()
            .iter()
            .map(|&(axis, offset, min, max, _)| {
                let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut q = [0.0; 3];
                q[axis] = offset;
                q[a1] = p.axis(a1).clamp(min[0], max[0]);
                q[a2] = p.axis(a2).clamp(min[1], max[1]);
                (p - Vec3::from_array(q)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn cast(primitives: &[Primitive], origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some((t, color)) = p.intersect(origin, dir) {
            if best.map_or(true, |b| t < b.t) {
                best = Some(Hit {
                    t,
                    color,
                    primitive: i,
                });
            }
        }
    }
    best
}

/// One ray through every pixel center; misses take the sky color.
pub fn render_oracle(spec: &SceneSpec, camera: &CameraView) -> Result<ImageRgb> {
    render_primitives(&spec.primitives(), spec.sky_color, camera)
}

pub fn render_primitives(
    primitives: &[Primitive],
    sky: [f64; 3],
    camera: &CameraView,
) -> Result<ImageRgb> {
    let mut img = ImageRgb::new(camera.width, camera.height);
    for ray in generate_rays(camera, None)? {
        let c = cast(primitives, ray.origin, ray.direction).map_or(sky, |h| h.color);
        img.set_pixel(ray.pixel.0, ray.pixel.1, c);
    }
    Ok(img)
}

/// Surface rectangle clipped to the lidar's reach.
struct Patch {
    axis: usize,
    offset: f64,
    min: [f64; 2],
    max: [f64; 2],
}

fn lidar_patches(primitives: &[Primitive], sensor: Vec3, range: f64, max_height: f64) -> Vec<Patch> {
    let mut out = Vec::new();
    for p in primitives {
        for (axis, offset, mut min, mut max, _) in p.faces() {
            let mut ok = true;
            for (slot, a) in [(0, (axis + 1) % 3), (1, (axis + 2) % 3)] {
                let mut hi = sensor.axis(a) + range;
                if a == 1 {
                    hi = hi.min(max_height);
                }
                min[slot] = min[slot].max(sensor.axis(a) - range);
                max[slot] = max[slot].min(hi);
                ok &= max[slot] > min[slot];
            }
            if axis == 1 && offset > max_height {
                ok = false;
            }
            if (offset - sensor.axis(axis)).abs() > range {
                ok = false;
            }
            if ok {
                out.push(Patch {
                    axis,
                    offset,
                    min,
                    max,
                });
            }
        }
    }
    out
}

fn truncated_noise<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::ZERO;
    }
    loop {
        let n = Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * sigma;
        if n.norm() <= 3.0 * sigma {
            return n;
        }
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Round-trips a point through 32-bit storage.
fn f32_round(p: Vec3) -> Vec3 {
    Vec3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

/// Lidar sweep from the camera center: points drawn uniformly by area over
/// surfaces below the height cutoff and within range, kept when visible
/// from the sensor. Returned in the sensor's local frame, rounded to `f32`.
pub fn sample_lidar<R: Rng>(
    spec: &SceneSpec,
    primitives: &[Primitive],
    pose: &Rigid,
    rng: &mut R,
) -> Result<Vec<Vec3>> {
    let sensor = pose.translation;
    let patches = lidar_patches(primitives, sensor, spec.lidar_range, spec.lidar_max_height);
    let areas: Vec<f64> = patches
        .iter()
        .map(|p| (p.max[0] - p.min[0]) * (p.max[1] - p.min[1]))
        .collect();
    let pick = WeightedIndex::new(&areas)
        .map_err(|e| Error::Config(format!("no surface within lidar reach: {e}")))?;
    let to_local = pose.inverse();
    let want = spec.points_per_frame;
    let mut out = Vec::with_capacity(want);
    let max_attempts = want * 400;
    let mut attempts = 0;
    while out.len() < want {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "lidar found only {} of {want} visible points",
                out.len()
            )));
        }
        let patch = &patches[pick.sample(rng)];
        let s = rng.gen_range(patch.min[0]..=patch.max[0]);
        let u = rng.gen_range(patch.min[1]..=patch.max[1]);
        let mut q = [0.0; 3];
        q[patch.axis] = patch.offset;
        q[(patch.axis + 1) % 3] = s;
        q[(patch.axis + 2) % 3] = u;
        let surface = Vec3::from_array(q);
        let offset = surface - sensor;
        let dist = offset.norm();
        if dist > spec.lidar_range || dist < 1e-6 {
            continue;
        }
        let dir = offset * (1.0 / dist);
        match cast(primitives, sensor, dir) {
            Some(h) if h.t >= dist - 1e-6 * dist.max(1.0) => {}
            _ => continue,
        }
        // The stored value must stay within 3 sigma of the surface after
        // the f32 rounding, so the bound is checked on the stored point.
        let local = loop {
            let candidate = f32_round(to_local.apply_point(surface + truncated_noise(rng, spec.noise_sigma)));
            let back = pose.apply_point(candidate);
            if (back - surface).norm() <= 3.0 * spec.noise_sigma + 1e-9 || spec.noise_sigma == 0.0 {
                break candidate;
            }
        };
        out.push(local);
    }
    Ok(out)
}

/// Builds the full scene in memory: oracle images (8-bit quantized) and
/// lidar clouds.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let primitives = spec.primitives();
    let poses = spec.poses()?;
    let intrinsics = spec.intrinsics();
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.into_iter().enumerate() {
        let camera = CameraView {
            intrinsics,
            cam_to_world: pose,
            width: spec.width,
            height: spec.height,
            frame_index: i,
        };
        let image = render_primitives(&primitives, spec.sky_color, &camera)?.quantized();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let points = sample_lidar(spec, &primitives, &pose, &mut rng)?;
        frames.push(Frame {
            camera,
            image,
            cloud: PointCloud {
                points,
                frame_index: i,
                local_to_world: pose,
            },
            holdout: false,
        });
    }
    let scene = Scene { frames };
    scene.validate()?;
    Ok(scene)
}

/// Generates the scene and writes it as a scene directory.
pub fn write_scene(spec: &SceneSpec, dir: &Path) -> Result<Scene> {
    let scene = generate_scene(spec)?;
    save_scene(&scene, dir)?;
    Ok(scene)
}
