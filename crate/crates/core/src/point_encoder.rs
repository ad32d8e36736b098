//! Per-point features from six orthographic depth images of the normalized
//! cloud.
//!
//! The cloud is mapped isotropically into `[-1, 1]^3`, splatted onto the six
//! cube faces as sparse depth images, pushed through a residual stem shared by
//! all views, and each point reads back its feature from the quarter
//! resolution maps of all six views.

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dShape, GridSample, Var};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::nn::{uniform, ParamStore, Session};
use crate::scene_io::PointCloud;
use crate::tensor::Tensor;

pub const VIEWS: usize = 6;
const CLAMP_SLACK: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;

/// Isotropic map `p -> (p - center) * scale` into the canonical cube.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormTransform {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, q: Vec3) -> Vec3 {
        q * (1.0 / self.scale) + self.center
    }
}

pub fn normalize_cloud(points: &[Vec3]) -> Result<(Vec<Vec3>, NormTransform)> {
    if points.len() < 2 {
        return Err(Error::DegenerateCloud(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let half = (hi - lo) * 0.5;
    let max_half = half.x.max(half.y).max(half.z);
    if !(max_half > 0.0) || !max_half.is_finite() {
        return Err(Error::DegenerateCloud("all points coincide".into()));
    }
    let t = NormTransform {
        center: (lo + hi) * 0.5,
        scale: 1.0 / max_half,
    };
    Ok((points.iter().map(|p| t.apply(*p)).collect(), t))
}

/// Face `f` looks along axis `f / 2`; even faces sit at `+1`, odd at `-1`.
/// Returns (depth axis, image x axis, image y axis, sign).
pub fn face_axes(face: usize) -> (usize, usize, usize, f64) {
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    (axis, (axis + 1) % 3, (axis + 2) % 3, sign)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeProjection {
    pub resolution: usize,
    /// `[6, R, R]` depth from each face in `[0, 2]`; 0 marks an empty pixel.
    pub depth: Vec<f64>,
    /// Continuous `(x, y)` image coordinates of every point on every face,
    /// in `[0, R]`.
    pub coords: Vec<[(f64, f64); VIEWS]>,
}

impl CubeProjection {
    pub fn depth_at(&self, face: usize, x: usize, y: usize) -> f64 {
        let r = self.resolution;
        self.depth[(face * r + y) * r + x]
    }

    pub fn as_tensor(&self) -> Tensor {
        let r = self.resolution;
        Tensor::from_vec(&[VIEWS, 1, r, r], self.depth.clone())
    }
}

fn to_pixel(c: f64, r: usize) -> usize {
    (c.floor().max(0.0) as usize).min(r - 1)
}

pub fn project_to_planes(points: &[Vec3], resolution: usize) -> Result<CubeProjection> {
    if resolution < 4 {
        return Err(Error::InvalidArgument(format!(
            "projection resolution must be >= 4, got {resolution}"
        )));
    }
    let r = resolution;
    let rf = r as f64;
    let mut depth = vec![f64::INFINITY; VIEWS * r * r];
    let mut coords = Vec::with_capacity(points.len());
    let mut clamped = 0usize;
    for p in points {
        let mut q = p.to_array();
        for c in &mut q {
            if c.abs() > 1.0 {
                if c.abs() <= 1.0 + CLAMP_SLACK {
                    *c = c.clamp(-1.0, 1.0);
                    clamped += 1;
                } else {
                    return Err(Error::InvalidArgument(format!(
                        "point {p:?} lies outside the canonical cube"
                    )));
                }
            }
        }
        let mut pc = [(0.0, 0.0); VIEWS];
        for (face, slot) in pc.iter_mut().enumerate() {
            let (a, bx, by, sign) = face_axes(face);
            let u = (q[bx] + 1.0) * 0.5 * rf;
            let v = (q[by] + 1.0) * 0.5 * rf;
            *slot = (u, v);
            let d = 1.0 - sign * q[a];
            let cell = &mut depth[(face * r + to_pixel(v, r)) * r + to_pixel(u, r)];
            *cell = cell.min(d);
        }
        coords.push(pc);
    }
    if clamped > 0 {
        warn!("clamped {clamped} coordinates onto the canonical cube");
    }
    for d in &mut depth {
        if d.is_infinite() {
            *d = 0.0;
        }
    }
    Ok(CubeProjection {
        resolution,
        depth,
        coords,
    })
}

/// Names and shapes of the convolutional stem: a 7x7 stride-2 convolution,
/// normalization, 3x3 stride-2 max pooling, one basic residual block and a
/// 1x1 projection to `feature_dim` channels.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub channels: usize,
    pub feature_dim: usize,
}

impl PointEncoder {
    pub fn new(channels: usize, feature_dim: usize) -> Self {
        Self {
            channels,
            feature_dim,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let c = self.channels;
        let conv = |store: &mut ParamStore, rng: &mut R, name: &str, shape: [usize; 4]| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            store.insert(name, uniform(&shape, 1.0 / fan_in.sqrt(), rng));
        };
        conv(store, rng, "encoder.stem.weight", [c, 1, 7, 7]);
        conv(store, rng, "encoder.block.conv1.weight", [c, c, 3, 3]);
        conv(store, rng, "encoder.block.conv2.weight", [c, c, 3, 3]);
        conv(store, rng, "encoder.proj.weight", [self.feature_dim, c, 1, 1]);
        store.insert(
            "encoder.proj.bias",
            uniform(&[self.feature_dim], 1.0 / (c as f64).sqrt(), rng),
        );
        for bn in ["stem_bn", "block.bn1", "block.bn2"] {
            store.insert(format!("encoder.{bn}.gamma"), Tensor::full(&[c], 1.0));
            store.insert(format!("encoder.{bn}.beta"), Tensor::zeros(&[c]));
        }
    }

    /// `[6, feature_dim, R/4, R/4]` feature maps. The six views form the
    /// normalization batch, so the output depends only on this projection.
    pub fn encode_views(&self, s: &mut Session<'_>, proj: &CubeProjection) -> Result<Var> {
        if proj.resolution % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "projection resolution {} is not divisible by 4",
                proj.resolution
            )));
        }
        let expect = |s: &Session<'_>, name: &str, shape: &[usize]| -> Result<()> {
            let got = s.store().expect(name).shape();
            if got != shape {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(())
        };
        let c = self.channels;
        expect(s, "encoder.stem.weight", &[c, 1, 7, 7])?;
        expect(s, "encoder.proj.weight", &[self.feature_dim, c, 1, 1])?;

        let x = s.constant(proj.as_tensor());
        let w = s.param("encoder.stem.weight");
        let x = s.tape.conv2d(x, w, Conv2dShape { stride: 2, pad: 3 });
        let x = self.norm(s, x, "stem_bn");
        let x = s.tape.relu(x);
        let x = s.tape.max_pool(x, 3, 2, 1);

        let w1 = s.param("encoder.block.conv1.weight");
        let y = s.tape.conv2d(x, w1, Conv2dShape { stride: 1, pad: 1 });
        let y = self.norm(s, y, "block.bn1");
        let y = s.tape.relu(y);
        let w2 = s.param("encoder.block.conv2.weight");
        let y = s.tape.conv2d(y, w2, Conv2dShape { stride: 1, pad: 1 });
        let y = self.norm(s, y, "block.bn2");
        let y = s.tape.add(x, y);
        let y = s.tape.relu(y);

        let wp = s.param("encoder.proj.weight");
        let bp = s.param("encoder.proj.bias");
        let y = s.tape.conv2d(y, wp, Conv2dShape { stride: 1, pad: 0 });
        Ok(s.tape.channel_bias(y, bp))
    }

    fn norm(&self, s: &mut Session<'_>, x: Var, name: &str) -> Var {
        let g = s.param(&format!("encoder.{name}.gamma"));
        let b = s.param(&format!("encoder.{name}.beta"));
        s.tape.batch_norm(x, g, b, BN_EPS)
    }
}

/// Feature-grid sample positions of one point on all six quarter-resolution
/// maps. Grid node `j` covers input pixels `4j..4j+4`, so its center is at
/// input coordinate `4j + 2`.
pub fn grid_samples(proj: &CubeProjection, point: usize) -> [GridSample; VIEWS] {
    let pc = &proj.coords[point];
    std::array::from_fn(|view| GridSample {
        view,
        x: pc[view].0 / 4.0 - 0.5,
        y: pc[view].1 / 4.0 - 0.5,
    })
}

/// `[points.len(), 6 * feature_dim]` features of the listed points,
/// concatenated view by view.
pub fn gather_point_features(
    s: &mut Session<'_>,
    proj: &CubeProjection,
    maps: Var,
    points: &[usize],
) -> Var {
    let samples: Vec<GridSample> = points
        .iter()
        .flat_map(|&p| grid_samples(proj, p))
        .collect();
    s.tape.bilinear_gather(maps, &samples, VIEWS)
}

/// Uniform subsample without replacement, keeping the original point order.
pub fn sample_cloud(cloud: &PointCloud, max_points: usize, seed: u64) -> PointCloud {
    if cloud.len() <= max_points {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, cloud.len(), max_points).into_vec();
    picked.sort_unstable();
    PointCloud {
        points: picked.iter().map(|&i| cloud.points[i]).collect(),
        frame_index: cloud.frame_index,
        local_to_world: cloud.local_to_world,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rigid;

    #[test]
    fn normalize_examples() {
        let pts = vec![Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)];
        let (n, t) = normalize_cloud(&pts).unwrap();
        assert_eq!(t.center, Vec3::ZERO);
        assert_eq!(t.scale, 1.0);
        assert_eq!(n, pts);

        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, 2.0, 4.0)];
        let (n, t) = normalize_cloud(&pts).unwrap();
        assert_eq!(t.center, Vec3::new(5.0, 1.0, 2.0));
        assert!((t.scale - 0.2).abs() < 1e-15);
        assert!((n[1] - Vec3::new(1.0, 0.2, 0.4)).norm() < 1e-15);
        assert!((t.invert(n[1]) - pts[1]).norm() < 1e-12);

        let same = vec![Vec3::new(3.0, 3.0, 3.0); 4];
        assert!(matches!(normalize_cloud(&same), Err(Error::DegenerateCloud(_))));
        assert!(normalize_cloud(&same[..1]).is_err());
    }

    #[test]
    fn origin_lands_on_center_pixel_at_unit_depth() {
        let proj = project_to_planes(&[Vec3::ZERO], 128).unwrap();
        for face in 0..VIEWS {
            assert_eq!(proj.depth_at(face, 64, 64), 1.0);
            assert_eq!(proj.coords[0][face], (64.0, 64.0));
        }
        let occupied = proj.depth.iter().filter(|d| **d != 0.0).count();
        assert_eq!(occupied, 6);
    }

    #[test]
    fn nearest_point_wins_a_pixel() {
        // Face 4 is +Z; depth = 1 - z.
        let pts = [Vec3::new(0.1, 0.1, 0.5), Vec3::new(0.1, 0.1, -0.5)];
        let proj = project_to_planes(&pts, 16).unwrap();
        let (u, v) = proj.coords[0][4];
        assert_eq!(proj.depth_at(4, u as usize, v as usize), 0.5);
        // The opposite face sees the other point first.
        assert_eq!(proj.depth_at(5, u as usize, v as usize), 0.5);
        let pts = [Vec3::new(0.1, 0.1, -0.5), Vec3::new(0.1, 0.1, 0.5)];
        let proj = project_to_planes(&pts, 16).unwrap();
        assert_eq!(proj.depth_at(4, u as usize, v as usize), 0.5);
    }

    #[test]
    fn projection_rejects_small_resolution_and_far_points() {
        assert!(project_to_planes(&[Vec3::ZERO], 3).is_err());
        assert!(project_to_planes(&[Vec3::new(1.1, 0.0, 0.0)], 8).is_err());
        let p = project_to_planes(&[Vec3::new(1.0 + 5e-7, 0.0, 0.0)], 8).unwrap();
        assert_eq!(p.coords[0][2].1, 8.0);
    }

    #[test]
    fn sample_cloud_examples() {
        let cloud = PointCloud {
            points: (0..30000).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect(),
            frame_index: 3,
            local_to_world: Rigid::IDENTITY,
        };
        let a = sample_cloud(&cloud, 20000, 9);
        assert_eq!(a.len(), 20000);
        assert_eq!(a, sample_cloud(&cloud, 20000, 9));
        assert_ne!(a, sample_cloud(&cloud, 20000, 10));
        let mut xs: Vec<f64> = a.points.iter().map(|p| p.x).collect();
        xs.dedup();
        assert_eq!(xs.len(), 20000);

        let small = PointCloud {
            points: cloud.points[..500].to_vec(),
            ..cloud.clone()
        };
        assert_eq!(sample_cloud(&small, 20000, 1), small);
    }
}
