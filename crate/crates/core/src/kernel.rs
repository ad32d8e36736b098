//! Batched k-closest-points-to-ray query over flat 32-bit buffers.
//!
//! Only the reference backend lives in this crate. `NPLF_KERNEL=native`
//! selects an accelerated backend, which is reported as unavailable when it
//! has not been built.

use crate::error::{Error, Result};
use crate::geometry::{ray_point_distance, Ray};
use crate::linalg::Vec3;
use crate::ray_aggregation::{select_k_closest, TopK, FRUSTUM_MARGIN};
use crate::scene_io::{CameraView, PointCloud};

pub const KERNEL_ENV: &str = "NPLF_KERNEL";

pub const STATUS_OK: i32 = 0;
pub const STATUS_BAD_SHAPE: i32 = 1;
pub const STATUS_NON_FINITE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelBackend {
    Reference,
    Native,
}

impl KernelBackend {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::Reference),
            "native" => Ok(Self::Native),
            other => Err(Error::InvalidArgument(format!(
                "{KERNEL_ENV} must be 'reference' or 'native', got {other:?}"
            ))),
        }
    }

    /// Backend named by `NPLF_KERNEL`, defaulting to the reference.
    pub fn from_env() -> Result<Self> {
        match std::env::var(KERNEL_ENV) {
            Ok(v) if !v.is_empty() => Self::parse(&v),
            _ => Ok(Self::Reference),
        }
    }

    pub fn is_available(self) -> bool {
        self == Self::Reference
    }
}

/// Row-major `f32` inputs. Rays, points and the camera share one frame;
/// `world_to_cam` maps that frame to the camera (row-major 4x4).
#[derive(Clone, Copy, Debug)]
pub struct QueryBatch<'a> {
    pub origins: &'a [f32],
    pub directions: &'a [f32],
    pub points: &'a [f32],
    pub intrinsics: [f32; 9],
    pub world_to_cam: [f32; 16],
    pub width: u32,
    pub height: u32,
    pub k: usize,
}

impl QueryBatch<'_> {
    pub fn rays(&self) -> usize {
        self.origins.len() / 3
    }

    pub fn point_count(&self) -> usize {
        self.points.len() / 3
    }

    fn status(&self) -> i32 {
        let shape_ok = self.k > 0
            && self.origins.len() % 3 == 0
            && self.origins.len() == self.directions.len()
            && self.points.len() % 3 == 0
            && self.width > 0
            && self.height > 0;
        if !shape_ok {
            return STATUS_BAD_SHAPE;
        }
        let all_finite = [self.origins, self.directions, self.points]
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
            && self.intrinsics.iter().all(|v| v.is_finite())
            && self.world_to_cam.iter().all(|v| v.is_finite());
        if !all_finite {
            return STATUS_NON_FINITE;
        }
        STATUS_OK
    }
}

/// `R x K` outputs; `mask[r * k + s] == 0` marks padding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnnOutput {
    pub indices: Vec<u32>,
    pub distances: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Reference implementation of the batched query. Fills `out` and returns a
/// status code; non-zero codes leave `out` empty.
pub fn knn_rays(batch: &QueryBatch<'_>, out: &mut KnnOutput) -> i32 {
    *out = KnnOutput::default();
    let status = batch.status();
    if status == STATUS_OK {
        knn_reference(batch, out);
    }
    status
}

fn vec3(b: &[f32], i: usize) -> Vec3 {
    Vec3::new(b[3 * i] as f64, b[3 * i + 1] as f64, b[3 * i + 2] as f64)
}

fn knn_reference(batch: &QueryBatch<'_>, out: &mut KnnOutput) {
    let m = batch.world_to_cam.map(|v| v as f64);
    let kk = batch.intrinsics.map(|v| v as f64);
    let (w, h) = (batch.width as f64, batch.height as f64);
    let candidates: Vec<usize> = (0..batch.point_count())
        .filter(|&i| {
            let p = vec3(batch.points, i);
            let c = Vec3::new(
                m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
                m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
                m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11],
            );
            if c.z <= 0.0 {
                return false;
            }
            let u = (kk[0] * c.x + kk[1] * c.y) / c.z + kk[2];
            let v = kk[4] * c.y / c.z + kk[5];
            u >= -FRUSTUM_MARGIN * w
                && u <= (1.0 + FRUSTUM_MARGIN) * w
                && v >= -FRUSTUM_MARGIN * h
                && v <= (1.0 + FRUSTUM_MARGIN) * h
        })
        .collect();
    let k = batch.k;
    for r in 0..batch.rays() {
        let o = vec3(batch.origins, r);
        let d = vec3(batch.directions, r);
        let mut top = TopK::new(k);
        for &i in &candidates {
            top.offer(ray_point_distance(o, d, vec3(batch.points, i)).1, i);
        }
        let found = top.into_sorted();
        for s in 0..k {
            match (found.get(s), found.first()) {
                (Some(&(dist, i)), _) => {
                    out.indices.push(i as u32);
                    out.distances.push(dist as f32);
                    out.mask.push(1);
                }
                (None, Some(&(dist, i))) => {
                    out.indices.push(i as u32);
                    out.distances.push(dist as f32);
                    out.mask.push(0);
                }
                (None, None) => {
                    out.indices.push(0);
                    out.distances.push(f32::INFINITY);
                    out.mask.push(0);
                }
            }
        }
    }
}

/// Selection used by the model, dispatched on `backend`.
pub fn select(
    backend: KernelBackend,
    rays: &[Ray],
    cloud: &PointCloud,
    camera: &CameraView,
    k: usize,
) -> Result<Vec<crate::ray_aggregation::RaySelection>> {
    match backend {
        KernelBackend::Reference => select_k_closest(rays, cloud, camera, k),
        KernelBackend::Native => Err(Error::Incompatible(format!(
            "{KERNEL_ENV}=native requested but the native kernel is not built"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_batch<'a>(origins: &'a [f32], dirs: &'a [f32], points: &'a [f32], k: usize) -> QueryBatch<'a> {
        QueryBatch {
            origins,
            directions: dirs,
            points,
            intrinsics: [10.0, 0.0, 10.0, 0.0, 10.0, 10.0, 0.0, 0.0, 1.0],
            world_to_cam: [
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
            width: 20,
            height: 20,
            k,
        }
    }

    #[test]
    fn status_codes() {
        let o = [0.0f32; 3];
        let d = [0.0f32, 0.0, 1.0];
        let p = [0.1f32, 0.0, 5.0, 0.0, 0.3, 5.0];
        let mut out = KnnOutput::default();
        assert_eq!(knn_rays(&identity_batch(&o, &d, &p, 2), &mut out), 0);
        assert_eq!(out.indices, vec![0, 1]);
        assert_eq!(knn_rays(&identity_batch(&o, &d[..2], &p, 2), &mut out), 1);
        let bad = [f32::NAN, 0.0, 5.0];
        assert_eq!(knn_rays(&identity_batch(&o, &d, &bad, 2), &mut out), 2);
        assert!(out.indices.is_empty());
    }

    #[test]
    fn padding_is_masked() {
        let o = [0.0f32; 3];
        let d = [0.0f32, 0.0, 1.0];
        let p = [0.1f32, 0.0, 5.0, 0.0, 0.0, -5.0];
        let mut out = KnnOutput::default();
        knn_rays(&identity_batch(&o, &d, &p, 3), &mut out);
        assert_eq!(out.indices, vec![0, 0, 0]);
        assert_eq!(out.mask, vec![1, 0, 0]);
    }

    #[test]
    fn backend_names() {
        assert_eq!(KernelBackend::parse("reference").unwrap(), KernelBackend::Reference);
        assert_eq!(KernelBackend::parse("native").unwrap(), KernelBackend::Native);
        assert!(KernelBackend::parse("gpu").is_err());
        assert!(!KernelBackend::Native.is_available());
    }
}
