//! Pinhole ray generation, ray/point geometry and the sinusoidal encoding.

use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scene_io::CameraView;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    pub pixel: (u32, u32),
    pub frame_index: usize,
}

/// Ray-centric coordinates of one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayPointGeometry {
    pub cos_phi: f64,
    pub distance: f64,
    pub theta: f64,
    pub psi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayAngles {
    pub theta: f64,
    pub psi: f64,
    /// Set when the ray was parallel to the up axis and X replaced Y.
    pub up_fallback: bool,
}

/// One ray through each requested pixel center, or through every pixel in
/// row-major order when `pixels` is `None`.
pub fn generate_rays(camera: &CameraView, pixels: Option<&[(u32, u32)]>) -> Result<Vec<Ray>> {
    let origin = camera.center();
    let make = |u: u32, v: u32| {
        let local = camera
            .intrinsics
            .unproject(u as f64 + 0.5, v as f64 + 0.5);
        Ray {
            origin,
            direction: camera.cam_to_world.apply_dir(local).normalized(),
            pixel: (u, v),
            frame_index: camera.frame_index,
        }
    };
    match pixels {
        Some(list) => list
            .iter()
            .map(|&(u, v)| {
                if u >= camera.width || v >= camera.height {
                    Err(Error::InvalidArgument(format!(
                        "pixel ({u}, {v}) outside {}x{} image",
                        camera.width, camera.height
                    )))
                } else {
                    Ok(make(u, v))
                }
            })
            .collect(),
        None => Ok((0..camera.height)
            .flat_map(|v| (0..camera.width).map(move |u| (u, v)))
            .map(|(u, v)| make(u, v))
            .collect()),
    }
}

/// Cosine of the angle between the ray and the point offset, and the
/// orthogonal point-to-line distance `sin(phi) * |x - o|`. A point at the
/// origin yields `(1, 0)`.
pub fn ray_point_distance(origin: Vec3, direction: Vec3, x: Vec3) -> (f64, f64) {
    let offset = x - origin;
    let len = offset.norm();
    if len == 0.0 {
        return (1.0, 0.0);
    }
    let cos_phi = (direction.dot(offset) / len).clamp(-1.0, 1.0);
    // |d x (x - o)| / |x - o| equals sqrt(1 - cos^2) for unit d without the
    // cancellation near cos = 1.
    let sin_phi = (direction.cross(offset).norm() / len).min(1.0);
    (cos_phi, sin_phi * len)
}

/// Polar angle of the world-space point direction against the ray and the
/// radial angle of the point in the plane spanned by the ray-orthogonal up
/// vector and its cross product with the ray.
pub fn ray_point_angles(direction: Vec3, x: Vec3) -> Result<RayAngles> {
    let len = x.norm();
    if len == 0.0 {
        return Err(Error::InvalidArgument(
            "point at the world origin has no direction".into(),
        ));
    }
    let theta = (direction.dot(x) / len).clamp(-1.0, 1.0).acos();
    let (up, up_fallback) = ray_up_axis(direction);
    let x_proj = up.dot(x);
    let y_proj = direction.cross(up).dot(x);
    Ok(RayAngles {
        theta,
        psi: half_open_atan2(x_proj, y_proj),
        up_fallback,
    })
}

// atan2 returns -pi for (-0, negative); fold onto +pi to keep (-pi, pi].
fn half_open_atan2(x_proj: f64, y_proj: f64) -> f64 {
    let psi = x_proj.atan2(y_proj);
    if psi == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        psi
    }
}

/// Unit component of world Y orthogonal to `direction`, or of world X when
/// the ray is (nearly) vertical.
pub fn ray_up_axis(direction: Vec3) -> (Vec3, bool) {
    let project = |axis: Vec3| axis - direction * axis.dot(direction);
    let up = project(Vec3::Y);
    let n = up.norm();
    if n < 1e-8 {
        (project(Vec3::X).normalized(), true)
    } else {
        (up * (1.0 / n), false)
    }
}

/// Full ray/point geometry; the distance uses `origin`/`x_local` (any frame
/// shared by both), the angles use world-space `direction`/`x_world`.
pub fn ray_point_geometry(
    origin_local: Vec3,
    direction_local: Vec3,
    x_local: Vec3,
    direction_world: Vec3,
    x_world: Vec3,
) -> RayPointGeometry {
    let (cos_phi, distance) = ray_point_distance(origin_local, direction_local, x_local);
    let (theta, psi) = match ray_point_angles(direction_world, x_world) {
        Ok(a) => (a.theta, a.psi),
        // A point exactly at the world origin has no direction; treat it as
        // lying on the ray axis.
        Err(_) => (0.0, 0.0),
    };
    RayPointGeometry {
        cos_phi,
        distance,
        theta,
        psi,
    }
}

/// Number of encoding values produced per scalar.
pub fn encoding_width(bands: usize) -> usize {
    2 * (bands + 1)
}

/// `[sin(2^t pi s), cos(2^t pi s)]` for `t = 0..=bands`, appended to `out`.
pub fn positional_encode_into(s: f64, bands: usize, out: &mut Vec<f64>) {
    let mut freq = std::f64::consts::PI;
    for _ in 0..=bands {
        let (sn, cs) = (freq * s).sin_cos();
        out.push(sn);
        out.push(cs);
        freq *= 2.0;
    }
}

pub fn positional_encode(s: f64, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoding_width(bands));
    positional_encode_into(s, bands, &mut out);
    out
}

/// Per-component encoding of a 3-vector, component-major.
pub fn positional_encode_vec3(v: Vec3, bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * encoding_width(bands));
    for s in v.to_array() {
        positional_encode_into(s, bands, &mut out);
    }
    out
}
