//! Fixed-size vectors, rotations and rigid transforms.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn axis(self, a: usize) -> f64 {
        match a {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis {a} out of range"),
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_cols(a: Vec3, b: Vec3, c: Vec3) -> Self {
        Mat3([[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]])
    }

    /// Rotation about the world up axis.
    pub fn rotation_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// Rodrigues rotation about a unit axis.
    pub fn rotation(axis: Vec3, angle: f64) -> Self {
        let k = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Mat3([
            [
                c + k.x * k.x * t,
                k.x * k.y * t - k.z * s,
                k.x * k.z * t + k.y * s,
            ],
            [
                k.y * k.x * t + k.z * s,
                c + k.y * k.y * t,
                k.y * k.z * t - k.x * s,
            ],
            [
                k.z * k.x * t - k.y * s,
                k.z * k.y * t + k.x * s,
                c + k.z * k.z * t,
            ],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `max |R^T R - I|` over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul_mat(self);
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.0[i][j] - want).abs());
            }
        }
        worst
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Parses 16 row-major reals and checks that the block is a proper
    /// rotation with a `[0 0 0 1]` bottom row.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Validation(format!(
                "pose needs 16 values, got {}",
                m.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose has non-finite entries".into()));
        }
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Validation(
                "pose bottom row must be [0, 0, 0, 1]".into(),
            ));
        }
        let rotation = Mat3([
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        ]);
        let rigid = Self::new(rotation, Vec3::new(m[3], m[7], m[11]));
        rigid.validate()?;
        Ok(rigid)
    }

    pub fn validate(&self) -> Result<()> {
        let err = self.rotation.orthonormality_error();
        if !(err < 1e-6) {
            return Err(Error::Validation(format!(
                "rotation is not orthonormal (|R^T R - I| = {err:.3e})"
            )));
        }
        if self.rotation.det() < 0.0 {
            return Err(Error::Validation(
                "rotation has determinant -1 (reflection)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation.0;
        let t = self.translation;
        [
            r[0][0], r[0][1], r[0][2], t.x, r[1][0], r[1][1], r[1][2], t.y, r[2][0], r[2][1],
            r[2][2], t.z, 0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn apply_dir(&self, d: Vec3) -> Vec3 {
        self.rotation.mul_vec(d)
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid::new(rt, -rt.mul_vec(self.translation))
    }

    pub fn compose(&self, inner: &Rigid) -> Rigid {
        Rigid::new(
            self.rotation.mul_mat(&inner.rotation),
            self.apply_point(inner.translation),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_round_trip_and_inverse() {
        let r = Rigid::new(
            Mat3::rotation(Vec3::new(0.3, -1.0, 0.2), 0.7),
            Vec3::new(1.0, 2.0, -3.0),
        );
        let back = Rigid::from_row_major(&r.to_row_major()).unwrap();
        assert_eq!(back, r);
        let p = Vec3::new(0.5, -0.25, 4.0);
        let q = r.inverse().apply_point(r.apply_point(p));
        assert!((q - p).norm() < 1e-12);
    }

    #[test]
    fn reflection_is_rejected() {
        let mut m = Rigid::IDENTITY.to_row_major();
        m[0] = -1.0;
        let err = Rigid::from_row_major(&m).unwrap_err();
        assert!(err.to_string().contains("determinant"));
    }

    #[test]
    fn rotation_y_keeps_up_axis() {
        let r = Mat3::rotation_y(1.1);
        assert!((r.mul_vec(Vec3::Y) - Vec3::Y).norm() < 1e-15);
        assert!((r.mul_vec(Vec3::Z) - Vec3::new(1.1f64.sin(), 0.0, 1.1f64.cos())).norm() < 1e-15);
        let g = Mat3::rotation(Vec3::Y, 1.1);
        assert!((g.mul_vec(Vec3::Z) - r.mul_vec(Vec3::Z)).norm() < 1e-15);
    }
}
