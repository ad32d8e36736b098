use nplf::geometry::{ray_point_angles, ray_point_distance};
use nplf::linalg::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_vec<R: Rng>(rng: &mut R, s: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

pub fn rand_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = rand_vec(rng, 1.0);
        let n = v.norm();
        if n > 0.1 && n < 1.0 {
            return v * (1.0 / n);
        }
    }
}

pub fn closest_point_distance(o: Vec3, d: Vec3, x: Vec3) -> f64 {
    let t = (x - o).dot(d);
    (x - (o + d * t)).norm()
}

/// psi through an explicitly built orthonormal frame (e1 = up component,
/// e2 = d x e1), independent of the library's projection code.
pub fn frame_psi(d: Vec3, x: Vec3) -> f64 {
    let mut up = Vec3::Y - d * d.y;
    if up.norm() < 1e-8 {
        up = Vec3::X - d * d.x;
    }
    let e1 = up.normalized();
    let e2 = Vec3::new(
        d.y * e1.z - d.z * e1.y,
        d.z * e1.x - d.x * e1.z,
        d.x * e1.y - d.y * e1.x,
    );
    let a = e1.x * x.x + e1.y * x.y + e1.z * x.z;
    let b = e2.x * x.x + e2.y * x.y + e2.z * x.z;
    let psi = a.atan2(b);
    if psi <= -std::f64::consts::PI {
        psi + 2.0 * std::f64::consts::PI
    } else {
        psi
    }
}

pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * std::f64::consts::PI);
    d.min(2.0 * std::f64::consts::PI - d)
}

/// Worst absolute errors against the oracles over `n` random instances:
/// `[distance, cos, theta, psi]`.
pub fn oracle_errors(n: usize, seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..n {
        let o = rand_vec(&mut rng, 20.0);
        let d = rand_unit(&mut rng);
        let x = rand_vec(&mut rng, 20.0);
        let (cos, dist) = ray_point_distance(o, d, x);
        worst[0] = worst[0].max((dist - closest_point_distance(o, d, x)).abs());
        worst[1] = worst[1].max((cos - d.dot(x - o) / (x - o).norm()).abs());
        let a = ray_point_angles(d, x).unwrap();
        let theta = (d.dot(x) / x.norm()).clamp(-1.0, 1.0).acos();
        worst[2] = worst[2].max((a.theta - theta).abs());
        worst[3] = worst[3].max(angle_diff(a.psi, frame_psi(d, x)));
        assert!(a.psi > -std::f64::consts::PI && a.psi <= std::f64::consts::PI);
        assert!((0.0..=std::f64::consts::PI).contains(&a.theta));
    }
    worst
}

/// Point on the ray, point at the origin and vertical rays.
pub fn degenerate_cases_hold() -> bool {
    let on_ray = ray_point_distance(Vec3::ZERO, Vec3::Z, Vec3::new(0.0, 0.0, 3.0)).1 == 0.0
        && ray_point_distance(Vec3::X, Vec3::Z, Vec3::X) == (1.0, 0.0);
    let vertical = [Vec3::Y, -Vec3::Y].into_iter().all(|d| {
        let x = Vec3::new(0.3, 2.0, -0.7);
        let a = ray_point_angles(d, x).unwrap();
        a.up_fallback && angle_diff(a.psi, frame_psi(d, x)) < 1e-12
    });
    on_ray && vertical && ray_point_angles(Vec3::Z, Vec3::ZERO).is_err()
}
