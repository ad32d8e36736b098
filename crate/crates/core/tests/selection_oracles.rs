use nplf::geometry::{generate_rays, Ray};
use nplf::kernel::{self, knn_rays, KernelBackend, KnnOutput, QueryBatch, STATUS_OK};
use nplf::linalg::{Mat3, Rigid, Vec3};
use nplf::ray_aggregation::{compute_d_inf, select_k_closest, D_INF_MAX_PAIRS};
use nplf::scene_io::{CameraView, Intrinsics, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rigid(rng: &mut ChaCha8Rng) -> Rigid {
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Rigid::new(
        Mat3::rotation(axis.normalized(), rng.gen_range(-3.0..3.0)),
        Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
    )
}

/// Camera and a cloud scattered around its viewing direction.
fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> (CameraView, PointCloud, Vec<Ray>) {
    let camera = CameraView {
        intrinsics: Intrinsics::new(30.0, 30.0, 20.0, 15.0),
        cam_to_world: random_rigid(rng),
        width: 40,
        height: 30,
        frame_index: 0,
    };
    let local_to_world = random_rigid(rng);
    let to_local = local_to_world.inverse();
    let points = (0..n)
        .map(|_| {
            let c = Vec3::new(rng.gen_range(-15.0..15.0), rng.gen_range(-12.0..12.0), rng.gen_range(-3.0..20.0));
            to_local.apply_point(camera.cam_to_world.apply_point(c))
        })
        .collect();
    let cloud = PointCloud {
        points,
        frame_index: 0,
        local_to_world,
    };
    let pixels: Vec<(u32, u32)> = (0..16).map(|_| (rng.gen_range(0..40), rng.gen_range(0..30))).collect();
    let rays = generate_rays(&camera, Some(&pixels)).unwrap();
    (camera, cloud, rays)
}

/// Full sort of every in-frustum point, distances in the cloud frame.
fn exhaustive(camera: &CameraView, cloud: &PointCloud, ray: &Ray, k: usize) -> Vec<(f64, usize)> {
    let world_to_cam = camera.cam_to_world.inverse();
    let to_local = cloud.local_to_world.inverse();
    let o = to_local.apply_point(ray.origin);
    let d = to_local.apply_dir(ray.direction);
    let mut all: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let c = world_to_cam.apply_point(cloud.local_to_world.apply_point(**p));
            let u = camera.intrinsics.fx * c.x / c.z + camera.intrinsics.cx;
            let v = camera.intrinsics.fy * c.y / c.z + camera.intrinsics.cy;
            c.z > 0.0 && (-2.0..=42.0).contains(&u) && (-1.5..=31.5).contains(&v)
        })
        .map(|(i, p)| {
            let t = (*p - o).dot(d);
            ((*p - (o + d * t)).norm(), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

#[test]
fn selection_equals_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..40 {
        let n = [3, 50, 800, 5000][trial % 4];
        let (camera, cloud, rays) = random_instance(&mut rng, n);
        for k in [1, 8] {
            let sel = select_k_closest(&rays, &cloud, &camera, k).unwrap();
            for (ray, s) in rays.iter().zip(&sel) {
                let want = exhaustive(&camera, &cloud, ray, k);
                if want.is_empty() {
                    assert!(s.beyond_cloud && s.indices.is_empty());
                    continue;
                }
                let live: Vec<usize> = s.indices.iter().zip(&s.live).filter(|(_, l)| **l).map(|(i, _)| *i).collect();
                assert_eq!(live, want.iter().map(|w| w.1).collect::<Vec<_>>());
                for (got, w) in s.distances.iter().zip(&want) {
                    assert!((got - w.0).abs() < 1e-9);
                }
                assert_eq!(s.indices.len(), k);
            }
        }
    }
}

#[test]
fn d_inf_examples() {
    let two = [Vec3::ZERO, Vec3::new(3.0, 4.0, 0.0)];
    assert_eq!(compute_d_inf(&two, 100.0, 0, D_INF_MAX_PAIRS).unwrap(), 5.0);
    assert!(compute_d_inf(&two[..1], 99.0, 0, D_INF_MAX_PAIRS).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cube: Vec<Vec3> = (0..1000)
        .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
        .collect();
    let mut max: f64 = 0.0;
    for i in 0..cube.len() {
        for j in 0..i {
            max = max.max((cube[i] - cube[j]).norm());
        }
    }
    assert_eq!(compute_d_inf(&cube, 100.0, 0, D_INF_MAX_PAIRS).unwrap(), max);

    // One far outlier among 300 points touches 299 of 44850 pairs.
    let mut with_outlier = cube[..299].to_vec();
    with_outlier.push(Vec3::new(1000.0, 0.0, 0.0));
    let d = compute_d_inf(&with_outlier, 99.0, 0, D_INF_MAX_PAIRS).unwrap();
    assert!(d <= 3f64.sqrt());
}

#[test]
fn sampled_d_inf_is_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Vec3> = (0..3000).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
    let a = compute_d_inf(&pts, 99.0, 7, D_INF_MAX_PAIRS).unwrap();
    assert_eq!(a, compute_d_inf(&pts, 99.0, 7, D_INF_MAX_PAIRS).unwrap());
    let exact = compute_d_inf(&pts, 99.0, 7, usize::MAX).unwrap();
    assert!((a - exact).abs() < 0.01);
}

fn flat(v: &[Vec3]) -> Vec<f32> {
    v.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect()
}

#[test]
fn kernel_query_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.gen_range(1..=5000);
        let (camera, cloud, rays) = random_instance(&mut rng, n);
        // The kernel works in one frame; express everything in world space.
        let world: Vec<Vec3> = cloud.world_points();
        let points = flat(&world);
        let origins = flat(&rays.iter().map(|r| r.origin).collect::<Vec<_>>());
        let directions = flat(&rays.iter().map(|r| r.direction).collect::<Vec<_>>());
        let w2c = camera.cam_to_world.inverse().to_row_major();
        let batch = QueryBatch {
            origins: &origins,
            directions: &directions,
            points: &points,
            intrinsics: camera.intrinsics.to_row_major().map(|v| v as f32),
            world_to_cam: w2c.map(|v| v as f32),
            width: camera.width,
            height: camera.height,
            k: 8,
        };
        let mut out = KnnOutput::default();
        assert_eq!(knn_rays(&batch, &mut out), STATUS_OK);
        assert_eq!(out.indices.len(), rays.len() * 8);
        // Oracle on the same rounded inputs.
        let f64s = |b: &[f32], i: usize| Vec3::new(b[3 * i] as f64, b[3 * i + 1] as f64, b[3 * i + 2] as f64);
        let cam32 = CameraView {
            intrinsics: Intrinsics::from_row_major(&batch.intrinsics.map(|v| v as f64)).unwrap(),
            cam_to_world: Rigid::IDENTITY,
            ..camera.clone()
        };
        let m = batch.world_to_cam.map(|v| v as f64);
        for r in 0..rays.len() {
            let o = f64s(&origins, r);
            let d = f64s(&directions, r);
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter_map(|i| {
                    let p = f64s(&points, i);
                    let c = Vec3::new(
                        m[0] * p.x + m[1] * p.y + m[2] * p.z + m[3],
                        m[4] * p.x + m[5] * p.y + m[6] * p.z + m[7],
                        m[8] * p.x + m[9] * p.y + m[10] * p.z + m[11],
                    );
                    let (u, v) = cam32.intrinsics.project(c);
                    let inside = c.z > 0.0 && (-2.0..=42.0).contains(&u) && (-1.5..=31.5).contains(&v);
                    inside.then(|| {
                        let t = (p - o).dot(d);
                        ((p - (o + d * t)).norm(), i)
                    })
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let row = r * 8..(r + 1) * 8;
            let live: Vec<u32> = out.indices[row.clone()]
                .iter()
                .zip(&out.mask[row])
                .filter(|(_, m)| **m == 1)
                .map(|(i, _)| *i)
                .collect();
            let want: Vec<u32> = all.iter().take(8).map(|a| a.1 as u32).collect();
            assert_eq!(live, want);
        }
    }
}

#[test]
fn native_backend_is_reported_unavailable() {
    assert!(!KernelBackend::Native.is_available());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (camera, cloud, rays) = random_instance(&mut rng, 10);
    assert!(kernel::select(KernelBackend::Native, &rays, &cloud, &camera, 8).is_err());
    assert!(kernel::select(KernelBackend::Reference, &rays, &cloud, &camera, 8).is_ok());
}
