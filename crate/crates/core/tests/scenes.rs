mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nplf::error::Error;
use nplf::scene_io::{load_scene, save_scene, split_frames, CameraView, Intrinsics};
use nplf::synth_scenes::*;
use tempfile::tempdir;

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "images", "points"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn corridor_preset_writes_forty_frames_deterministically() {
    let spec = SceneSpec::preset(Layout::Corridor);
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    write_scene(&spec, a.path()).unwrap();
    write_scene(&spec, b.path()).unwrap();
    let files = dir_contents(a.path());
    assert_eq!(files.keys().filter(|k| k.ends_with(".png")).count(), 40);
    assert_eq!(files.keys().filter(|k| k.ends_with(".ply")).count(), 40);
    assert!(files.contains_key("scene.json"));
    assert_eq!(files, dir_contents(b.path()));

    let mut other = spec.clone();
    other.seed = 1;
    let c = tempdir().unwrap();
    write_scene(&other, c.path()).unwrap();
    assert_ne!(files, dir_contents(c.path()));
}

#[test]
fn round_trip_is_bit_exact_and_byte_identical() {
    let spec = common::tiny_spec();
    let d = tempdir().unwrap();
    let generated = write_scene(&spec, d.path()).unwrap();
    let loaded = load_scene(d.path()).unwrap();
    assert_eq!(loaded.frames.len(), generated.frames.len());
    for (g, l) in generated.frames.iter().zip(&loaded.frames) {
        assert_eq!(g.camera, l.camera);
        assert_eq!(g.cloud.points, l.cloud.points);
        assert_eq!(g.image, l.image);
    }
    let again = tempdir().unwrap();
    save_scene(&loaded, again.path()).unwrap();
    assert_eq!(dir_contents(d.path()), dir_contents(again.path()));
}

#[test]
fn missing_image_names_the_frame() {
    let spec = SceneSpec::preset(Layout::Corridor);
    let d = tempdir().unwrap();
    write_scene(&spec, d.path()).unwrap();
    fs::remove_file(d.path().join("images/frame_0017.png")).unwrap();
    let err = load_scene(d.path()).unwrap_err();
    assert!(matches!(err, Error::CorruptScene { frame: Some(17), .. }), "{err}");
    assert!(err.to_string().contains("frame 17"));
}

#[test]
fn reflected_pose_is_a_validation_error() {
    let d = tempdir().unwrap();
    write_scene(&common::tiny_spec(), d.path()).unwrap();
    let path = d.path().join("scene.json");
    let mut json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let pose = json["frames"][3]["pose"].as_array_mut().unwrap();
    for i in [0, 4, 8] {
        pose[i] = serde_json::json!(-pose[i].as_f64().unwrap());
    }
    fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(load_scene(d.path()), Err(Error::Validation(_))));
}

#[test]
fn split_examples() {
    let scene = generate_scene(&SceneSpec::preset(Layout::Corridor)).unwrap();
    let split = split_frames(scene.clone(), 0.1, 3).unwrap();
    let hold = split.holdout_indices();
    assert_eq!(hold.len(), 4);
    assert!(hold.windows(2).all(|w| w[1] - w[0] == 10));
    assert!(hold[0] >= 1);
    assert_eq!(split_frames(scene.clone(), 0.1, 3).unwrap().holdout_indices(), hold);
    assert_eq!(split_frames(scene.clone(), 0.0, 3).unwrap().train_indices().len(), 40);
    assert!(split_frames(scene, 1.0, 0).is_err());
}

#[test]
fn points_lie_near_surfaces() {
    let spec = SceneSpec::preset(Layout::Intersection);
    let scene = generate_scene(&spec).unwrap();
    let prims = spec.primitives();
    for f in scene.frames.iter().step_by(7) {
        for p in f.cloud.world_points() {
            let d = prims.iter().map(|q| q.surface_distance(p)).fold(f64::INFINITY, f64::min);
            assert!(d <= 3.0 * spec.noise_sigma + 1e-9, "point {p:?} is {d} from every surface");
            assert!(p.y <= spec.lidar_max_height + 3.0 * spec.noise_sigma + 1e-9);
        }
    }
}

fn scaled_camera(cam: &CameraView, factor: u32) -> CameraView {
    let f = factor as f64;
    CameraView {
        intrinsics: Intrinsics::new(cam.intrinsics.fx * f, cam.intrinsics.fy * f, cam.intrinsics.cx * f, cam.intrinsics.cy * f),
        width: cam.width * factor,
        height: cam.height * factor,
        ..cam.clone()
    }
}

#[test]
fn oracle_is_resolution_consistent() {
    for layout in [Layout::Corridor, Layout::Curve, Layout::Intersection] {
        let spec = SceneSpec::preset(layout);
        let intrinsics = spec.intrinsics();
        for pose in spec.poses().unwrap().into_iter().step_by(13) {
            let cam = CameraView {
                intrinsics,
                cam_to_world: pose,
                width: spec.width,
                height: spec.height,
                frame_index: 0,
            };
            let small = render_oracle(&spec, &cam).unwrap();
            let big = render_oracle(&spec, &scaled_camera(&cam, 4)).unwrap();
            let mut err = 0.0;
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let mut acc = [0.0; 3];
                    for dy in 0..4 {
                        for dx in 0..4 {
                            let p = big.pixel(4 * x + dx, 4 * y + dy);
                            for c in 0..3 {
                                acc[c] += p[c] / 16.0;
                            }
                        }
                    }
                    let s = small.pixel(x, y);
                    err += (0..3).map(|c| (acc[c] - s[c]).abs()).sum::<f64>();
                }
            }
            let mae = err / (3 * cam.width * cam.height) as f64;
            assert!(mae < 0.05, "{layout:?}: mean absolute error {mae}");
        }
    }
}

#[test]
fn noiseless_points_project_onto_their_surface_color() {
    let mut spec = SceneSpec::preset(Layout::Corridor);
    spec.noise_sigma = 0.0;
    spec.trajectory.frames = 4;
    let scene = generate_scene(&spec).unwrap();
    let prims = spec.primitives();
    let (mut inside, mut agree) = (0usize, 0usize);
    for f in &scene.frames {
        let to_cam = f.camera.cam_to_world.inverse();
        for p in f.cloud.world_points() {
            let c = to_cam.apply_point(p);
            let (u, v) = f.camera.intrinsics.project(c);
            if c.z <= 0.0 || u < 0.0 || v < 0.0 || u >= f.camera.width as f64 || v >= f.camera.height as f64 {
                continue;
            }
            inside += 1;
            // The surface the point was sampled from and its color there.
            let (owner, _) = prims
                .iter()
                .enumerate()
                .map(|(i, q)| (i, q.surface_distance(p)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let dir = (p - f.camera.center()).normalized();
            let (_, color) = prims[owner].intersect(f.camera.center(), dir).unwrap();
            // One-pixel camera whose pixel center is the projection.
            let probe = CameraView {
                intrinsics: Intrinsics::new(
                    f.camera.intrinsics.fx,
                    f.camera.intrinsics.fy,
                    f.camera.intrinsics.cx - (u - 0.5),
                    f.camera.intrinsics.cy - (v - 0.5),
                ),
                width: 1,
                height: 1,
                ..f.camera.clone()
            };
            if render_oracle(&spec, &probe).unwrap().pixel(0, 0) == color {
                agree += 1;
            }
        }
    }
    assert!(inside > 1000);
    // Points on an edge shared by two faces may pick either color.
    assert!(agree as f64 >= 0.99 * inside as f64, "{agree} of {inside}");
}
