use std::collections::BTreeMap;

use nplf::kernel::KernelBackend;
use nplf::model::Model;
use nplf::nn::{param_group, ParamStore};
use nplf::scene_io::{RunConfig, Scene};
use nplf::tensor::Tensor;
use nplf::training::{batch_loss_and_grads, scene_d_inf, FrameBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 16 rays of one training frame: half from the top row, half random.
pub fn micro_batch(scene: &Scene, seed: u64) -> Vec<FrameBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = scene.train_indices()[2];
    let cam = &scene.frames[frame].camera;
    let mut pixels: Vec<(u32, u32)> = (0..8).map(|i| (i * cam.width / 8, 0)).collect();
    pixels.extend((0..8).map(|_| (rng.gen_range(0..cam.width), rng.gen_range(0..cam.height))));
    vec![FrameBatch {
        frame,
        cloud_frame: frame,
        cloud_seed: seed,
        pixels,
    }]
}

pub fn randomize_global_code(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = params.expect("l_inf").len();
    let v: Vec<f64> = (0..l).map(|_| rng.gen_range(-0.5..0.5)).collect();
    params.insert("l_inf", Tensor::from_vec(&[l], v));
}

/// Worst relative error per parameter group over `per_group` random entries.
pub fn check(cfg: &RunConfig, per_group: usize) -> BTreeMap<String, f64> {
    let scene = super::tiny_scene(cfg);
    let model = Model::new(cfg, KernelBackend::Reference);
    let mut params = model.init_params(3);
    randomize_global_code(&mut params, 4);
    let d_inf = scene_d_inf(&scene, cfg).unwrap();
    let batch = micro_batch(&scene, 5);
    let (_, rays, gate, grads) = batch_loss_and_grads(&model, &params, d_inf, &scene, &batch).unwrap();
    assert_eq!(rays, 16);
    assert!(gate > 0.0, "top-row rays should use the global code");

    let loss = |p: &ParamStore| batch_loss_and_grads(&model, p, d_inf, &scene, &batch).unwrap().0;
    let mut by_group: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            by_group.entry(param_group(name).to_string()).or_default().push((name.clone(), i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = BTreeMap::new();
    for (group, entries) in by_group {
        let mut max_err: f64 = 0.0;
        for _ in 0..per_group {
            let (name, i) = &entries[rng.gen_range(0..entries.len())];
            let an = grads.expect(name).data()[*i];
            // Large steps can cross a ReLU or max-pool kink, small ones lose
            // digits to roundoff; a wrong gradient disagrees at every step.
            let err = [1e-4, 1e-5, 1e-6]
                .iter()
                .map(|&h| {
                    let mut p = params.clone();
                    let x = p.expect(name).data()[*i];
                    p.get_mut(name).unwrap().data_mut()[*i] = x + h;
                    let up = loss(&p);
                    p.get_mut(name).unwrap().data_mut()[*i] = x - h;
                    let down = loss(&p);
                    let fd = (up - down) / (2.0 * h);
                    let scale = fd.abs().max(an.abs());
                    if scale < 1e-9 {
                        0.0
                    } else {
                        (fd - an).abs() / scale
                    }
                })
                .fold(f64::INFINITY, f64::min);
            max_err = max_err.max(err);
        }
        worst.insert(group, max_err);
    }
    worst
}
