use nplf::geometry::encoding_width;
use nplf::nn::{ParamStore, Session};
use nplf::ray_aggregation::{AttentionModule, DescriptorLayout};
use nplf::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const F: usize = 8;
pub const HEADS: usize = 2;
pub const BANDS: usize = 2;

pub struct Fixture {
    pub module: AttentionModule,
    pub store: ParamStore,
    pub features: Tensor,
    pub dirs: Tensor,
}

pub fn fixture(seed: u64, rays: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = AttentionModule::new(F, HEADS, 16, BANDS);
    let mut store = ParamStore::new();
    module.init(&mut store, &mut rng);
    // A non-zero global code so the gate matters.
    let l_inf: Vec<f64> = (0..F).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.insert("l_inf", Tensor::from_vec(&[F], l_inf));
    let n = 20;
    let features = Tensor::from_vec(
        &[n, 6 * F],
        (0..n * 6 * F).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let dw = 3 * encoding_width(BANDS);
    let dirs = Tensor::from_vec(&[rays, dw], (0..rays * dw).map(|_| rng.gen_range(-1.0..1.0)).collect());
    Fixture {
        module,
        store,
        features,
        dirs,
    }
}

pub fn random_layout(rng: &mut ChaCha8Rng, rays: usize, slots: usize, rows: usize) -> DescriptorLayout {
    let gw = 3 * encoding_width(BANDS);
    let n = rays * slots;
    let mut live: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    for r in 0..rays {
        live[r * slots] = true;
    }
    DescriptorLayout {
        rays,
        slots,
        feature_rows: (0..n).map(|_| rng.gen_range(0..rows)).collect(),
        geometry: (0..n * gw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        gate: (0..rays).map(|_| rng.gen_bool(0.5)).collect(),
        live,
        distances: (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
        bands: BANDS,
    }
}

/// Output rows plus softmax weights `[rays, heads, slots]`.
pub fn run(fx: &Fixture, layout: &DescriptorLayout) -> (Tensor, Vec<f64>) {
    let mut s = Session::new(&fx.store);
    let feats = s.constant(fx.features.clone());
    let dirs = s.constant(fx.dirs.clone());
    let desc = fx.module.build_descriptors(&mut s, layout, feats);
    let (out, node) = fx.module.attend_with_weights(&mut s, dirs, desc, layout).unwrap();
    let (w, heads, slots) = s.tape.attention_weights(node).unwrap();
    assert_eq!((heads, slots), (HEADS, layout.slots));
    (s.value(out).clone(), w.to_vec())
}

pub fn permute_slots(layout: &DescriptorLayout, ray: usize, perm: &[usize]) -> DescriptorLayout {
    let gw = layout.geometry_width();
    let mut out = layout.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (d, s) = (ray * layout.slots + dst, ray * layout.slots + src);
        out.feature_rows[d] = layout.feature_rows[s];
        out.live[d] = layout.live[s];
        out.distances[d] = layout.distances[s];
        out.geometry[d * gw..(d + 1) * gw].copy_from_slice(&layout.geometry[s * gw..(s + 1) * gw]);
    }
    out
}

/// Worst output change over random slot permutations.
pub fn permutation_error(trials: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let fx = fixture(trial, 4);
        let layout = random_layout(&mut rng, 4, 8, 20);
        let (base, _) = run(&fx, &layout);
        let mut permuted = layout.clone();
        for r in 0..4 {
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut rng);
            permuted = permute_slots(&permuted, r, &perm);
        }
        let (out, _) = run(&fx, &permuted);
        for (a, b) in base.data().iter().zip(out.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Worst deviation of a per-head weight sum from one, or infinity when a
/// masked slot gets weight or any weight is negative.
pub fn normalization_error(trials: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let fx = fixture(100 + trial, 5);
        let layout = random_layout(&mut rng, 5, 6, 20);
        let (_, w) = run(&fx, &layout);
        for r in 0..5 {
            for h in 0..HEADS {
                let row = &w[(r * HEADS + h) * 6..(r * HEADS + h + 1) * 6];
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                for (s, v) in row.iter().enumerate() {
                    if (!layout.live[r * 6 + s] && *v != 0.0) || *v < 0.0 {
                        return f64::INFINITY;
                    }
                }
            }
        }
    }
    worst
}

/// K copies of one descriptor: `(worst weight deviation from 1/K, worst
/// output difference from the single-slot run)`.
pub fn degeneracy_error(k: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fx = fixture(9, 3);
    let single = random_layout(&mut rng, 3, 1, 20);
    let gw = single.geometry_width();
    let mut repeated = single.clone();
    repeated.slots = k;
    repeated.feature_rows = single.feature_rows.iter().flat_map(|r| std::iter::repeat(*r).take(k)).collect();
    repeated.geometry = single.geometry.chunks(gw).flat_map(|g| g.repeat(k)).collect();
    repeated.live = vec![true; 3 * k];
    repeated.distances = single.distances.iter().flat_map(|d| std::iter::repeat(*d).take(k)).collect();
    let (one, _) = run(&fx, &single);
    let (many, w) = run(&fx, &repeated);
    let weights = w.iter().map(|v| (v - 1.0 / k as f64).abs()).fold(0.0, f64::max);
    let outputs = one.data().iter().zip(many.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (weights, outputs)
}
