//! Per-ray point selection, ray-centric descriptors and the aggregation of
//! K point descriptors into one ray feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Var, ZERO_ROW};
use crate::error::{Error, Result};
use crate::geometry::{encoding_width, positional_encode_into, ray_point_geometry, Ray};
use crate::linalg::Vec3;
use crate::nn::{Linear, Mlp, ParamStore, Session};
use crate::scene_io::{CameraView, PointCloud};
use crate::tensor::Tensor;

/// Regularizer of the inverse-distance weights.
pub const INVERSE_DISTANCE_EPS: f64 = 1e-4;
/// Relative slack of the frustum test on each image border.
pub const FRUSTUM_MARGIN: f64 = 0.05;
/// Upper bound on pairs examined by [`compute_d_inf`].
pub const D_INF_MAX_PAIRS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Attention,
    Heuristic,
    NaiveSum,
}

/// Percentile (linear interpolation, `0..=100`) of pairwise point distances.
/// All pairs are used when there are at most `max_pairs` of them, otherwise
/// `max_pairs` pairs drawn uniformly from `seed`.
pub fn compute_d_inf(points: &[Vec3], percentile: f64, seed: u64, max_pairs: usize) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::DegenerateCloud(format!(
            "need at least 2 points for pairwise distances, got {n}"
        )));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100], got {percentile}"
        )));
    }
    let total_pairs = n * (n - 1) / 2;
    let mut dists = if total_pairs <= max_pairs {
        let mut d = Vec::with_capacity(total_pairs);
        for i in 0..n {
            for j in i + 1..n {
                d.push((points[i] - points[j]).norm());
            }
        }
        d
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..max_pairs)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (points[i] - points[j]).norm()
            })
            .collect()
    };
    dists.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (dists.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(dists[lo] + (dists[hi] - dists[lo]) * frac)
}

/// Indices of points whose projection falls inside the image (with
/// [`FRUSTUM_MARGIN`] slack) at positive camera depth.
pub fn frustum_candidates(camera: &CameraView, world_points: &[Vec3]) -> Vec<usize> {
    let to_cam = camera.cam_to_world.inverse();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let (u_lo, u_hi) = (-FRUSTUM_MARGIN * w, (1.0 + FRUSTUM_MARGIN) * w);
    let (v_lo, v_hi) = (-FRUSTUM_MARGIN * h, (1.0 + FRUSTUM_MARGIN) * h);
    world_points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let c = to_cam.apply_point(*p);
            if c.z <= 0.0 {
                return None;
            }
            let (u, v) = camera.intrinsics.project(c);
            (u >= u_lo && u <= u_hi && v >= v_lo && v <= v_hi).then_some(i)
        })
        .collect()
}

/// The K selected points of one ray, ascending by orthogonal distance.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySelection {
    /// Point indices into the cloud; padded entries repeat the nearest point.
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
    /// `false` for padding entries.
    pub live: Vec<bool>,
    /// No point of the cloud is inside the frustum.
    pub beyond_cloud: bool,
}

/// Keeps the `k` smallest `(distance, index)` pairs in ascending order.
pub(crate) struct TopK {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    pub(crate) fn offer(&mut self, dist: f64, index: usize) {
        if self.k == 0 {
            return;
        }
        if self.items.len() == self.k {
            let worst = self.items[self.k - 1];
            if (dist, index) >= worst {
                return;
            }
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| (d, i) < (dist, index));
        self.items.insert(pos, (dist, index));
        self.items.truncate(self.k);
    }

    pub(crate) fn into_sorted(self) -> Vec<(f64, usize)> {
        self.items
    }
}

/// Per ray, the `k` in-frustum points with the smallest orthogonal distance
/// (ties broken by point index). Distances are evaluated in the cloud's local
/// frame.
pub fn select_k_closest(
    rays: &[Ray],
    cloud: &PointCloud,
    camera: &CameraView,
    k: usize,
) -> Result<Vec<RaySelection>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let world = cloud.world_points();
    let candidates = frustum_candidates(camera, &world);
    let to_local = cloud.local_to_world.inverse();
    Ok(rays
        .iter()
        .map(|ray| {
            if candidates.is_empty() {
                return RaySelection {
                    indices: Vec::new(),
                    distances: Vec::new(),
                    live: Vec::new(),
                    beyond_cloud: true,
                };
            }
            let o = to_local.apply_point(ray.origin);
            let d = to_local.apply_dir(ray.direction);
            let mut top = TopK::new(k);
            for &i in &candidates {
                let (_, dist) = crate::geometry::ray_point_distance(o, d, cloud.points[i]);
                top.offer(dist, i);
            }
            let found = top.into_sorted();
            let mut sel = RaySelection {
                indices: found.iter().map(|p| p.1).collect(),
                distances: found.iter().map(|p| p.0).collect(),
                live: vec![true; found.len()],
                beyond_cloud: false,
            };
            while sel.indices.len() < k {
                sel.indices.push(found[0].1);
                sel.distances.push(found[0].0);
                sel.live.push(false);
            }
            sel
        })
        .collect())
}

/// The non-learned part of a descriptor batch: which feature row every slot
/// reads, the encoded geometry, the far-ray gate and the live mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorLayout {
    pub rays: usize,
    pub slots: usize,
    /// Row into the feature table per slot, or [`ZERO_ROW`].
    pub feature_rows: Vec<usize>,
    /// `[rays * slots, 3 * encoding_width]` encoded (theta, psi, distance).
    pub geometry: Vec<f64>,
    pub gate: Vec<bool>,
    pub live: Vec<bool>,
    pub distances: Vec<f64>,
    pub bands: usize,
}

impl DescriptorLayout {
    pub fn geometry_width(&self) -> usize {
        3 * encoding_width(self.bands)
    }

    pub fn gate_fraction(&self) -> f64 {
        if self.rays == 0 {
            return 0.0;
        }
        self.gate.iter().filter(|g| **g).count() as f64 / self.rays as f64
    }

    /// Concatenates layouts of disjoint ray groups that share `slots`.
    pub fn concat(parts: Vec<DescriptorLayout>) -> DescriptorLayout {
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("at least one layout");
        for p in it {
            assert_eq!(p.slots, acc.slots);
            assert_eq!(p.bands, acc.bands);
            acc.rays += p.rays;
            acc.feature_rows.extend(p.feature_rows);
            acc.geometry.extend(p.geometry);
            acc.gate.extend(p.gate);
            acc.live.extend(p.live);
            acc.distances.extend(p.distances);
        }
        acc
    }
}

/// Builds the layout for rays of one cloud. `k == 0` yields a single slot
/// per ray carrying only the global code. `feature_row` maps a cloud point
/// index to its row in the feature table.
pub fn descriptor_layout(
    rays: &[Ray],
    selections: Option<&[RaySelection]>,
    cloud: &PointCloud,
    d_inf: f64,
    k: usize,
    bands: usize,
    feature_row: &dyn Fn(usize) -> usize,
) -> DescriptorLayout {
    let slots = k.max(1);
    let gw = 3 * encoding_width(bands);
    let n = rays.len() * slots;
    let mut layout = DescriptorLayout {
        rays: rays.len(),
        slots,
        feature_rows: Vec::with_capacity(n),
        geometry: Vec::with_capacity(n * gw),
        gate: Vec::with_capacity(rays.len()),
        live: Vec::with_capacity(n),
        distances: Vec::with_capacity(n),
        bands,
    };
    let to_local = cloud.local_to_world.inverse();
    for (r, ray) in rays.iter().enumerate() {
        let sel = selections.map(|s| &s[r]);
        let empty = sel.map_or(true, |s| s.beyond_cloud || s.indices.is_empty());
        if empty {
            layout.gate.push(true);
            for slot in 0..slots {
                layout.feature_rows.push(ZERO_ROW);
                layout.geometry.extend(std::iter::repeat(0.0).take(gw));
                layout.live.push(slot == 0);
                layout.distances.push(0.0);
            }
            continue;
        }
        let sel = sel.expect("non-empty selection");
        assert_eq!(sel.indices.len(), slots, "selection width must equal K");
        let min_dist = sel
            .distances
            .iter()
            .zip(&sel.live)
            .filter(|(_, l)| **l)
            .map(|(d, _)| *d)
            .fold(f64::INFINITY, f64::min);
        layout.gate.push(min_dist > d_inf);
        let o_local = to_local.apply_point(ray.origin);
        let d_local = to_local.apply_dir(ray.direction);
        for s in 0..slots {
            let idx = sel.indices[s];
            let x_local = cloud.points[idx];
            let g = ray_point_geometry(
                o_local,
                d_local,
                x_local,
                ray.direction,
                cloud.local_to_world.apply_point(x_local),
            );
            positional_encode_into(g.theta, bands, &mut layout.geometry);
            positional_encode_into(g.psi, bands, &mut layout.geometry);
            positional_encode_into(g.distance, bands, &mut layout.geometry);
            layout.feature_rows.push(feature_row(idx));
            layout.live.push(sel.live[s]);
            layout.distances.push(sel.distances[s]);
        }
    }
    layout
}

/// Key/value/query maps, the multi-head projections and the global code.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub key: Mlp,
    pub value: Mlp,
    pub query: Mlp,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub feature_dim: usize,
    pub point_feature_dim: usize,
    pub bands: usize,
}

impl AttentionModule {
    pub fn new(feature_dim: usize, heads: usize, hidden: usize, bands: usize) -> Self {
        let point_feature_dim = crate::point_encoder::VIEWS * feature_dim;
        let desc = descriptor_width(feature_dim, bands);
        let dir_enc = 3 * encoding_width(bands);
        Self {
            key: Mlp::new("key", &[desc, hidden, feature_dim]),
            value: Mlp::new("value", &[desc, hidden, feature_dim]),
            query: Mlp::new("query", &[dir_enc, hidden, feature_dim]),
            q_proj: Linear::new("attn.q", feature_dim, feature_dim),
            k_proj: Linear::new("attn.k", feature_dim, feature_dim),
            v_proj: Linear::new("attn.v", feature_dim, feature_dim),
            out_proj: Linear::new("attn.out", feature_dim, feature_dim),
            heads,
            feature_dim,
            point_feature_dim,
            bands,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.key.init(store, rng);
        self.value.init(store, rng);
        self.query.init(store, rng);
        for l in [&self.q_proj, &self.k_proj, &self.v_proj, &self.out_proj] {
            l.init(store, rng);
        }
        store.insert("l_inf", Tensor::zeros(&[self.feature_dim]));
    }

    /// `[rays * slots, descriptor_width]`: point feature, encoded geometry
    /// and the gated global code.
    pub fn build_descriptors(
        &self,
        s: &mut Session<'_>,
        layout: &DescriptorLayout,
        features: Var,
    ) -> Var {
        let feat = s.tape.gather_rows(features, layout.feature_rows.clone());
        let geo = s.constant(Tensor::from_vec(
            &[layout.feature_rows.len(), layout.geometry_width()],
            layout.geometry.clone(),
        ));
        let l_inf = s.param("l_inf");
        let slot_gate: Vec<bool> = layout
            .gate
            .iter()
            .flat_map(|g| std::iter::repeat(*g).take(layout.slots))
            .collect();
        let gated = s.tape.gate_rows(l_inf, slot_gate);
        s.tape.concat_cols(&[feat, geo, gated])
    }

    /// Multi-head attention of the ray query over its live slots.
    pub fn attend(
        &self,
        s: &mut Session<'_>,
        dir_encoding: Var,
        descriptors: Var,
        layout: &DescriptorLayout,
    ) -> Result<Var> {
        Ok(self.attend_with_weights(s, dir_encoding, descriptors, layout)?.0)
    }

    /// Like [`attend`](Self::attend), also returning the attention node
    /// whose softmax weights can be read with `Tape::attention_weights`.
    pub fn attend_with_weights(
        &self,
        s: &mut Session<'_>,
        dir_encoding: Var,
        descriptors: Var,
        layout: &DescriptorLayout,
    ) -> Result<(Var, Var)> {
        for r in 0..layout.rays {
            if !layout.live[r * layout.slots..(r + 1) * layout.slots]
                .iter()
                .any(|l| *l)
            {
                return Err(Error::InvalidArgument(format!(
                    "ray {r} has every descriptor masked"
                )));
            }
        }
        let keys = self.key.forward(s, descriptors);
        let values = self.value.forward(s, descriptors);
        let query = self.query.forward(s, dir_encoding);
        let q = self.q_proj.forward(s, query);
        let k = self.k_proj.forward(s, keys);
        let v = self.v_proj.forward(s, values);
        let mixed = s.tape.attention(q, k, v, self.heads, &layout.live);
        Ok((self.out_proj.forward(s, mixed), mixed))
    }

    /// Fixed-weight baselines: inverse-distance weighting or a plain sum of
    /// the per-point values.
    pub fn aggregate_heuristic(
        &self,
        s: &mut Session<'_>,
        descriptors: Var,
        layout: &DescriptorLayout,
        mode: AggregationMode,
    ) -> Var {
        let values = self.value.forward(s, descriptors);
        let weights = heuristic_weights(layout, mode);
        s.tape.weighted_row_sum(values, weights, layout.slots)
    }
}

pub fn heuristic_weights(layout: &DescriptorLayout, mode: AggregationMode) -> Vec<f64> {
    let mut weights = vec![0.0; layout.live.len()];
    for r in 0..layout.rays {
        let range = r * layout.slots..(r + 1) * layout.slots;
        match mode {
            AggregationMode::NaiveSum => {
                for i in range {
                    weights[i] = if layout.live[i] { 1.0 } else { 0.0 };
                }
            }
            AggregationMode::Heuristic | AggregationMode::Attention => {
                let total: f64 = range
                    .clone()
                    .filter(|&i| layout.live[i])
                    .map(|i| 1.0 / (layout.distances[i] + INVERSE_DISTANCE_EPS))
                    .sum();
                for i in range {
                    if layout.live[i] {
                        weights[i] = 1.0 / (layout.distances[i] + INVERSE_DISTANCE_EPS) / total;
                    }
                }
            }
        }
    }
    weights
}

/// Point feature + three encoded scalars + global code.
pub fn descriptor_width(feature_dim: usize, bands: usize) -> usize {
    crate::point_encoder::VIEWS * feature_dim + 3 * encoding_width(bands) + feature_dim
}
