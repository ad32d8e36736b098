//! The full ray-to-color pipeline: point encoder, point selection,
//! aggregation and the light-field head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Var, ZERO_ROW};
use crate::error::Result;
use crate::geometry::{generate_rays, positional_encode_vec3, Ray};
use crate::kernel::{self, KernelBackend};
use crate::light_field::LightField;
use crate::nn::{ParamStore, Session};
use crate::point_encoder::{
    gather_point_features, normalize_cloud, project_to_planes, PointEncoder, VIEWS,
};
use crate::ray_aggregation::{
    descriptor_layout, AggregationMode, AttentionModule, DescriptorLayout,
};
use crate::scene_io::{CameraView, ImageRgb, PointCloud, RunConfig};
use crate::tensor::Tensor;

/// Rays of one camera conditioned on one point cloud.
#[derive(Clone, Copy, Debug)]
pub struct RayGroup<'a> {
    pub camera: &'a CameraView,
    pub cloud: &'a PointCloud,
    pub rays: &'a [Ray],
}

pub struct ForwardOutput {
    /// `[rays, 3]`
    pub colors: Var,
    /// Per ray: the global code entered its descriptors.
    pub gate: Vec<bool>,
    pub layout: DescriptorLayout,
}

pub struct Rendered {
    pub image: ImageRgb,
    /// Row-major per-pixel gate activations.
    pub gate: Vec<bool>,
    pub evaluations: u64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub encoder: PointEncoder,
    pub attention: AttentionModule,
    pub light_field: LightField,
    pub backend: KernelBackend,
}

impl Model {
    pub fn new(config: &RunConfig, backend: KernelBackend) -> Self {
        Self {
            config: config.clone(),
            encoder: PointEncoder::new(config.encoder_channels, config.feature_dim),
            attention: AttentionModule::new(
                config.feature_dim,
                config.n_heads,
                config.kv_hidden,
                config.pe_bands,
            ),
            light_field: LightField::new(
                config.pe_bands,
                config.feature_dim,
                config.lf_width,
                config.lf_layers,
            ),
            backend,
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, &mut rng);
        self.attention.init(&mut store, &mut rng);
        self.light_field.init(&mut store, &mut rng);
        store
    }

    fn point_feature_dim(&self) -> usize {
        VIEWS * self.config.feature_dim
    }

    /// Features of `points` (indices into `cloud`) as `[points.len(), 6F]`.
    pub fn encode_points(&self, s: &mut Session<'_>, cloud: &PointCloud, points: &[usize]) -> Result<Var> {
        let (normalized, _) = normalize_cloud(&cloud.points)?;
        let proj = project_to_planes(&normalized, self.config.projection_resolution)?;
        let maps = self.encoder.encode_views(s, &proj)?;
        Ok(gather_point_features(s, &proj, maps, points))
    }

    /// Features of every point of `cloud`, without gradient tracking.
    pub fn cloud_features(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Tensor> {
        let mut s = Session::new(store);
        let all: Vec<usize> = (0..cloud.len()).collect();
        let v = self.encode_points(&mut s, cloud, &all)?;
        Ok(s.value(v).clone())
    }

    /// Colors of every ray in `groups`. With `cached`, group `i` reads its
    /// point features from `cached[i]` instead of running the encoder.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        groups: &[RayGroup<'_>],
        d_inf: f64,
        cached: Option<&[&Tensor]>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let k = cfg.k_closest;
        let mut tables = Vec::new();
        let mut layouts = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for (gi, g) in groups.iter().enumerate() {
            if k == 0 {
                layouts.push(descriptor_layout(
                    g.rays,
                    None,
                    g.cloud,
                    d_inf,
                    0,
                    cfg.pe_bands,
                    &|_| ZERO_ROW,
                ));
                continue;
            }
            let selection = kernel::select(self.backend, g.rays, g.cloud, g.camera, k)?;
            let mut row_of = vec![ZERO_ROW; g.cloud.len()];
            if let Some(c) = cached {
                let table = c[gi];
                for (i, r) in row_of.iter_mut().enumerate() {
                    *r = offset + i;
                }
                offset += table.rows();
                tables.push(s.constant(table.clone()));
            } else {
                let mut used: Vec<usize> = selection
                    .iter()
                    .flat_map(|sel| sel.indices.iter().copied())
                    .collect();
                used.sort_unstable();
                used.dedup();
                if !used.is_empty() {
                    for (r, &i) in used.iter().enumerate() {
                        row_of[i] = offset + r;
                    }
                    offset += used.len();
                    tables.push(self.encode_points(s, g.cloud, &used)?);
                }
            }
            layouts.push(descriptor_layout(
                g.rays,
                Some(&selection),
                g.cloud,
                d_inf,
                k,
                cfg.pe_bands,
                &|i| row_of[i],
            ));
        }
        let features = match tables.len() {
            0 => s.constant(Tensor::zeros(&[0, self.point_feature_dim()])),
            1 => tables[0],
            _ => s.tape.concat_rows(&tables),
        };
        let layout = DescriptorLayout::concat(layouts);

        let mut dirs = Vec::with_capacity(layout.rays * 3 * crate::geometry::encoding_width(cfg.pe_bands));
        for g in groups {
            for r in g.rays {
                dirs.extend(positional_encode_vec3(r.direction, cfg.pe_bands));
            }
        }
        let width = dirs.len() / layout.rays.max(1);
        let dir_enc = s.constant(Tensor::from_vec(&[layout.rays, width], dirs));

        let descriptors = self.attention.build_descriptors(s, &layout, features);
        let ray_features = match cfg.aggregation {
            AggregationMode::Attention => self.attention.attend(s, dir_enc, descriptors, &layout)?,
            mode => self.attention.aggregate_heuristic(s, descriptors, &layout, mode),
        };
        let colors = self.light_field.forward(s, dir_enc, ray_features)?;
        Ok(ForwardOutput {
            colors,
            gate: layout.gate.clone(),
            layout,
        })
    }

    /// Renders every pixel of `camera` from `cloud`, one radiance
    /// evaluation per pixel.
    pub fn render_view(
        &self,
        store: &ParamStore,
        d_inf: f64,
        camera: &CameraView,
        cloud: &PointCloud,
    ) -> Result<Rendered> {
        let rays = generate_rays(camera, None)?;
        let features = if self.config.k_closest > 0 {
            Some(self.cloud_features(store, cloud)?)
        } else {
            None
        };
        let before = self.light_field.evaluations();
        let mut image = ImageRgb::new(camera.width, camera.height);
        let mut gate = Vec::with_capacity(rays.len());
        for chunk in rays.chunks(self.config.render_chunk) {
            let mut s = Session::new(store);
            let group = RayGroup {
                camera,
                cloud,
                rays: chunk,
            };
            let cached = features.as_ref().map(|t| [t]);
            let out = self.forward(&mut s, &[group], d_inf, cached.as_ref().map(|c| &c[..]))?;
            let colors = s.value(out.colors);
            for (i, r) in chunk.iter().enumerate() {
                let c = colors.row(i);
                image.set_pixel(r.pixel.0, r.pixel.1, [c[0], c[1], c[2]]);
            }
            gate.extend(out.gate);
        }
        Ok(Rendered {
            image,
            gate,
            evaluations: self.light_field.evaluations() - before,
        })
    }
}
