//! Radiance head mapping an encoded ray direction and a ray feature to a
//! color, and the image loss.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::positional_encode_vec3;
use crate::linalg::Vec3;
use crate::nn::{Mlp, ParamStore, Session};
use crate::tensor::Tensor;

/// Counts radiance evaluations, one per ray.
#[derive(Clone, Debug, Default)]
pub struct EvalCounter(Arc<AtomicU64>);

impl EvalCounter {
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug)]
pub struct LightField {
    pub mlp: Mlp,
    pub bands: usize,
    pub feature_dim: usize,
    counter: EvalCounter,
}

impl LightField {
    /// `layers` linear layers of width `width`; the input is
    /// `gamma(d) ++ l_j`.
    pub fn new(bands: usize, feature_dim: usize, width: usize, layers: usize) -> Self {
        let input = 3 * crate::geometry::encoding_width(bands) + feature_dim;
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(width).take(layers - 1));
        dims.push(3);
        Self {
            mlp: Mlp::new("lf", &dims),
            bands,
            feature_dim,
            counter: EvalCounter::default(),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        self.mlp.init(store, rng);
    }

    pub fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    pub fn evaluations(&self) -> u64 {
        self.counter.get()
    }

    /// Colors in `(0, 1)` for every row of `[dir_encoding, ray_features]`.
    pub fn forward(&self, s: &mut Session<'_>, dir_encoding: Var, ray_features: Var) -> Result<Var> {
        for (what, v) in [("direction encoding", dir_encoding), ("ray feature", ray_features)] {
            if !s.value(v).all_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite {what} entering the light field"
                )));
            }
        }
        let x = s.tape.concat_cols(&[dir_encoding, ray_features]);
        let y = self.mlp.forward(s, x);
        let rows = s.value(y).rows() as u64;
        self.counter.add(rows);
        Ok(s.tape.sigmoid(y))
    }

    /// Single-ray convenience wrapper over [`LightField::forward`].
    pub fn predict_color(&self, store: &ParamStore, direction: Vec3, feature: &[f64]) -> Result<[f64; 3]> {
        if !direction.is_finite() {
            return Err(Error::InvalidArgument("non-finite ray direction".into()));
        }
        let mut s = Session::new(store);
        let enc = positional_encode_vec3(direction, self.bands);
        let d = s.constant(Tensor::from_vec(&[1, enc.len()], enc));
        let l = s.constant(Tensor::from_vec(&[1, feature.len()], feature.to_vec()));
        let out = self.forward(&mut s, d, l)?;
        let v = s.value(out).data();
        Ok([v[0], v[1], v[2]])
    }
}

/// Summed squared error over a ray batch and its per-ray mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub sum: f64,
    pub per_ray: f64,
}

pub fn image_loss(pred: &Tensor, gt: &Tensor) -> Result<LossValue> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.cols() != 3 {
        return Err(Error::InvalidArgument(format!(
            "loss needs matching [rays, 3] inputs, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let rays = pred.rows().max(1) as f64;
    Ok(LossValue {
        sum,
        per_ray: sum / rays,
    })
}
