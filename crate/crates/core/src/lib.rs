//! Neural point light fields: a light field conditioned on a sparse point
//! cloud, rendered with one radiance evaluation per ray.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod kernel;
pub mod light_field;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod point_encoder;
pub mod ray_aggregation;
pub mod scene_io;
pub mod synth_scenes;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
