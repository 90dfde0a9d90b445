//! Online single-target tracker: a small CNN feature extractor whose fc head is trained
//! online against a naive Bayes appearance model made of two diagonal Gaussians.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`, which is what the tracker uses by default.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons also reject NaN

pub mod appearance;
pub mod container;
pub mod feature;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod pretrain;
pub mod sampler;
pub mod scalar;
pub mod tracker;

pub use appearance::{Label, UpdateConfig, VarianceCrossTerm};
pub use geometry::{center_distance, crop_resize, iou, BoundingBox};
pub use image::{load_image, save_image, ImageBuffer};
pub use nn::{Activation, ConvStage, NetworkConfig};
pub use sampler::{ImageDims, SamplerConfig, SearchRadius};
pub use scalar::Scalar;
pub use tracker::{TrackerConfig, TrackerError};

pub type DiagonalGaussian = appearance::DiagonalGaussian<f64>;
pub type AppearanceModel = appearance::AppearanceModel<f64>;
pub type FeatureVector = feature::FeatureVector<f64>;
pub type Network = nn::Network<f64>;
pub type FcGradients = nn::FcGradients<f64>;
pub type TrackerState = tracker::TrackerState<f64>;
pub type Tracker = tracker::Tracker<f64>;

pub type Network32 = nn::Network<f32>;
pub type Tracker32 = tracker::Tracker<f32>;
