//! Generalized few-shot semantic segmentation with context-aware prototype
//! learning, at desk scale.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training,
//! gradient checks and checkpoints use the `f64` aliases defined here.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod pnm;
pub mod protocol;
pub mod prototype;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{LabelMask, IGNORE};
pub use prototype::{Fusion, Role};
pub use scalar::{DType, Scalar};

pub type Real = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type Image = image::Image<Real>;
pub type FeatureMap = image::FeatureMap<Real>;
pub type Backbone = backbone::Backbone<Real>;
pub type Classifier = prototype::Classifier<Real>;
pub type GammaNet = prototype::GammaNet<Real>;
pub type SupportSet = prototype::SupportSet<Real>;
