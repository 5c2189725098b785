//! Source-free open-set domain adaptation with an expandable classifier head.
//!
//! A classifier trained on labeled source data is adapted to an unlabeled
//! target domain that contains extra, unseen classes. Adaptation combines an
//! entropy-thresholded pseudo-label loss with a mutual-information
//! consistency loss between predictions on an input and on a randomly
//! transformed copy. The numeric core is generic over `f32` and `f64`.

// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod consistency;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod pseudolabel;
pub mod scalar;
pub mod trainer;
pub mod verification;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Classifier64 = model::ExpandedClassifier<f64>;
pub type Classifier32 = model::ExpandedClassifier<f32>;
pub type DomainPair64 = data::DomainPair<f64>;
pub type DomainPair32 = data::DomainPair<f32>;
