//! Hierarchical few-shot classification over feature vectors.
//!
//! A taxonomy of classes is learned with one small classifier per internal
//! node (each with an extra "others" output), a prototype memory per node
//! kept by exponential moving averages, a hierarchical contrastive loss that
//! pulls features toward the prototypes on their ground-truth path, and a
//! probabilistic loss that teaches classifiers to reject examples routed to
//! them by mistake. Prediction is a beam search over path probability
//! products.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training
//! and the aliases below use `f64`.

pub mod coco;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fixture;
pub mod inference;
pub mod losses;
pub mod memory;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod scalar;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use taxonomy::{LeafPath, NodeId, SplitSpec, Taxonomy};

pub type Net = numeric::TwoLayerNet<f64>;
pub type Adapter = model::FeatureAdapter<f64>;
pub type Head = model::HierarchicalHead<f64>;
pub type Bank = memory::MemoryBank<f64>;
pub type Prediction = inference::PathPrediction<f64>;
pub type Batch = losses::ForegroundBatch<f64>;
