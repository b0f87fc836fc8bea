//! Layer-local similarity learning on dense MLPs.
//!
//! This crate implements the FAUST family of backprop-free trainers
//! (vanilla triplet, vanilla tuplet, representative tuplet) together with
//! forward-forward and end-to-end backprop baselines, over a small dense
//! linear-algebra core. Every layer owns its weights, its embedding
//! projection, and its optimizer state; activations move forward between
//! layers with no gradient linkage, so all learning signals are local.
//!
//! Determinism is a design constraint throughout: given the same seeds and
//! configuration, training runs, samplers, and log files are bit-identical
//! on one platform, independent of thread count.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod seeds;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use config::{DataSource, InferenceDistance, RunConfig, Variant};
pub use dataset::{LabeledDataset, RepresentativeSet, TripletBatch, TupletBatch};
pub use error::{Error, Result};
pub use infer::ReferenceSet;
pub use model::{ForwardSource, LocalLayer, Model};
pub use norm::NormMode;
pub use tensor::{AdamState, DenseMatrix};
pub use train::{train, EpochLog, TrainOutput};
