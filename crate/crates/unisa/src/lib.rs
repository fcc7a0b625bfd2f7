//! Label-free few-shot continual learning on synthetic task sequences.
//!
//! The engine trains a small feature extractor without labels by scattering
//! cluster prototypes and aligning positive pairs against a momentum target
//! network. The first (base) task searches for flat-wide minima by averaging
//! gradients over bounded weight perturbations and regularizing head outputs
//! toward the uniform distribution; later N-way K-shot tasks stay inside the
//! flat region by clamping, fight data scarcity with synthetic latent samples
//! drawn inside per-cluster balls, and fight forgetting with an
//! importance-weighted quadratic penalty. Labeled samples are only ever used
//! to name clusters at inference time.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the `unisa`
//! binary (`run`, `ablate`, `bench`, `oracle`).

pub mod ball;
pub mod clustering;
pub mod config;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod runlog;
pub mod tensor;
pub mod trainer;

pub use tensor::{DenseTensor, NodeId, TensorError, ValueGraph};
