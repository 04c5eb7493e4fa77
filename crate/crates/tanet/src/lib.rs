//! Temporal-attention change detection for street-scene image pairs.
//!
//! The crate is built around a small dense-tensor engine with reverse-mode
//! differentiation ([`graph::Graph`]), the temporal attention operator and its
//! strip-scoped variants ([`attention`]), a siamese encoder/decoder network
//! ([`network`]), dataset ingestion and a seeded synthetic generator
//! ([`data`]), plus training, metrics and analytic parameter/MAC accounting.
//!
//! Everything is CPU-only. Data-parallel kernels run on rayon when the
//! `parallel` feature (default) is enabled and fall back to sequential loops
//! otherwise; both paths produce bit-identical results.

pub mod attention;
pub mod data;
pub mod elem;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod network;
pub mod profile;
pub mod rng;
pub mod shape;
pub mod store;
pub mod tensor;
pub mod train;

pub use elem::Elem;
pub use error::{Error, Result};
pub use exec::Exec;
pub use graph::{Graph, Var};
pub use shape::Shape;
pub use store::ParamStore;
pub use tensor::Tensor;
