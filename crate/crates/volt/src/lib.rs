//! Multi-view 3D voxel reconstruction with a from-scratch volume transformer.
//!
//! A set of per-view embeddings is fused by a permutation-equivariant
//! encoder, decoded by learnable volume queries into per-token occupancy
//! logits, and stitched into a probabilistic voxel grid. The `evolt` variant
//! adds a view-divergence enhancing skip path in the encoder attention; the
//! `volt` variant is the plain multi-head baseline. Everything — tensors,
//! reverse-mode gradients, AdamW, metrics, diagnostics, and the synthetic
//! dataset — is implemented here in double precision, with finite
//! differences as the gradient oracle.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Result, VoltError};
pub use tensor::Tensor;
