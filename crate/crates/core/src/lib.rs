//! Desk-scale model of an embedded 4D-radar 3D-detection pipeline whose
//! accelerator only accepts rank-4 tensors.
//!
//! The centerpiece is [`lowering`]: a compiler pass that rewrites Conv3D
//! graphs over rank-5 `(B, C, D, H, W)` tensors into numerically equivalent
//! rank-4-only graphs via depth folding, plus a verifier that checks the
//! rewrite against the naive reference executor. Around it sit the stages a
//! real deployment needs: dense voxelization ([`voxel`]), rotated-box
//! geometry ([`geometry`]), anchor decoding and two-stage NMS ([`postproc`]),
//! AP scoring ([`eval`]), and throughput profiling ([`pipeline`]).

pub mod config;
pub mod demo;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod graph;
pub mod lowering;
pub mod pipeline;
pub mod postproc;
pub mod quant;
pub mod records;
pub mod scalar;
pub mod tensor;
pub mod voxel;

pub use scalar::Scalar;
pub use tensor::{DenseTensor, Shape};

/// Element type used by every graph tensor in this crate: 32-bit reals,
/// no mixed precision. Kernels still accumulate in f64 internally.
pub type Tensor = DenseTensor<f32>;

/// Element type for box geometry, which is always carried out in f64
/// regardless of tensor precision.
pub type GeomReal = f64;
