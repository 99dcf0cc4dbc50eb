//! Reference-guided toy diffusion pipeline.
//!
//! A self-contained, CPU-only implementation of dual text+image conditioning
//! for a small latent diffusion model:
//!
//! * [`tape`] — dense tensors with reverse-mode autodiff, the substrate for
//!   everything else.
//! * [`dataset`] — a procedural shapes-and-captions dataset.
//! * [`encoders`] — a frozen contrastive dual encoder providing text tokens,
//!   image tokens, and a shared projected embedding space.
//! * [`aligner`] — the trainable map from image tokens onto the text-token
//!   manifold (InfoNCE + cross-attention reconstruction objective).
//! * [`fusion`] — strategies for merging text and aligned image tokens into
//!   one conditioning sequence.
//! * [`diffusion`] — a toy conditional denoiser with deterministic DDIM
//!   sampling, differentiable end to end.
//! * [`pno`] — test-time optimization of the initial noise and the fused
//!   conditioning against a reference image.
//! * [`metrics`] — CLIP-style score and an LPIPS-style perceptual distance.
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`];
//! the pipeline runs in `f32` (see the aliases below), while verification
//! code can instantiate `f64` for extra headroom.

pub mod aligner;
pub mod dataset;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod pno;
pub mod scalar;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod tokens;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
pub use tokens::{Modality, TokenSeq};

/// Pipeline-default scalar type. Weights, latents, and all persisted
/// artifacts are single precision.
pub type F = f32;

/// Single-precision tensor, the type the pipeline runs on.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by verification code.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tape.
pub type Tape32 = Tape<f32>;
/// Double-precision tape.
pub type Tape64 = Tape<f64>;
