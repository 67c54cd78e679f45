//! Machine unlearning for small denoising diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, Adam, checkpoints.
//! - [`diffusion`]: noise schedule, ε-prediction denoiser, DDPM loss and sampler.
//! - [`data`]: contaminated 2-D mixtures, forget/retain splits, IDX rasters.
//! - [`siss`]: the importance-sampled mixture unlearning loss with a fixed λ.
//! - [`adaptive`]: variational inference of λ from the unlearning context.
//! - [`rl`]: λ selection as a sequential decision problem (PPO and SAC).
//! - [`sfd`]: score forgetting distillation into a one-step generator.
//! - [`metrics`]: Fréchet distance, kernel MMD, Bayes-oracle forget rate, SSIM.
//! - [`harness`]: run configuration, pipelines, persistence and reports.

pub mod adaptive;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rl;
pub mod rng;
pub mod sfd;
pub mod siss;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Adam, AdamConfig, Graph, NodeId, ParamSet, Tensor};
