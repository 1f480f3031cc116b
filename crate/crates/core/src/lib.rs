//! Faithful attention explanations for a desk-scale Vision Transformer.
//!
//! [`vit`] is a small pre-norm ViT that records attention and attention
//! gradients. [`explain`] turns a trace into token relevance maps with six
//! methods. [`smoothing`] averages explanations over noisy, denoised copies
//! of the input, [`attack`] perturbs inputs with PGD, and [`certify`] bounds
//! how far an explanation can move under ℓ2 noise using Rényi divergence.
//! [`eval`] ties these together into segmentation and perturbation
//! experiments.

pub mod attack;
pub mod certify;
pub mod error;
pub mod eval;
pub mod explain;
pub mod io;
pub mod nn;
pub mod rng;
pub mod smoothing;
pub mod tensor;
pub mod vit;

pub use error::{FvitError, Result};
pub use rng::Rng;
pub use tensor::Tensor;
pub use vit::{ForwardTrace, ViTConfig, ViTParams};
