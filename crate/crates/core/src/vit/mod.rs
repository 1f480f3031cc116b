//! A desk-scale Vision Transformer whose passes record everything the
//! explainers need: per-layer, per-head attention, attention gradients and
//! token activations.
//!
//! Architecture: non-overlapping patch embedding, a learned CLS token and
//! learned positional embeddings, pre-norm blocks
//! (`h + Attn(LN(h))`, then `h + MLP(LN(h))`), a final layer norm and a
//! linear head on the CLS token.

mod backward;
mod forward;
mod params;
mod train;

pub use backward::Gradients;
pub use forward::{ForwardTrace, LayerTrace};
pub use params::{BlockParams, ViTParams};
pub use train::{accuracy, train, EpochStats, Optimizer, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{FvitError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            layers: 3,
            num_classes: 4,
            mlp_ratio: 2,
            channels: 1,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
            ("mlp_ratio", self.mlp_ratio),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(FvitError::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(FvitError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(FvitError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the CLS token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Anything PGD and smoothing can attack or average: logits plus their
/// input-space VJP.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>>;

    /// `(∂logits/∂x)ᵀ · dlogits`.
    fn input_vjp(&self, x: &Tensor, dlogits: &[f64]) -> Result<Tensor>;

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

impl Classifier for ViTParams {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits.into_data())
    }

    fn input_vjp(&self, x: &Tensor, dlogits: &[f64]) -> Result<Tensor> {
        let trace = self.forward(x)?;
        Ok(self.backward(&trace, dlogits, false)?.input)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[label].max(1e-300).ln();
    p[label] -= 1.0;
    (loss, p)
}

pub fn init_params(cfg: &ViTConfig, rng: &mut Rng) -> Result<ViTParams> {
    ViTParams::init(cfg, rng)
}

#[cfg(test)]
mod tests;
