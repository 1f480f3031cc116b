//! ℓ∞ PGD against the classifier and relevance-ordered pixel masking.

use serde::{Deserialize, Serialize};

use crate::error::{FvitError, Result};
use crate::tensor::Tensor;
use crate::vit::{cross_entropy, Classifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub norm: Norm,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            norm: Norm::Linf,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("step_size", self.step_size)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FvitError::param(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD from `x` (no random start), calling `on_step` with every iterate.
pub fn pgd_with<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    label: usize,
    cfg: &PgdConfig,
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    if label >= model.num_classes() {
        return Err(FvitError::param(format!("label {label} out of range")));
    }
    if cfg.epsilon == 0.0 || cfg.steps == 0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    for step in 0..cfg.steps {
        let (_, dlogits) = cross_entropy(&model.logits(&adv)?, label);
        let grad = model.input_vjp(&adv, &dlogits)?;
        let next: Vec<f64> = adv
            .data()
            .iter()
            .zip(grad.data())
            .zip(x.data())
            .map(|((&a, &g), &x0)| {
                let moved = a + cfg.step_size * sign(g);
                let delta = (moved - x0).clamp(-cfg.epsilon, cfg.epsilon);
                (x0 + delta).clamp(0.0, 1.0)
            })
            .collect();
        adv = Tensor::new(x.shape().to_vec(), next)?;
        on_step(step, &adv);
    }
    Ok(adv)
}

pub fn pgd<C: Classifier + ?Sized>(model: &C, x: &Tensor, label: usize, cfg: &PgdConfig) -> Result<Tensor> {
    pgd_with(model, x, label, cfg, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Most relevant pixels first.
    Positive,
    /// Least relevant pixels first.
    Negative,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Positive => "positive",
            Direction::Negative => "negative",
        }
    }
}

/// The masking grid `0.1, 0.2, …, 0.9`.
pub const FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Number of pixels masked at `fraction`: `⌊fraction · n⌋` for fractions on
/// the tenths grid.
pub fn mask_count(fraction: f64, n: usize) -> Result<usize> {
    let tenths = (fraction * 10.0).round();
    if !(1.0..=9.0).contains(&tenths) || (fraction * 10.0 - tenths).abs() > 1e-9 {
        return Err(FvitError::param(format!("fraction {fraction} not in 0.1..0.9 by tenths")));
    }
    Ok(tenths as usize * n / 10)
}

/// Zeroes the selected fraction of pixels in every channel. Pixels are
/// ranked by `relevance` (`[H, W]`), ties broken by raster index.
pub fn perturb_mask(x: &Tensor, relevance: &Tensor, fraction: f64, direction: Direction) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(FvitError::dim("perturb_mask", other, &[0, 0, 0])),
    };
    if relevance.shape() != [h, w] {
        return Err(FvitError::dim("perturb_mask", relevance.shape(), &[h, w]));
    }
    let n = h * w;
    let count = mask_count(fraction, n)?;
    let r = relevance.data();
    let mut order: Vec<usize> = (0..n).collect();
    match direction {
        Direction::Positive => order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b))),
        Direction::Negative => order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b))),
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for &p in &order[..count] {
        for ch in 0..c {
            data[ch * n + p] = 0.0;
        }
    }
    Ok(out)
}
