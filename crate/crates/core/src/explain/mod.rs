//! Token relevance maps from a recorded forward (and backward) pass.
//!
//! Every method returns one nonnegative score per patch token (the CLS token
//! is dropped); [`RelevanceMap`] adds the upsampled, min-max normalized
//! pixel map.

mod attention;
mod lrp;

pub use attention::{
    aggregate_rollout, attribution_rollout, attribution_rollout_with_weights, gradcam,
    head_weights, raw_attention, rollout, ta_from_parts,
};
pub use lrp::{linear_relprop, lrp, transformer_attribution, LinearRule, LrpAudit, LrpOutput};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FvitError, Result};
use crate::tensor::Tensor;
use crate::vit::{argmax, ForwardTrace, ViTConfig, ViTParams};

/// Relative tolerance of the LRP conservation audit.
pub const CONSERVATION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    RawAttention,
    Rollout,
    #[serde(rename = "gradcam")]
    GradCam,
    Lrp,
    TransformerAttribution,
    AttributionRollout,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::RawAttention,
        MethodId::Rollout,
        MethodId::GradCam,
        MethodId::Lrp,
        MethodId::TransformerAttribution,
        MethodId::AttributionRollout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::RawAttention => "raw_attention",
            MethodId::Rollout => "rollout",
            MethodId::GradCam => "gradcam",
            MethodId::Lrp => "lrp",
            MethodId::TransformerAttribution => "transformer_attribution",
            MethodId::AttributionRollout => "attribution_rollout",
        }
    }

    /// Whether the method reads attention gradients.
    pub fn needs_gradients(self) -> bool {
        matches!(self, MethodId::GradCam | MethodId::TransformerAttribution)
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = FvitError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let alias = match key.as_str() {
            "raw" => "raw_attention",
            "ta" => "transformer_attribution",
            "ar" => "attribution_rollout",
            other => other,
        };
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| FvitError::Config(format!("unknown method {s:?}")))
    }
}

/// The two implementation lineages of rollout and LRP. `HuDemo` rolls out
/// every layer and propagates linear layers with the signed z-rule;
/// `Chefer` skips the first layer in rollout and uses the α=1, β=0 rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    HuDemo,
    Chefer,
}

impl Variant {
    pub fn rollout_start_layer(self) -> usize {
        match self {
            Variant::HuDemo => 0,
            Variant::Chefer => 1,
        }
    }

    pub fn linear_rule(self) -> LinearRule {
        match self {
            Variant::HuDemo => LinearRule::Z,
            Variant::Chefer => LinearRule::AlphaOneBetaZero,
        }
    }
}

impl FromStr for Variant {
    type Err = FvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "hu-demo" | "hudemo" => Ok(Variant::HuDemo),
            "chefer" => Ok(Variant::Chefer),
            other => Err(FvitError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub method: MethodId,
    /// Class explained; `None` for class-independent methods.
    pub class: Option<usize>,
    pub dds: bool,
    pub token_scores: Vec<f64>,
    /// `[H, W]` in `[0, 1]`.
    pub pixel_map: Tensor,
    pub audit: Option<LrpAudit>,
}

impl RelevanceMap {
    pub fn new(method: MethodId, class: Option<usize>, token_scores: Vec<f64>, cfg: &ViTConfig) -> Result<Self> {
        let token_scores: Vec<f64> = token_scores.into_iter().map(|s| s.max(0.0)).collect();
        let pixel_map = upsample_to_pixels(&token_scores, cfg)?;
        Ok(RelevanceMap {
            method,
            class,
            dds: false,
            token_scores,
            pixel_map,
            audit: None,
        })
    }
}

/// Nearest-neighbor upsampling of patch scores to an `[H, W]` map, then
/// min-max normalization. A constant map normalizes to all zeros.
pub fn upsample_to_pixels(token_scores: &[f64], cfg: &ViTConfig) -> Result<Tensor> {
    let (g, p, s) = (cfg.grid(), cfg.patch_size, cfg.image_size);
    if token_scores.len() != g * g {
        return Err(FvitError::dim("upsample", &[token_scores.len()], &[g * g]));
    }
    let lo = token_scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = token_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = vec![0.0; s * s];
    for (y, row) in out.chunks_mut(s).enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let t = token_scores[(y / p) * g + x / p];
            *v = if span > 0.0 { (t - lo) / span } else { 0.0 };
        }
    }
    Tensor::new(vec![s, s], out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainOptions {
    pub variant: Variant,
}

/// Token scores of `method` on a trace. Gradient methods need the trace's
/// attention gradients for `class`.
pub fn token_scores(
    params: &ViTParams,
    trace: &ForwardTrace,
    method: MethodId,
    class: usize,
    opts: &ExplainOptions,
) -> Result<(Vec<f64>, Option<LrpAudit>)> {
    Ok(match method {
        MethodId::RawAttention => (raw_attention(trace)?, None),
        MethodId::Rollout => (rollout(trace, opts.variant)?, None),
        MethodId::GradCam => (gradcam(trace)?, None),
        MethodId::AttributionRollout => (attribution_rollout(trace, opts.variant)?, None),
        MethodId::Lrp => {
            let out = lrp(params, trace, class, opts.variant.linear_rule())?;
            (out.token_scores, Some(out.audit))
        }
        MethodId::TransformerAttribution => {
            let (scores, audit) = transformer_attribution(params, trace, class)?;
            (scores, Some(audit))
        }
    })
}

/// Forward, backward (when the method needs it) and explanation of one
/// image. `class` defaults to the predicted class.
pub fn explain(
    params: &ViTParams,
    image: &Tensor,
    method: MethodId,
    class: Option<usize>,
    opts: &ExplainOptions,
) -> Result<RelevanceMap> {
    let mut trace = params.forward(image)?;
    let class = class.unwrap_or_else(|| argmax(trace.logits.data()));
    if method.needs_gradients() {
        params.backward_class(&mut trace, class)?;
    }
    let (scores, audit) = token_scores(params, &trace, method, class, opts)?;
    let mut map = RelevanceMap::new(method, Some(class), scores, params.config())?;
    map.audit = audit;
    Ok(map)
}
