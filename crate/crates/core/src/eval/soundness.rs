use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::protocol::{image_id, image_rng, test_set};
use crate::certify::{certified_radius, certify_faithful, topk_overlap, Distribution, FaithfulnessParams};
use crate::error::Result;
use crate::explain::{ExplainOptions, MethodId};
use crate::rng::Rng;
use crate::smoothing::{smoothed_attention, smoothed_prediction, DDSConfig};
use crate::tensor::Tensor;
use crate::vit::ViTParams;

/// Empirical check of the certificates of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSoundness {
    pub image: String,
    /// ℓ2 radius certified (0 when no certificate was issued).
    pub radius: f64,
    pub certified: bool,
    pub trials: usize,
    pub violations: usize,
    /// Smallest clean-vs-perturbed top-k overlap seen.
    pub min_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub method: MethodId,
    pub images: Vec<ImageSoundness>,
}

impl SoundnessReport {
    pub fn certified(&self) -> usize {
        self.images.iter().filter(|i| i.certified).count()
    }

    pub fn trials(&self) -> usize {
        self.images.iter().map(|i| i.trials).sum()
    }

    pub fn violations(&self) -> usize {
        self.images.iter().map(|i| i.violations).sum()
    }
}

/// `x + δ` with `δ` uniform in direction and `‖δ‖₂` uniform in `[0, radius]`,
/// clipped to `[0, 1]` (clipping only shrinks `δ`).
fn l2_perturbation(x: &Tensor, radius: f64, rng: &mut Rng) -> Tensor {
    let dir: Vec<f64> = (0..x.len()).map(|_| rng.standard_normal()).collect();
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    let scale = radius * rng.uniform() / norm;
    let data = x.data().iter().zip(dir).map(|(a, d)| (a + scale * d).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Smoothed prediction and smoothed attention of the predicted class.
pub fn smoothed_outputs(
    params: &ViTParams,
    x: &Tensor,
    method: MethodId,
    dds: &DDSConfig,
    rng: &Rng,
    id: &str,
    opts: &ExplainOptions,
) -> Result<(Distribution, Distribution)> {
    let p = smoothed_prediction(params, x, dds, rng, id)?;
    let w = smoothed_attention(params, x, method, p.argmax(), dds, rng, id, opts)?;
    Ok((p, w))
}

/// For each of the first `images` test images: certifies the smoothed
/// prediction and the smoothed `method` attention at the largest radius up
/// to `R` that admits a certificate, then draws `trials` random ℓ2
/// perturbations within it. A trial violates the certificate when the
/// smoothed argmax changes or the top-k overlap drops to `β` or below.
/// `samples` overrides the smoothing sample count, since the certificate
/// speaks about the expectation. Clean and perturbed inputs share the
/// smoothing noise.
#[allow(clippy::too_many_arguments)]
pub fn certificate_soundness(
    params: &ViTParams,
    cfg: &ExperimentConfig,
    seed: u64,
    method: MethodId,
    images: usize,
    trials: usize,
    samples: usize,
) -> Result<SoundnessReport> {
    let dds = DDSConfig { samples, ..cfg.dds.clone() };
    let samples = test_set(cfg, seed)?;
    let opts = ExplainOptions { variant: cfg.eval.variant };
    let fp = &cfg.faithfulness;
    let root = Rng::new(seed).substream(40);
    let mut out = Vec::new();
    for (i, s) in samples.iter().take(images).enumerate() {
        let (rng, id) = (image_rng(seed, i), image_id(i));
        let (p, w) = smoothed_outputs(params, &s.image, method, &dds, &rng, &id, &opts)?;
        let sup = certified_radius(dds.sigma, &w, &p, fp)?;
        let radius = if sup > fp.r { fp.r } else { sup * (1.0 - 1e-6) };
        let cert = certify_faithful(dds.sigma, &w, &p, &FaithfulnessParams { r: radius, ..fp.clone() })?;
        let mut report = ImageSoundness {
            image: id.clone(),
            radius: if cert.faithful { radius } else { 0.0 },
            certified: cert.faithful && radius > 0.0,
            trials: 0,
            violations: 0,
            min_overlap: 1.0,
        };
        if report.certified {
            let mut noise = root.substream(i as u64);
            for _ in 0..trials {
                let x2 = l2_perturbation(&s.image, radius, &mut noise);
                let (p2, w2) = smoothed_outputs(params, &x2, method, &dds, &rng, &id, &opts)?;
                let overlap = topk_overlap(w.probs(), w2.probs(), fp.k)?;
                report.min_overlap = report.min_overlap.min(overlap);
                report.trials += 1;
                report.violations += (p2.argmax() != p.argmax() || overlap <= fp.beta) as usize;
            }
        }
        out.push(report);
    }
    Ok(SoundnessReport { method, images: out })
}
