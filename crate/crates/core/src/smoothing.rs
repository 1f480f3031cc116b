//! Denoised smoothing: Gaussian noise, a pluggable denoiser, and averages of
//! explanations and prediction distributions over the denoised samples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certify::Distribution;
use crate::error::{FvitError, Result};
use crate::explain::{token_scores, ExplainOptions, LrpAudit, MethodId, RelevanceMap};
use crate::io::read_fvt;
use crate::rng::{gaussian_sample, Rng};
use crate::tensor::Tensor;
use crate::vit::{softmax, ViTParams};

/// Identifies a noisy sample for denoisers backed by precomputed outputs.
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    pub image_id: &'a str,
    pub index: usize,
}

pub trait Denoiser: Send + Sync {
    fn denoise(&self, noisy: &Tensor, sigma: f64, ctx: SampleContext<'_>) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Denoiser for Identity {
    fn denoise(&self, noisy: &Tensor, _sigma: f64, _ctx: SampleContext<'_>) -> Result<Tensor> {
        Ok(noisy.clone())
    }
}

/// Separable Gaussian blur whose width follows the noise level: a pixel
/// standard deviation of `sigma · 255 / 8` (one pixel at the default noise),
/// truncated at three deviations. Each source pixel's weights are
/// renormalized over the in-bounds taps, so total intensity is preserved.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianBlur;

impl GaussianBlur {
    pub fn pixel_std(sigma: f64) -> f64 {
        sigma * 255.0 / 8.0
    }

    pub fn radius(sigma: f64) -> usize {
        (3.0 * Self::pixel_std(sigma)).ceil() as usize
    }
}

/// Scatter every sample of each `len`-long line (stride `step`) onto its
/// in-bounds neighbors.
fn scatter_pass(src: &[f64], weights: &[f64], lines: &[(usize, usize)], len: usize, step: usize) -> Vec<f64> {
    let r = (weights.len() - 1) / 2;
    let mut out = vec![0.0; src.len()];
    for &(start, _) in lines {
        for i in 0..len {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(len - 1);
            let norm: f64 = (lo..=hi).map(|j| weights[j + r - i]).sum();
            let v = src[start + i * step];
            for j in lo..=hi {
                out[start + j * step] += v * weights[j + r - i] / norm;
            }
        }
    }
    out
}

impl Denoiser for GaussianBlur {
    fn denoise(&self, noisy: &Tensor, sigma: f64, _ctx: SampleContext<'_>) -> Result<Tensor> {
        let (c, h, w) = match noisy.shape() {
            [c, h, w] => (*c, *h, *w),
            other => return Err(FvitError::dim("gaussian blur", other, &[0, 0, 0])),
        };
        let std = Self::pixel_std(sigma);
        let r = Self::radius(sigma);
        if r == 0 {
            return Ok(noisy.clone());
        }
        let weights: Vec<f64> = (0..=2 * r)
            .map(|k| {
                let d = k as f64 - r as f64;
                (-d * d / (2.0 * std * std)).exp()
            })
            .collect();
        let rows: Vec<(usize, usize)> = (0..c * h).map(|i| (i * w, 0)).collect();
        let horiz = scatter_pass(noisy.data(), &weights, &rows, w, 1);
        let cols: Vec<(usize, usize)> = (0..c)
            .flat_map(|ch| (0..w).map(move |x| (ch * h * w + x, 0)))
            .collect();
        let out = scatter_pass(&horiz, &weights, &cols, h, w);
        Tensor::new(noisy.shape().to_vec(), out)
    }
}

/// Precomputed denoiser outputs at `<dir>/<image-id>/<sample-index>.fvt`.
/// The noisy input is only used for its shape.
#[derive(Debug, Clone)]
pub struct ExternalFiles {
    pub dir: PathBuf,
}

impl ExternalFiles {
    pub fn path(&self, ctx: SampleContext<'_>) -> PathBuf {
        self.dir.join(ctx.image_id).join(format!("{}.fvt", ctx.index))
    }
}

impl Denoiser for ExternalFiles {
    fn denoise(&self, noisy: &Tensor, _sigma: f64, ctx: SampleContext<'_>) -> Result<Tensor> {
        let path = self.path(ctx);
        if !path.is_file() {
            return Err(FvitError::MissingInput {
                id: format!("{}/{}", ctx.image_id, ctx.index),
                path,
            });
        }
        let t = read_fvt(&path)?;
        if t.shape() != noisy.shape() {
            return Err(FvitError::dim("external denoiser", t.shape(), noisy.shape()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Identity,
    #[default]
    GaussianBlur,
    ExternalFiles { dir: PathBuf },
}

impl DenoiserSpec {
    pub fn build(&self) -> Box<dyn Denoiser> {
        match self {
            DenoiserSpec::Identity => Box::new(Identity),
            DenoiserSpec::GaussianBlur => Box::new(GaussianBlur),
            DenoiserSpec::ExternalFiles { dir } => Box::new(ExternalFiles { dir: dir.clone() }),
        }
    }

    pub fn external(dir: &Path) -> Self {
        DenoiserSpec::ExternalFiles { dir: dir.to_path_buf() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DDSConfig {
    pub sigma: f64,
    pub samples: usize,
    pub denoiser: DenoiserSpec,
    /// Nominal diffusion steps; recorded, not used by the desk-scale
    /// denoisers.
    pub diffusion_steps: usize,
}

impl Default for DDSConfig {
    fn default() -> Self {
        DDSConfig {
            sigma: 8.0 / 255.0,
            samples: 2,
            denoiser: DenoiserSpec::GaussianBlur,
            diffusion_steps: 45,
        }
    }
}

impl DDSConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(FvitError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.samples == 0 {
            return Err(FvitError::Config("samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// `denoise(x + z_i)` for `i < m`, with `z_i` drawn from substream `i`.
pub fn dds_samples(x: &Tensor, cfg: &DDSConfig, rng: &Rng, image_id: &str) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let denoiser = cfg.denoiser.build();
    (0..cfg.samples)
        .map(|i| {
            let noisy = if cfg.sigma > 0.0 {
                let z = gaussian_sample(&mut rng.substream(i as u64), x.shape(), cfg.sigma)?;
                x.add(&z)?
            } else {
                x.clone()
            };
            denoiser.denoise(&noisy, cfg.sigma, SampleContext { image_id, index: i })
        })
        .collect()
}

fn running_mean(mean: &mut [f64], sample: &[f64], count: usize) {
    for (m, s) in mean.iter_mut().zip(sample) {
        *m += (s - *m) / count as f64;
    }
}

/// Mean of the method's token scores over the denoised samples, explaining
/// `class` on every sample. Keeps the LRP audit with the largest leak.
pub fn smoothed_explanation(
    params: &ViTParams,
    x: &Tensor,
    method: MethodId,
    class: usize,
    cfg: &DDSConfig,
    rng: &Rng,
    image_id: &str,
    opts: &ExplainOptions,
) -> Result<RelevanceMap> {
    if class >= params.config().num_classes {
        return Err(FvitError::param(format!("class {class} out of range")));
    }
    let mut mean: Vec<f64> = Vec::new();
    let mut worst: Option<LrpAudit> = None;
    for (i, sample) in dds_samples(x, cfg, rng, image_id)?.iter().enumerate() {
        let mut trace = params.forward(sample)?;
        if method.needs_gradients() {
            params.backward_class(&mut trace, class)?;
        }
        let (scores, audit) = token_scores(params, &trace, method, class, opts)?;
        if i == 0 {
            mean = scores;
        } else {
            running_mean(&mut mean, &scores, i + 1);
        }
        if let Some(a) = audit {
            if worst.as_ref().is_none_or(|w| a.relative_leak > w.relative_leak) {
                worst = Some(a);
            }
        }
    }
    let mut map = RelevanceMap::new(method, Some(class), mean, params.config())?;
    map.dds = true;
    map.audit = worst;
    Ok(map)
}

/// Mean over the denoised samples of the method's token scores, each
/// normalized to a distribution first. Unlike the mean map this is the
/// output distribution of a randomized mechanism, which the top-k bound
/// needs.
#[allow(clippy::too_many_arguments)]
pub fn smoothed_attention(
    params: &ViTParams,
    x: &Tensor,
    method: MethodId,
    class: usize,
    cfg: &DDSConfig,
    rng: &Rng,
    image_id: &str,
    opts: &ExplainOptions,
) -> Result<Distribution> {
    if class >= params.config().num_classes {
        return Err(FvitError::param(format!("class {class} out of range")));
    }
    let mut mean: Vec<f64> = Vec::new();
    for (i, sample) in dds_samples(x, cfg, rng, image_id)?.iter().enumerate() {
        let mut trace = params.forward(sample)?;
        if method.needs_gradients() {
            params.backward_class(&mut trace, class)?;
        }
        let (scores, _) = token_scores(params, &trace, method, class, opts)?;
        let clamped: Vec<f64> = scores.into_iter().map(|s| s.max(0.0)).collect();
        let w = Distribution::normalized(&clamped)?;
        if i == 0 {
            mean = w.probs().to_vec();
        } else {
            running_mean(&mut mean, w.probs(), i + 1);
        }
    }
    Distribution::normalized(&mean)
}

/// Mean softmax distribution over the denoised samples.
pub fn smoothed_prediction(params: &ViTParams, x: &Tensor, cfg: &DDSConfig, rng: &Rng, image_id: &str) -> Result<Distribution> {
    let mut mean: Vec<f64> = Vec::new();
    for (i, sample) in dds_samples(x, cfg, rng, image_id)?.iter().enumerate() {
        let p = softmax(params.forward(sample)?.logits.data());
        if i == 0 {
            mean = p;
        } else {
            running_mean(&mut mean, &p, i + 1);
        }
    }
    Distribution::new(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::explain;
    use crate::vit::ViTConfig;

    fn ctx() -> SampleContext<'static> {
        SampleContext { image_id: "img", index: 0 }
    }

    fn small_model() -> ViTParams {
        let cfg = ViTConfig {
            image_size: 16,
            layers: 2,
            ..ViTConfig::default()
        };
        let mut p = ViTParams::init(&cfg, &mut Rng::new(3)).unwrap();
        for (name, t) in p.named_tensors_mut() {
            if !name.ends_with("_g") {
                *t = t.scale(15.0);
            }
        }
        p
    }

    fn image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform();
        }
        t
    }

    #[test]
    fn zero_sigma_identity_copies() {
        let x = image(&[1, 4, 4], 1);
        let cfg = DDSConfig {
            sigma: 0.0,
            samples: 3,
            denoiser: DenoiserSpec::Identity,
            ..DDSConfig::default()
        };
        let s = dds_samples(&x, &cfg, &Rng::new(5), "a").unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|t| *t == x));
    }

    #[test]
    fn noise_is_centered() {
        let x = Tensor::filled(&[1, 2, 2], 0.5);
        let sigma = 8.0 / 255.0;
        let cfg = DDSConfig {
            sigma,
            samples: 10_000,
            denoiser: DenoiserSpec::Identity,
            ..DDSConfig::default()
        };
        let samples = dds_samples(&x, &cfg, &Rng::new(44), "a").unwrap();
        for k in 0..4 {
            let mean = samples.iter().map(|s| s.data()[k] - 0.5).sum::<f64>() / 10_000.0;
            assert!(mean.abs() < 3.0 * sigma / 100.0, "pixel {k}: {mean}");
        }
    }

    #[test]
    fn blur_preserves_mass_and_spreads() {
        let mut delta = Tensor::zeros(&[1, 9, 9]);
        delta.data_mut()[0] = 1.0;
        delta.data_mut()[40] = 2.0;
        let out = GaussianBlur.denoise(&delta, 8.0 / 255.0, ctx()).unwrap();
        assert_eq!(out.shape(), delta.shape());
        assert!((out.sum() - 3.0).abs() < 1e-6);
        assert!(out.data()[40] < 2.0 && out.data()[41] > 0.0);
        assert_eq!(GaussianBlur.denoise(&delta, 0.0, ctx()).unwrap(), delta);
    }

    #[test]
    fn external_files_read_and_report_missing() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExternalFiles { dir: dir.path().to_path_buf() };
        let x = image(&[1, 2, 2], 2);
        let err = spec.denoise(&x, 0.1, SampleContext { image_id: "cat", index: 1 }).unwrap_err();
        match err {
            FvitError::MissingInput { id, .. } => assert_eq!(id, "cat/1"),
            other => panic!("unexpected {other}"),
        }
        std::fs::create_dir_all(dir.path().join("cat")).unwrap();
        crate::io::write_fvt(&dir.path().join("cat/1.fvt"), &x).unwrap();
        let back = spec.denoise(&x, 0.1, SampleContext { image_id: "cat", index: 1 }).unwrap();
        assert_eq!(back.shape(), x.shape());
    }

    #[test]
    fn zero_sigma_smoothing_is_vanilla() {
        let p = small_model();
        let x = image(&p.config().image_shape(), 4);
        let cfg = DDSConfig {
            sigma: 0.0,
            samples: 3,
            denoiser: DenoiserSpec::Identity,
            ..DDSConfig::default()
        };
        let opts = ExplainOptions::default();
        for m in MethodId::ALL {
            let vanilla = explain(&p, &x, m, Some(1), &opts).unwrap();
            let smooth = smoothed_explanation(&p, &x, m, 1, &cfg, &Rng::new(1), "x", &opts).unwrap();
            assert_eq!(vanilla.token_scores, smooth.token_scores, "{m}");
            assert_eq!(vanilla.pixel_map, smooth.pixel_map);
            assert!(smooth.dds);
        }
        let d = smoothed_prediction(&p, &x, &cfg, &Rng::new(1), "x").unwrap();
        assert_eq!(d.probs(), softmax(p.forward(&x).unwrap().logits.data()).as_slice());
    }

    #[test]
    fn two_samples_average_independent_maps() {
        let p = small_model();
        let x = image(&p.config().image_shape(), 5);
        let cfg = DDSConfig {
            samples: 2,
            ..DDSConfig::default()
        };
        let rng = Rng::new(7);
        let opts = ExplainOptions::default();
        let samples = dds_samples(&x, &cfg, &rng, "x").unwrap();
        for m in [MethodId::Rollout, MethodId::TransformerAttribution] {
            let per: Vec<RelevanceMap> = samples.iter().map(|s| explain(&p, s, m, Some(2), &opts).unwrap()).collect();
            let smooth = smoothed_explanation(&p, &x, m, 2, &cfg, &rng, "x", &opts).unwrap();
            for (k, v) in smooth.token_scores.iter().enumerate() {
                let want = (per[0].token_scores[k] + per[1].token_scores[k]) / 2.0;
                assert!((v - want).abs() < 1e-12);
            }
        }
        let one = DDSConfig { samples: 1, ..cfg.clone() };
        let single = smoothed_explanation(&p, &x, MethodId::Rollout, 0, &one, &rng, "x", &opts).unwrap();
        assert_eq!(single.token_scores, explain(&p, &samples[0], MethodId::Rollout, Some(0), &opts).unwrap().token_scores);

        let d = smoothed_prediction(&p, &x, &cfg, &rng, "x").unwrap();
        let a = softmax(p.forward(&samples[0]).unwrap().logits.data());
        let b = softmax(p.forward(&samples[1]).unwrap().logits.data());
        for k in 0..a.len() {
            assert!((d.probs()[k] - (a[k] + b[k]) / 2.0).abs() < 1e-12);
        }
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn smoothing_is_seed_deterministic() {
        let p = small_model();
        let x = image(&p.config().image_shape(), 6);
        let cfg = DDSConfig::default();
        let opts = ExplainOptions::default();
        let a = smoothed_explanation(&p, &x, MethodId::Lrp, 0, &cfg, &Rng::new(9), "x", &opts).unwrap();
        let b = smoothed_explanation(&p, &x, MethodId::Lrp, 0, &cfg, &Rng::new(9), "x", &opts).unwrap();
        assert_eq!(a, b);
    }
}
