use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{data_seeds, ExperimentConfig};
use super::dataset::{gen_dataset, labeled, SegSample};
use super::metrics::{average_precision, miou, perturbation_auc, pixel_accuracy};
use crate::attack::{mask_count, perturb_mask, pgd, Direction, PgdConfig, FRACTIONS};
use crate::certify::{topk_overlap, topk_indices};
use crate::error::{FvitError, Result};
use crate::explain::{explain, ExplainOptions, MethodId, RelevanceMap};
use crate::rng::Rng;
use crate::smoothing::{dds_samples, smoothed_explanation, smoothed_prediction, DDSConfig, DenoiserSpec};
use crate::tensor::Tensor;
use crate::vit::{train, Classifier, TrainOutcome, ViTParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dds: bool,
    pub model_seed: u64,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| FvitError::Format(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| FvitError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| FvitError::Format(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| FvitError::Format(e.to_string())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub params: ViTParams,
    /// Empty when the parameters were loaded.
    pub outcome: Option<TrainOutcome>,
    pub test_accuracy: f64,
    pub seconds: f64,
}

/// Loads `eval.model_path` when set, otherwise trains from the run seed.
/// Test accuracy is measured on the run's test set either way.
pub fn prepare_model(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedModel> {
    let start = Instant::now();
    let test = labeled(&test_set(cfg, seed)?);
    if let Some(stem) = &cfg.eval.model_path {
        let params = ViTParams::load(stem)?;
        if params.config() != &cfg.vit {
            return Err(FvitError::Config(format!("{} holds a different architecture", stem.display())));
        }
        let test_accuracy = crate::vit::accuracy(&params, &test)?;
        return Ok(PreparedModel {
            params,
            outcome: None,
            test_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let root = Rng::new(seed);
    let init = ViTParams::init(&cfg.vit, &mut root.substream(10))?;
    let (train_seed, _) = data_seeds(seed);
    let mut train_set = labeled(&gen_dataset(train_seed, cfg.eval.train_size, &cfg.eval.data)?);
    if cfg.eval.train_on_denoised && !matches!(cfg.dds.denoiser, DenoiserSpec::ExternalFiles { .. }) {
        denoise_every_other(&mut train_set, &cfg.dds, &root.substream(12))?;
    }
    let outcome = train(&init, &train_set, &[], &cfg.train, &mut root.substream(11))?;
    let test_accuracy = crate::vit::accuracy(&outcome.params, &test)?;
    Ok(PreparedModel {
        params: outcome.params.clone(),
        outcome: Some(outcome),
        test_accuracy,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Replaces every second training image by one noisy-and-denoised draw, so
/// the model also sees what the smoothing pipeline feeds it.
fn denoise_every_other(set: &mut [(Tensor, usize)], dds: &DDSConfig, rng: &Rng) -> Result<()> {
    let one = DDSConfig { samples: 1, ..dds.clone() };
    for (i, (x, _)) in set.iter_mut().enumerate().skip(1).step_by(2) {
        let id = format!("train-{i:05}");
        *x = dds_samples(x, &one, &rng.substream(i as u64), &id)?.remove(0);
    }
    Ok(())
}

pub fn test_set(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SegSample>> {
    let (_, test_seed) = data_seeds(seed);
    gen_dataset(test_seed, cfg.eval.test_size, &cfg.eval.data)
}

/// Smoothing noise of test image `index`.
pub fn image_rng(seed: u64, index: usize) -> Rng {
    Rng::new(seed).substream(20).substream(index as u64)
}

pub fn image_id(index: usize) -> String {
    format!("test-{index:04}")
}

/// Explanation of the model's own decision on `x`: the argmax of the logits
/// without smoothing, the argmax of the smoothed prediction with it.
pub fn explain_decision(
    params: &ViTParams,
    x: &Tensor,
    method: MethodId,
    dds: Option<&DDSConfig>,
    rng: &Rng,
    id: &str,
    opts: &ExplainOptions,
) -> Result<RelevanceMap> {
    match dds {
        None => explain(params, x, method, None, opts),
        Some(d) => {
            let class = smoothed_prediction(params, x, d, rng, id)?.argmax();
            smoothed_explanation(params, x, method, class, d, rng, id, opts)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScores {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub average_precision: Option<f64>,
}

pub fn score_segmentation(map: &RelevanceMap, mask: &Tensor) -> Result<SegmentationScores> {
    Ok(SegmentationScores {
        pixel_accuracy: pixel_accuracy(&map.pixel_map, mask)?,
        miou: miou(&map.pixel_map, mask)?,
        average_precision: average_precision(&map.pixel_map, mask)?,
    })
}

/// PGD on every sample against its label.
pub fn attack_all(params: &ViTParams, samples: &[SegSample], pgd_cfg: &PgdConfig) -> Result<Vec<Tensor>> {
    samples.par_iter().map(|s| pgd(params, &s.image, s.label, pgd_cfg)).collect()
}

fn dds_option(cfg: &ExperimentConfig, on: bool) -> Option<&DDSConfig> {
    on.then_some(&cfg.dds)
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in v {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

struct RowSink<'a> {
    rows: Vec<ResultRow>,
    seed: u64,
    hash: &'a str,
}

impl RowSink<'_> {
    fn push(&mut self, method: MethodId, dds: bool, metric: String, value: f64) {
        self.rows.push(ResultRow {
            method: method.name().to_string(),
            dds,
            model_seed: self.seed,
            metric,
            value,
            config_hash: self.hash.to_string(),
        });
    }
}

/// Per-image segmentation scores of `method` on PGD-attacked test images.
pub fn segmentation_scores(
    params: &ViTParams,
    cfg: &ExperimentConfig,
    seed: u64,
    samples: &[SegSample],
    attacked: &[Tensor],
    method: MethodId,
    dds: bool,
) -> Result<Vec<SegmentationScores>> {
    let opts = ExplainOptions { variant: cfg.eval.variant };
    samples
        .par_iter()
        .zip(attacked)
        .enumerate()
        .map(|(i, (s, x))| {
            let map = explain_decision(params, x, method, dds_option(cfg, dds), &image_rng(seed, i), &image_id(i), &opts)?;
            score_segmentation(&map, &s.mask)
        })
        .collect()
}

/// Segmentation of PGD-attacked test images by each method, with and
/// without smoothing; one row per mean metric.
pub fn run_segmentation(params: &ViTParams, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let hash = cfg.hash(seed);
    let samples = test_set(cfg, seed)?;
    let attacked = attack_all(params, &samples, &cfg.pgd)?;
    let mut sink = RowSink { rows: Vec::new(), seed, hash: &hash };
    for &method in &cfg.eval.methods {
        for dds in [false, true] {
            let scores = segmentation_scores(params, cfg, seed, &samples, &attacked, method, dds)?;
            sink.push(method, dds, "pixel_accuracy".into(), mean(scores.iter().map(|s| s.pixel_accuracy)).unwrap_or(0.0));
            sink.push(method, dds, "miou".into(), mean(scores.iter().map(|s| s.miou)).unwrap_or(0.0));
            if let Some(ap) = mean(scores.iter().filter_map(|s| s.average_precision)) {
                sink.push(method, dds, "map".into(), ap);
            }
        }
    }
    Ok(sink.rows)
}

/// The run's decision on `x`: the logits argmax without smoothing, the
/// smoothed argmax with it.
pub fn decide(params: &ViTParams, x: &Tensor, dds: Option<&DDSConfig>, rng: &Rng, id: &str) -> Result<usize> {
    match dds {
        None => params.predict(x),
        Some(d) => Ok(smoothed_prediction(params, x, d, rng, id)?.argmax()),
    }
}

/// Whether the decision is still `label` after masking `x` at each of the
/// nine fractions. Masked copies get their own sample ids, `<id>-<dir>-f<f>`.
#[allow(clippy::too_many_arguments)]
pub fn masking_hits(
    params: &ViTParams,
    x: &Tensor,
    label: usize,
    relevance: &Tensor,
    direction: Direction,
    dds: Option<&DDSConfig>,
    rng: &Rng,
    id: &str,
) -> Result<[bool; 9]> {
    let mut hits = [false; 9];
    for (h, &f) in hits.iter_mut().zip(&FRACTIONS) {
        let masked = perturb_mask(x, relevance, f, direction)?;
        let masked_id = format!("{id}-{}-f{f:.1}", direction.name());
        *h = decide(params, &masked, dds, rng, &masked_id)? == label;
    }
    Ok(hits)
}

/// Mean top-1 accuracy per fraction over images.
pub fn accuracy_curve(hits: &[[bool; 9]]) -> Vec<f64> {
    (0..9)
        .map(|j| hits.iter().filter(|h| h[j]).count() as f64 / hits.len().max(1) as f64)
        .collect()
}

fn radius_tag(r: f64) -> String {
    let units = r * 255.0;
    if (units - units.round()).abs() < 1e-9 {
        format!("eps{}", units.round() as i64)
    } else {
        format!("eps{r}")
    }
}

/// Masking curves (positive, negative) of `method` per attacked image;
/// `None` for images the run already misclassifies unmasked, which the
/// curves leave out.
pub fn perturbation_hits(
    params: &ViTParams,
    cfg: &ExperimentConfig,
    seed: u64,
    samples: &[SegSample],
    attacked: &[Tensor],
    method: MethodId,
    dds: bool,
) -> Result<Vec<Option<[[bool; 9]; 2]>>> {
    let opts = ExplainOptions { variant: cfg.eval.variant };
    let dds = dds_option(cfg, dds);
    samples
        .par_iter()
        .zip(attacked)
        .enumerate()
        .map(|(i, (s, x))| {
            let (rng, id) = (image_rng(seed, i), image_id(i));
            if decide(params, x, dds, &rng, &id)? != s.label {
                return Ok(None);
            }
            let map = explain_decision(params, x, method, dds, &rng, &id, &opts)?;
            Ok(Some([
                masking_hits(params, x, s.label, &map.pixel_map, Direction::Positive, dds, &rng, &id)?,
                masking_hits(params, x, s.label, &map.pixel_map, Direction::Negative, dds, &rng, &id)?,
            ]))
        })
        .collect()
}

/// The two-stage protocol: PGD at each radius, then masking by relevance.
/// Rows: unmasked accuracy, the number of correctly classified images, and
/// over those images the accuracy per fraction and direction plus its AUC.
pub fn run_classification(params: &ViTParams, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let hash = cfg.hash(seed);
    let samples = test_set(cfg, seed)?;
    let n_pixels = cfg.vit.image_size * cfg.vit.image_size;
    for &f in &FRACTIONS {
        mask_count(f, n_pixels)?;
    }
    let mut sink = RowSink { rows: Vec::new(), seed, hash: &hash };
    for &radius in &cfg.eval.attack_radii {
        let pgd_cfg = PgdConfig { epsilon: radius, ..cfg.pgd.clone() };
        let attacked = attack_all(params, &samples, &pgd_cfg)?;
        let tag = radius_tag(radius);
        for &method in &cfg.eval.methods {
            for dds in [false, true] {
                let hits = perturbation_hits(params, cfg, seed, &samples, &attacked, method, dds)?;
                let correct: Vec<[[bool; 9]; 2]> = hits.into_iter().flatten().collect();
                sink.push(method, dds, format!("top1/{tag}/unmasked"), correct.len() as f64 / samples.len() as f64);
                sink.push(method, dds, format!("count/{tag}/correct"), correct.len() as f64);
                if correct.is_empty() {
                    continue;
                }
                for (d, dir) in [Direction::Positive, Direction::Negative].into_iter().enumerate() {
                    let per: Vec<[bool; 9]> = correct.iter().map(|h| h[d]).collect();
                    let curve = accuracy_curve(&per);
                    for (f, acc) in FRACTIONS.iter().zip(&curve) {
                        sink.push(method, dds, format!("top1/{tag}/{}/f{f:.1}", dir.name()), *acc);
                    }
                    sink.push(method, dds, format!("auc/{tag}/{}", dir.name()), perturbation_auc(&curve)?);
                }
            }
        }
    }
    Ok(sink.rows)
}

/// Top-`k` token overlap between the maps of the clean and the attacked
/// image.
pub fn attack_overlap(
    params: &ViTParams,
    cfg: &ExperimentConfig,
    seed: u64,
    index: usize,
    clean: &Tensor,
    attacked: &Tensor,
    method: MethodId,
    dds: bool,
) -> Result<f64> {
    let opts = ExplainOptions { variant: cfg.eval.variant };
    let (rng, id) = (image_rng(seed, index), image_id(index));
    let a = explain_decision(params, clean, method, dds_option(cfg, dds), &rng, &id, &opts)?;
    let b = explain_decision(params, attacked, method, dds_option(cfg, dds), &rng, &id, &opts)?;
    topk_overlap(&a.token_scores, &b.token_scores, cfg.eval.overlap_k)
}

/// Indices of the `k` most relevant tokens, for reports.
pub fn top_tokens(map: &RelevanceMap, k: usize) -> Vec<usize> {
    topk_indices(&map.token_scores, k)
}

/// Writes a human-readable summary line per row.
pub fn print_rows(rows: &[ResultRow], out: &mut impl Write) -> Result<()> {
    for r in rows {
        writeln!(out, "{:<24} dds={:<5} {:<32} {:.4}", r.method, r.dds, r.metric, r.value)?;
    }
    Ok(())
}
