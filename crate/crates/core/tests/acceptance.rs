//! Acceptance checks; one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p fvit-core --test acceptance`. The trained model
//! is shared by criteria 8 to 12.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use fvit_core::attack::{pgd, pgd_with, PgdConfig};
use fvit_core::certify::{
    classification_bound, oracle_min_divergence, renyi_divergence, topk_violation_bound, Distribution, Predicate,
    gaussian_divergence_bound, gaussian_divergence_mc,
};
use fvit_core::eval::{
    attack_all, attack_overlap, average_precision, certificate_soundness, energy_report, explain_decision, image_id,
    image_rng, miou, oracles, pixel_accuracy, prepare_model, run_classification, segmentation_scores, test_set,
    ExperimentConfig, PreparedModel,
};
use fvit_core::explain::{
    attribution_rollout, attribution_rollout_with_weights, explain, gradcam, lrp, rollout, ta_from_parts,
    ExplainOptions, LinearRule, MethodId, Variant, CONSERVATION_TOLERANCE,
};
use fvit_core::nn::{finite_diff_check, Affine, Constant, Gelu, Layer, LayerNorm, Linear, Patchify, SoftmaxRows};
use fvit_core::rng::gaussian_sample;
use fvit_core::smoothing::{smoothed_prediction, DDSConfig, DenoiserSpec};
use fvit_core::vit::{softmax, ForwardTrace};
use fvit_core::{Result, Rng, Tensor, ViTConfig, ViTParams};

const SEED: u64 = 44;

type Check = Result<(bool, String)>;

fn config() -> &'static ExperimentConfig {
    static CFG: OnceLock<ExperimentConfig> = OnceLock::new();
    CFG.get_or_init(ExperimentConfig::default)
}

fn model() -> &'static PreparedModel {
    static MODEL: OnceLock<PreparedModel> = OnceLock::new();
    MODEL.get_or_init(|| prepare_model(config(), SEED).expect("training succeeds"))
}

fn random_simplex(rng: &mut Rng, n: usize) -> Distribution {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    Distribution::normalized(&raw).unwrap()
}

const ALPHAS: [f64; 3] = [1.5, 2.0, 4.0];

fn c1_classification_oracle() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let (mut below, mut loose, mut worst_gap) = (0, 0, 0.0f64);
    for i in 0..100 {
        let p = random_simplex(&mut rng, 3 + i % 3);
        let alpha = ALPHAS[i % 3];
        let bound = classification_bound(&p, alpha)?;
        let found = oracle_min_divergence(&p, Predicate::ArgmaxDiffers, alpha, 2000, &mut rng.substream(i as u64))?;
        below += (found.minimum < bound - 1e-6) as usize;
        loose += (found.minimum > bound + 1e-3) as usize;
        worst_gap = worst_gap.max(found.minimum - bound);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        below == 0 && loose == 0 && secs < 120.0,
        format!("100 cases: {below} below bound-1e-6, {loose} witnesses above bound+1e-3, max gap {worst_gap:.2e}, {secs:.1}s"),
    ))
}

fn c2_topk_oracle() -> Check {
    let mut rng = Rng::new(202);
    let (mut below, mut worst) = (0, f64::NEG_INFINITY);
    for i in 0..100 {
        let n = 3 + i % 3;
        let w = random_simplex(&mut rng, n);
        let k = 1 + rng.below(n - 1);
        let beta = rng.uniform_range(0.05, 1.0);
        let alpha = ALPHAS[i % 3];
        let bound = topk_violation_bound(&w, k, beta, alpha)?;
        let found = oracle_min_divergence(&w, Predicate::TopkBelow { k, beta }, alpha, 2000, &mut rng.substream(i as u64))?;
        below += (bound > found.minimum + 1e-6) as usize;
        if found.minimum.is_finite() {
            worst = worst.max(bound - found.minimum);
        }
    }
    Ok((below == 0, format!("100 triples: {below} with bound above search minimum + 1e-6, max excess {worst:.2e}")))
}

fn c3_counterexample() -> Check {
    let p = Distribution::new(vec![0.3, 0.55, 0.15])?;
    let alpha = 2.0;
    let bound = classification_bound(&p, alpha)?;
    let found = oracle_min_divergence(&p, Predicate::ArgmaxDiffers, alpha, 20_000, &mut Rng::new(5))?;
    let q = found.witness.expect("a witness exists");
    let d = renyi_divergence(&q, &p, alpha)?;
    Ok((
        q.argmax() != p.argmax() && (d - bound).abs() <= 1e-6,
        format!("p={:?}, q={:?}, D={d:.9}, bound={bound:.9}", p.probs(), q.probs()),
    ))
}

fn c4_gaussian() -> Check {
    let mut rng = Rng::new(303);
    let mut worst = 0.0f64;
    for r in [0.5, 1.0] {
        for sigma in [0.5, 1.0] {
            let exact = gaussian_divergence_bound(r, sigma, 2.0)?;
            let est = gaussian_divergence_mc(2.0, r, sigma, 2, 1_000_000, &mut rng)?;
            worst = worst.max((est - exact).abs() / exact);
        }
    }
    Ok((worst < 0.02, format!("max relative deviation {worst:.4} over 4 settings, 1e6 samples each")))
}

fn lively(cfg: &ViTConfig, seed: u64) -> ViTParams {
    let mut p = ViTParams::init(cfg, &mut Rng::new(seed)).unwrap();
    p.scale_in_place(20.0);
    for (name, t) in p.named_tensors_mut() {
        if name.ends_with("_g") {
            *t = t.map(|v| v / 20.0);
        }
    }
    p
}

fn fd_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        heads: 2,
        layers: 2,
        num_classes: 3,
        mlp_ratio: 2,
        channels: 1,
    }
}

fn uniform_image(cfg: &ViTConfig, rng: &mut Rng) -> Tensor {
    let data = (0..cfg.image_shape().iter().product()).map(|_| rng.uniform()).collect();
    Tensor::new(cfg.image_shape().to_vec(), data).unwrap()
}

fn c5_gradients() -> Check {
    let mut rng = Rng::new(404);
    let mut worst = 0.0f64;
    let mut fail = Vec::new();
    for i in 0..20 {
        let g = |rng: &mut Rng, s: &[usize]| gaussian_sample(rng, s, 1.0).unwrap();
        let layers: Vec<(&str, Box<dyn Layer>, Tensor)> = vec![
            ("linear", Box::new(Linear { weight: g(&mut rng, &[4, 3]), bias: g(&mut rng, &[3]).into_data() }), g(&mut rng, &[5, 4])),
            ("softmax", Box::new(SoftmaxRows), g(&mut rng, &[3, 6])),
            ("layer_norm", Box::new(LayerNorm { gamma: g(&mut rng, &[6]).into_data(), beta: g(&mut rng, &[6]).into_data() }), g(&mut rng, &[3, 6])),
            ("gelu", Box::new(Gelu), g(&mut rng, &[3, 6])),
            ("patchify", Box::new(Patchify { patch: 2 }), g(&mut rng, &[2, 4, 4])),
            ("affine", Box::new(Affine { scale: g(&mut rng, &[3, 6]), offset: g(&mut rng, &[3, 6]) }), g(&mut rng, &[3, 6])),
            ("constant", Box::new(Constant { value: g(&mut rng, &[2, 2]) }), g(&mut rng, &[4])),
        ];
        for (name, layer, x) in &layers {
            let r = finite_diff_check(layer.as_ref(), x, 1e-4, &mut rng)?;
            worst = worst.max(r.max_rel_error);
            if !r.passed {
                fail.push(format!("{name}#{i}"));
            }
        }

        // backward_class: every attention gradient against a directional
        // difference through the attention-offset hook.
        let cfg = fd_config();
        let p = lively(&cfg, 500 + i as u64);
        let x = uniform_image(&cfg, &mut rng);
        let class = rng.below(cfg.num_classes);
        let mut tr = p.forward(&x)?;
        p.backward_class(&mut tr, class)?;
        let n = cfg.tokens();
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let dir = gaussian_sample(&mut rng, &[n, n], 1.0)?;
                let eps = 1e-5;
                let f = |s: f64| p.forward_with_attention_offset(&x, l, h, &dir.scale(s)).unwrap().logits.data()[class];
                let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                let an = tr.attention_grad(l, h).expect("recorded").dot(&dir)?;
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
                worst = worst.max(rel);
                if rel >= 1e-4 {
                    fail.push(format!("attention l{l} h{h}#{i}"));
                }
            }
        }
        // Input gradient of the same pass.
        let dir = gaussian_sample(&mut rng, x.shape(), 1.0)?;
        let eps = 1e-5;
        let f = |s: f64| p.forward(&x.add(&dir.scale(s)).unwrap()).unwrap().logits.data()[class];
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        let dl: Vec<f64> = (0..cfg.num_classes).map(|c| (c == class) as u8 as f64).collect();
        let an = p.backward(&p.forward(&x)?, &dl, false)?.input.dot(&dir)?;
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
        worst = worst.max(rel);
        if rel >= 1e-4 {
            fail.push(format!("input#{i}"));
        }
    }
    Ok((fail.is_empty(), format!("20 instances of 7 layers + backward_class; max rel error {worst:.2e}; failures {fail:?}")))
}

fn stochastic(n: usize, rng: &mut Rng) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// CLS row of `Π rownorm((mean_h A + I)/2)` by explicit vector-matrix products.
fn rollout_oracle(attn: &[Vec<Tensor>], start: usize) -> Vec<f64> {
    let n = attn[0][0].rows();
    let mut v: Vec<f64> = (0..n).map(|j| (j == 0) as u8 as f64).collect();
    for heads in attn[start..].iter().rev() {
        let m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..n)
                    .map(|j| heads.iter().map(|a| a.at(i, j)).sum::<f64>() / heads.len() as f64 + (i == j) as u8 as f64)
                    .collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| x / s).collect()
            })
            .collect();
        v = (0..n).map(|j| (0..n).map(|i| v[i] * m[i][j]).sum()).collect();
    }
    v[1..].to_vec()
}

fn c6_explainers() -> Check {
    let mut rng = Rng::new(606);
    let mut notes = Vec::new();
    let mut ok = true;

    let mut rollout_err = 0.0f64;
    for _ in 0..20 {
        let attn: Vec<Vec<Tensor>> = (0..3).map(|_| (0..2).map(|_| stochastic(7, &mut rng)).collect()).collect();
        let trace = ForwardTrace::from_attention(attn.clone(), None);
        for (v, start) in [(Variant::HuDemo, 0), (Variant::Chefer, 1)] {
            let got = rollout(&trace, v)?;
            let want = rollout_oracle(&attn, start);
            rollout_err = rollout_err.max(got.iter().zip(&want).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
        }
    }
    ok &= rollout_err <= 1e-10;
    notes.push(format!("rollout err {rollout_err:.1e}"));

    // One layer, one head, unit propagated relevance (the attention itself):
    // TA is GradCAM up to the rollout row normalization. With several heads
    // TA clamps each head before the mean and GradCAM after it.
    let mut ta_err = 0.0f64;
    for _ in 0..20 {
        let a = vec![vec![stochastic(6, &mut rng)]];
        let g: Vec<Vec<Tensor>> = vec![a[0].iter().map(|_| gaussian_sample(&mut rng, &[6, 6], 1.0).unwrap()).collect()];
        let ta = ta_from_parts(&g, &a, 0)?;
        let gc = gradcam(&ForwardTrace::from_attention(a, Some(g)))?;
        let (st, sg): (f64, f64) = (ta.iter().sum(), gc.iter().sum());
        if st > 0.0 && sg > 0.0 {
            ta_err = ta_err.max(ta.iter().zip(&gc).fold(0.0, |m, (x, y)| m.max((x / st - y / sg).abs())));
        }
    }
    ok &= ta_err <= 1e-10;
    notes.push(format!("TA vs GradCAM err {ta_err:.1e}"));

    let mut ar_exact = true;
    for _ in 0..20 {
        let single = ForwardTrace::from_attention((0..3).map(|_| vec![stochastic(7, &mut rng)]).collect(), None);
        let multi = ForwardTrace::from_attention((0..3).map(|_| (0..3).map(|_| stochastic(7, &mut rng)).collect()).collect(), None);
        let uniform = vec![vec![1.0 / 3.0; 3]; 3];
        for v in [Variant::HuDemo, Variant::Chefer] {
            ar_exact &= attribution_rollout(&single, v)? == rollout(&single, v)?;
            let ar = attribution_rollout_with_weights(&multi, &uniform, v)?;
            let ro = rollout(&multi, v)?;
            ar_exact &= ar.iter().zip(&ro).all(|(a, b)| (a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }
    ok &= ar_exact;
    notes.push(format!("AR = rollout: {ar_exact}"));

    let m = model();
    let samples = test_set(config(), SEED)?;
    let mut worst_leak = 0.0f64;
    for s in samples.iter().take(10) {
        let trace = m.params.forward(&s.image)?;
        let class = fvit_core::vit::argmax(trace.logits.data());
        for rule in [LinearRule::Z, LinearRule::AlphaOneBetaZero] {
            worst_leak = worst_leak.max(lrp(&m.params, &trace, class, rule)?.audit.relative_leak);
        }
    }
    ok &= worst_leak <= CONSERVATION_TOLERANCE;
    notes.push(format!("LRP max leak {worst_leak:.4} on 10 test images"));
    Ok((ok, notes.join("; ")))
}

fn c7_metrics() -> Check {
    let mut rng = Rng::new(707);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pred = Tensor::new(vec![8, 8], (0..64).map(|_| (rng.uniform() * 8.0).floor() / 8.0).collect())?;
        let mask = Tensor::new(vec![8, 8], (0..64).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect())?;
        let (acc, iou, ap) = oracles::segmentation(pred.data(), mask.data());
        worst = worst.max((pixel_accuracy(&pred, &mask)? - acc).abs());
        worst = worst.max((miou(&pred, &mask)? - iou).abs());
        if let Some(ap) = ap {
            worst = worst.max((average_precision(&pred, &mask)?.expect("nonempty mask") - ap).abs());
        }
    }
    let mask = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0])?;
    let hand = average_precision(&Tensor::new(vec![2, 2], vec![0.9, 0.8, 0.3, 0.1])?, &mask)?;
    Ok((
        worst <= 1e-12 && hand == Some(5.0 / 6.0),
        format!("100 cases max deviation {worst:.1e}; AP example {hand:?}"),
    ))
}

fn c8_attack() -> Check {
    let m = model();
    let cfg = config();
    let mut rng = Rng::new(808);
    let (mut outside, mut steps) = (0usize, 0usize);
    for i in 0..100 {
        let x = uniform_image(&cfg.vit, &mut rng);
        let label = i % cfg.vit.num_classes;
        pgd_with(&m.params, &x, label, &cfg.pgd, |_, xt| {
            steps += 1;
            let ok = xt.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() <= cfg.pgd.epsilon + 1e-12 && (0.0..=1.0).contains(a));
            outside += !ok as usize;
        })?;
    }
    let x = uniform_image(&cfg.vit, &mut rng);
    let zero_eps = pgd(&m.params, &x, 0, &PgdConfig { epsilon: 0.0, ..cfg.pgd.clone() })?;
    let zero_steps = pgd(&m.params, &x, 0, &PgdConfig { steps: 0, ..cfg.pgd.clone() })?;
    let exact = zero_eps.data() == x.data() && zero_steps.data() == x.data();
    Ok((
        outside == 0 && steps == 100 * cfg.pgd.steps && exact,
        format!("{steps} steps checked, {outside} outside the ball or [0,1]; eps=0 / steps=0 identical: {exact}"),
    ))
}

fn c9_dds_degeneration() -> Check {
    let m = model();
    let cfg = config();
    let dds = DDSConfig { sigma: 0.0, denoiser: DenoiserSpec::Identity, ..cfg.dds.clone() };
    let opts = ExplainOptions::default();
    let samples = test_set(cfg, SEED)?;
    let mut mismatches = Vec::new();
    for (i, s) in samples.iter().take(5).enumerate() {
        let (rng, id) = (image_rng(SEED, i), image_id(i));
        let p = smoothed_prediction(&m.params, &s.image, &dds, &rng, &id)?;
        if p.probs() != softmax(m.params.forward(&s.image)?.logits.data()).as_slice() {
            mismatches.push(format!("prediction {id}"));
        }
        for method in MethodId::ALL {
            let vanilla = explain(&m.params, &s.image, method, None, &opts)?;
            let smooth = explain_decision(&m.params, &s.image, method, Some(&dds), &rng, &id, &opts)?;
            if vanilla.token_scores != smooth.token_scores || vanilla.pixel_map != smooth.pixel_map {
                mismatches.push(format!("{method} {id}"));
            }
        }
    }
    Ok((mismatches.is_empty(), format!("5 images x 6 methods, bit mismatches: {mismatches:?}")))
}

fn c10_directional_segmentation() -> Check {
    let m = model();
    let cfg = config();
    let samples = test_set(cfg, SEED)?;
    let attacked = attack_all(&m.params, &samples, &cfg.pgd)?;
    let ta = MethodId::TransformerAttribution;
    let vanilla = segmentation_scores(&m.params, cfg, SEED, &samples, &attacked, ta, false)?;
    let smooth = segmentation_scores(&m.params, cfg, SEED, &samples, &attacked, ta, true)?;
    let n = samples.len();
    let acc_wins = vanilla.iter().zip(&smooth).filter(|(v, d)| d.pixel_accuracy > v.pixel_accuracy).count();
    let mut overlap_wins = 0;
    for (i, (s, x)) in samples.iter().zip(&attacked).enumerate() {
        let v = attack_overlap(&m.params, cfg, SEED, i, &s.image, x, ta, false)?;
        let d = attack_overlap(&m.params, cfg, SEED, i, &s.image, x, ta, true)?;
        overlap_wins += (d > v) as usize;
    }
    let mean = |v: &[fvit_core::eval::SegmentationScores]| v.iter().map(|s| s.pixel_accuracy).sum::<f64>() / n as f64;
    let need = (0.6 * n as f64).ceil() as usize;
    let trained = m.test_accuracy >= 0.9 && m.seconds < 300.0;
    Ok((
        trained && acc_wins >= need && overlap_wins >= need,
        format!(
            "test acc {:.3} in {:.0}s; DDS wins pixel accuracy on {acc_wins}/{n}, top-{} overlap on {overlap_wins}/{n} (need {need}); mean pixel accuracy {:.4} -> {:.4}",
            m.test_accuracy,
            m.seconds,
            cfg.eval.overlap_k,
            mean(&vanilla),
            mean(&smooth)
        ),
    ))
}

fn c11_directional_perturbation() -> Check {
    let m = model();
    let mut cfg = config().clone();
    cfg.eval.methods = vec![MethodId::TransformerAttribution];
    let rows = run_classification(&m.params, &cfg, SEED)?;
    let get = |dds: bool, metric: &str| rows.iter().find(|r| r.dds == dds && r.metric == metric).map(|r| r.value);
    let mut ok = true;
    let mut notes = Vec::new();
    for tag in ["eps0", "eps2", "eps8"] {
        for dds in [false, true] {
            let pos = get(dds, &format!("auc/{tag}/positive"));
            let neg = get(dds, &format!("auc/{tag}/negative"));
            let count = get(dds, &format!("count/{tag}/correct")).unwrap_or(0.0);
            match (pos, neg) {
                (Some(p), Some(n)) => {
                    ok &= p < n;
                    notes.push(format!("{tag}{} {p:.3}<{n:.3} (n={count})", if dds { "+dds" } else { "" }));
                }
                _ => {
                    ok = false;
                    notes.push(format!("{tag}{} no correctly classified images", if dds { "+dds" } else { "" }));
                }
            }
        }
    }
    Ok((ok, notes.join(", ")))
}

fn c12_soundness() -> Check {
    let m = model();
    let cfg = config();
    let ta = MethodId::TransformerAttribution;
    let report = certificate_soundness(&m.params, cfg, SEED, ta, 10, 20, 64)?;
    let coarse = certificate_soundness(&m.params, cfg, SEED, ta, 10, 20, cfg.dds.samples)?;
    println!(
        "      note: with the run's own m={} the Monte Carlo outputs show {} of {} trials past a certificate",
        cfg.dds.samples,
        coarse.violations(),
        coarse.trials()
    );
    let radii: Vec<String> = report.images.iter().map(|i| format!("{:.4}", i.radius)).collect();
    Ok((
        report.certified() > 0 && report.violations() == 0,
        format!(
            "m=64: {} of 10 images certified (radii {}), {} trials, {} violations",
            report.certified(),
            radii.join(" "),
            report.trials(),
            report.violations()
        ),
    ))
}

fn c13_energy() -> Check {
    let r = energy_report(3600.0, 1000.0, 370.0)?;
    Ok((r.grams_co2 == 370.0 && r.kwh == 1.0, format!("3.6e6 J -> {} kWh, {} g", r.kwh, r.grams_co2)))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 13] = [
        ("certification oracle dominance", c1_classification_oracle),
        ("top-k bound dominance", c2_topk_oracle),
        ("counterexample reproduction", c3_counterexample),
        ("gaussian Renyi closed form", c4_gaussian),
        ("gradient fidelity", c5_gradients),
        ("explainer oracles", c6_explainers),
        ("metric oracles", c7_metrics),
        ("attack contract", c8_attack),
        ("DDS degeneration", c9_dds_degeneration),
        ("directional segmentation under PGD", c10_directional_segmentation),
        ("directional perturbation AUC", c11_directional_perturbation),
        ("certificate soundness", c12_soundness),
        ("energy arithmetic", c13_energy),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += !pass as usize;
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
