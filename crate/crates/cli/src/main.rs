use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fvit_core::attack::pgd;
use fvit_core::certify::{
    certified_radius, certify_faithful, classification_bound, conjecture_compare, oracle_min_divergence, topk_violation_bound,
    Certificate, ConjectureReport, Distribution, Predicate,
};
use fvit_core::eval::{
    energy_report, explain_decision, image_id, image_rng, prepare_model, print_rows, read_results_csv, run_classification,
    run_segmentation, smoothed_outputs, test_set, write_results_csv, EnergyReport, ExperimentConfig, PreparedModel, ResultRow,
};
use fvit_core::explain::{ExplainOptions, MethodId};
use fvit_core::io::write_pgm;
use fvit_core::{FvitError, Result, Rng, ViTParams};

#[derive(Parser)]
#[command(name = "fvit", about = "Faithful attention explanations for a toy ViT")]
struct Cli {
    /// Experiment configuration (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 44)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and save it to `<out>/model.{fvt,json}`.
    Train,
    /// Segmentation of PGD-attacked test images; writes results.csv.
    Segment,
    /// Two-stage attack-then-mask protocol; writes results.csv.
    Perturb,
    /// Faithfulness certificates for smoothed test images.
    Certify(CertifyArgs),
    /// PGM heatmaps of every method with and without smoothing.
    Visualize,
    /// Energy and CO2 for a given wall time.
    Energy(EnergyArgs),
    /// Brute-force checks of the divergence bounds on random distributions.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct CertifyArgs {
    /// Method whose smoothed token scores are certified.
    #[arg(long, default_value = "transformer_attribution")]
    method: MethodId,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    seconds: f64,
    #[arg(long)]
    watts: Option<f64>,
    #[arg(long)]
    grid_factor: Option<f64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 3000)]
    budget: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn model_stem(out: &Path) -> PathBuf {
    out.join("model")
}

/// The configured model, else a model saved by `train` under `out`, else a
/// freshly trained one (saved for later runs).
fn load_or_train(cfg: &mut ExperimentConfig, seed: u64, out: &Path) -> Result<PreparedModel> {
    let stem = model_stem(out);
    if cfg.eval.model_path.is_none() && stem.with_extension("fvt").is_file() {
        cfg.eval.model_path = Some(stem.clone());
    }
    let fresh = cfg.eval.model_path.is_none();
    if fresh {
        eprintln!("training on {} images", cfg.eval.train_size);
    }
    let model = prepare_model(cfg, seed)?;
    if fresh {
        model.params.save(&stem)?;
    }
    eprintln!("model test accuracy {:.3}", model.test_accuracy);
    Ok(model)
}

/// Replaces rows with the same key, keeps the rest.
fn merge_results(path: &Path, rows: Vec<ResultRow>) -> Result<Vec<ResultRow>> {
    let mut merged = if path.is_file() { read_results_csv(path)? } else { Vec::new() };
    merged.retain(|old| {
        !rows.iter().any(|r| {
            r.method == old.method && r.dds == old.dds && r.metric == old.metric && r.model_seed == old.model_seed && r.config_hash == old.config_hash
        })
    });
    merged.extend(rows);
    Ok(merged)
}

#[derive(Serialize)]
struct TrainReport {
    test_accuracy: f64,
    seconds: f64,
    history: Vec<fvit_core::vit::EpochStats>,
}

#[derive(Serialize)]
struct ImageCertificate {
    image: String,
    label: usize,
    predicted: usize,
    /// Largest ℓ2 radius (exclusive) this image could be certified at.
    #[serde(with = "fvit_core::certify::extended_float")]
    certified_radius: f64,
    certificate: Certificate,
    conjecture: ConjectureReport,
}

#[derive(Serialize)]
struct CertifyReport {
    method: MethodId,
    linf_epsilon: f64,
    /// `√n · ε`, the ℓ2 radius of the ℓ∞ attack ball's corners.
    implied_l2_radius: f64,
    radius: f64,
    faithful_images: usize,
    images: Vec<ImageCertificate>,
}

#[derive(Serialize)]
struct OracleCase {
    probs: Vec<f64>,
    alpha: f64,
    k: usize,
    beta: f64,
    #[serde(with = "fvit_core::certify::extended_float")]
    classification_bound: f64,
    #[serde(with = "fvit_core::certify::extended_float")]
    argmax_minimum: f64,
    #[serde(with = "fvit_core::certify::extended_float")]
    topk_bound: f64,
    #[serde(with = "fvit_core::certify::extended_float")]
    topk_minimum: f64,
    dominated: bool,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    let start = Instant::now();
    match cli.command {
        Command::Train => {
            cfg.eval.model_path = None;
            let model = prepare_model(&cfg, cli.seed)?;
            model.params.save(&model_stem(out))?;
            let history = model.outcome.map(|o| o.history).unwrap_or_default();
            for e in &history {
                eprintln!("epoch {:>2} loss {:.4} train acc {:.3}", e.epoch, e.loss, e.train_accuracy);
            }
            println!("test accuracy {:.4} after {:.1}s", model.test_accuracy, model.seconds);
            write_json(
                &out.join("train.json"),
                &TrainReport {
                    test_accuracy: model.test_accuracy,
                    seconds: model.seconds,
                    history,
                },
            )?;
        }
        Command::Segment | Command::Perturb => {
            let model = load_or_train(&mut cfg, cli.seed, out)?;
            let rows = if matches!(cli.command, Command::Segment) {
                run_segmentation(&model.params, &cfg, cli.seed)?
            } else {
                run_classification(&model.params, &cfg, cli.seed)?
            };
            print_rows(&rows, &mut std::io::stdout())?;
            let path = out.join("results.csv");
            write_results_csv(&path, &merge_results(&path, rows)?)?;
        }
        Command::Certify(args) => {
            let model = load_or_train(&mut cfg, cli.seed, out)?;
            let report = certify(&model.params, &cfg, cli.seed, args.method)?;
            println!(
                "{} of {} images certified faithful at sigma {} for R {}",
                report.faithful_images,
                report.images.len(),
                cfg.dds.sigma,
                cfg.faithfulness.r
            );
            write_json(&out.join("certificate.json"), &report)?;
        }
        Command::Visualize => {
            let model = load_or_train(&mut cfg, cli.seed, out)?;
            let written = visualize(&model.params, &cfg, cli.seed, out)?;
            println!("wrote {written} PGM files to {}", out.display());
        }
        Command::Energy(args) => {
            let report = energy_report(
                args.seconds,
                args.watts.unwrap_or(cfg.eval.watts),
                args.grid_factor.unwrap_or(cfg.eval.grid_factor),
            )?;
            println!("{:.6} kWh, {:.3} g CO2", report.kwh, report.grams_co2);
            write_json(&out.join("energy.json"), &report)?;
            return Ok(());
        }
        Command::Oracle(args) => {
            let cases = oracle(cli.seed, args.count, args.budget)?;
            let ok = cases.iter().filter(|c| c.dominated).count();
            println!("{ok} of {} cases respect both bounds", cases.len());
            write_json(&out.join("oracle.json"), &cases)?;
        }
    }
    let energy: EnergyReport = energy_report(start.elapsed().as_secs_f64(), cfg.eval.watts, cfg.eval.grid_factor)?;
    write_json(&out.join("energy.json"), &energy)?;
    Ok(())
}

fn certify(params: &ViTParams, cfg: &ExperimentConfig, seed: u64, method: MethodId) -> Result<CertifyReport> {
    let samples = test_set(cfg, seed)?;
    let opts = ExplainOptions { variant: cfg.eval.variant };
    let mut images = Vec::new();
    for (i, s) in samples.iter().take(cfg.eval.certify_images).enumerate() {
        let (rng, id) = (image_rng(seed, i), image_id(i));
        let (p, w) = smoothed_outputs(params, &s.image, method, &cfg.dds, &rng, &id, &opts)?;
        images.push(ImageCertificate {
            image: id,
            label: s.label,
            predicted: p.argmax(),
            certified_radius: certified_radius(cfg.dds.sigma, &w, &p, &cfg.faithfulness)?,
            certificate: certify_faithful(cfg.dds.sigma, &w, &p, &cfg.faithfulness)?,
            conjecture: conjecture_compare(&w, &cfg.faithfulness)?,
        });
    }
    let n = (cfg.vit.channels * cfg.vit.image_size * cfg.vit.image_size) as f64;
    Ok(CertifyReport {
        method,
        linf_epsilon: cfg.pgd.epsilon,
        implied_l2_radius: n.sqrt() * cfg.pgd.epsilon,
        radius: cfg.faithfulness.r,
        faithful_images: images.iter().filter(|c| c.certificate.faithful).count(),
        images,
    })
}

fn visualize(params: &ViTParams, cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<usize> {
    let samples = test_set(cfg, seed)?;
    let opts = ExplainOptions { variant: cfg.eval.variant };
    let mut written = 0;
    for (i, s) in samples.iter().take(cfg.eval.visualize_images).enumerate() {
        let (rng, id) = (image_rng(seed, i), image_id(i));
        let attacked = pgd(params, &s.image, s.label, &cfg.pgd)?;
        write_pgm(&out.join(format!("{id}_image.pgm")), &s.image)?;
        write_pgm(&out.join(format!("{id}_attacked.pgm")), &attacked)?;
        write_pgm(&out.join(format!("{id}_mask.pgm")), &s.mask)?;
        written += 3;
        for &method in &cfg.eval.methods {
            for (tag, dds) in [("vanilla", None), ("dds", Some(&cfg.dds))] {
                let map = explain_decision(params, &attacked, method, dds, &rng, &id, &opts)?;
                write_pgm(&out.join(format!("{id}_{}_{tag}.pgm", method.name())), &map.pixel_map)?;
                written += 1;
            }
        }
    }
    Ok(written)
}

fn oracle(seed: u64, count: usize, budget: usize) -> Result<Vec<OracleCase>> {
    let root = Rng::new(seed).substream(30);
    let alphas = [1.5, 2.0, 4.0];
    (0..count)
        .map(|i| {
            let mut rng = root.substream(i as u64);
            let n = 3 + rng.below(3);
            let raw: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let p = Distribution::normalized(&raw)?;
            let alpha = alphas[i % alphas.len()];
            let k = 1 + rng.below(n - 1);
            let beta = rng.uniform_range(0.05, 1.0);
            let cb = classification_bound(&p, alpha)?;
            let tb = topk_violation_bound(&p, k, beta, alpha)?;
            let am = oracle_min_divergence(&p, Predicate::ArgmaxDiffers, alpha, budget, &mut rng)?.minimum;
            let tm = oracle_min_divergence(&p, Predicate::TopkBelow { k, beta }, alpha, budget, &mut rng)?.minimum;
            Ok(OracleCase {
                probs: p.probs().to_vec(),
                alpha,
                k,
                beta,
                classification_bound: cb,
                argmax_minimum: am,
                topk_bound: tb,
                topk_minimum: tm,
                dominated: am >= cb - 1e-6 && tm >= tb - 1e-6,
            })
        })
        .collect()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FvitError::Config(_) | FvitError::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
