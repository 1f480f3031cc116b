//! Synthetic shapes, the segmentation and perturbation protocols, their
//! metrics and energy accounting.

mod config;
mod dataset;
mod energy;
mod metrics;
pub mod oracles;
mod protocol;
mod soundness;

pub use soundness::{certificate_soundness, smoothed_outputs, ImageSoundness, SoundnessReport};
pub use config::{data_seeds, EvalConfig, ExperimentConfig};
pub use dataset::{gen_dataset, labeled, DatasetConfig, SegSample, Shape};
pub use energy::{energy_report, EnergyReport, DEFAULT_GRID_FACTOR, DEFAULT_WATTS};
pub use metrics::{average_precision, mean_threshold, miou, miou_binary, perturbation_auc, pixel_accuracy};
pub use protocol::{
    accuracy_curve, attack_all, attack_overlap, decide, explain_decision, image_id, image_rng, masking_hits,
    perturbation_hits, prepare_model, print_rows, read_results_csv, run_classification, run_segmentation,
    score_segmentation, segmentation_scores, test_set, top_tokens, write_results_csv, PreparedModel,
    ResultRow, SegmentationScores,
};
