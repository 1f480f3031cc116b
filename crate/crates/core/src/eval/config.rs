use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::DatasetConfig;
use super::energy::{DEFAULT_GRID_FACTOR, DEFAULT_WATTS};
use crate::attack::PgdConfig;
use crate::certify::FaithfulnessParams;
use crate::error::{FvitError, Result};
use crate::explain::{MethodId, Variant};
use crate::rng::Rng;
use crate::smoothing::DDSConfig;
use crate::vit::{TrainConfig, ViTConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub data: DatasetConfig,
    pub train_size: usize,
    /// Train on noisy-and-denoised copies of every second image (skipped
    /// for precomputed denoiser outputs).
    pub train_on_denoised: bool,
    pub test_size: usize,
    pub methods: Vec<MethodId>,
    pub variant: Variant,
    /// ℓ∞ radii of the perturbation protocol.
    pub attack_radii: Vec<f64>,
    /// `k` of the clean-vs-attacked token overlap.
    pub overlap_k: usize,
    /// Stem of saved parameters (`<stem>.fvt` + `<stem>.json`); trains when
    /// absent.
    pub model_path: Option<PathBuf>,
    pub certify_images: usize,
    pub visualize_images: usize,
    pub watts: f64,
    pub grid_factor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            data: DatasetConfig::default(),
            train_size: 5000,
            train_on_denoised: true,
            test_size: 50,
            methods: MethodId::ALL.to_vec(),
            variant: Variant::HuDemo,
            attack_radii: vec![0.0, 2.0 / 255.0, 8.0 / 255.0],
            overlap_k: 10,
            model_path: None,
            certify_images: 10,
            visualize_images: 4,
            watts: DEFAULT_WATTS,
            grid_factor: DEFAULT_GRID_FACTOR,
        }
    }
}

/// Everything a run depends on besides the seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub vit: ViTConfig,
    pub dds: DDSConfig,
    pub pgd: PgdConfig,
    pub faithfulness: FaithfulnessParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| FvitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.dds.validate()?;
        self.pgd.validate().map_err(|e| FvitError::Config(e.to_string()))?;
        self.faithfulness.validate().map_err(|e| FvitError::Config(e.to_string()))?;
        let e = &self.eval;
        if self.vit.channels != 1 {
            return Err(FvitError::Config("the shape dataset is single-channel".into()));
        }
        if e.data.image_size != self.vit.image_size {
            return Err(FvitError::Config(format!(
                "dataset image_size {} differs from model image_size {}",
                e.data.image_size, self.vit.image_size
            )));
        }
        if e.train_size == 0 || e.test_size == 0 {
            return Err(FvitError::Config("train_size and test_size must be positive".into()));
        }
        if e.methods.is_empty() {
            return Err(FvitError::Config("no methods selected".into()));
        }
        if e.overlap_k == 0 || e.overlap_k > self.vit.patches() {
            return Err(FvitError::Config(format!("overlap_k must lie in 1..={}", self.vit.patches())));
        }
        if e.attack_radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(FvitError::Config("attack radii must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON and the seed.
    pub fn hash(&self, seed: u64) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(format!("{json}\nseed={seed}").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Seeds of the training and test datasets derived from the run seed.
pub fn data_seeds(seed: u64) -> (u64, u64) {
    let root = Rng::new(seed);
    (root.substream(1).next_u64(), root.substream(2).next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        for key in ["\"R\"", "\"sigma\"", "\"epsilon\"", "\"step_size\"", "\"embed_dim\"", "\"samples\""] {
            assert!(text.contains(key), "{key}");
        }
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_inconsistent() {
        assert!(ExperimentConfig::from_json("{\"bogus\": 1}").is_err());
        assert!(ExperimentConfig::from_json("{\"eval\": {\"methods\": [\"nope\"]}}").is_err());
        assert!(ExperimentConfig::from_json("{\"vit\": {\"image_size\": 16}}").is_err());
        assert!(ExperimentConfig::from_json("{\"faithfulness\": {\"alpha\": 1.0}}").is_err());
    }

    #[test]
    fn hash_tracks_config_and_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.dds.samples = 3;
        assert_eq!(a.hash(44), a.hash(44));
        assert_ne!(a.hash(44), a.hash(45));
        assert_ne!(a.hash(44), b.hash(44));
        assert_eq!(a.hash(44).len(), 16);
        let (tr, te) = data_seeds(44);
        assert_ne!(tr, te);
    }
}
