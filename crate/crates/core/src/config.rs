//! Run configuration and seed derivation.
//!
//! All randomness in a run flows from one master seed. Each component draws
//! from its own ChaCha stream whose 32-byte key is
//! `sha256(master_seed_le || '/' || component_name)`, so adding a component
//! never perturbs another component's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataprep::DataConfig;
use crate::error::Result;
use crate::evalsuite::RecallConfig;
use crate::harness::ClassifierConfig;
use crate::model::ModelConfig;
use crate::sampler::GenerationSpec;
use crate::trainer::TrainConfig;

/// Declarative run configuration; every field has a default and unknown keys
/// are rejected at parse time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub harness: HarnessConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n_per_class: usize,
    /// Style prior widths generated and evaluated side by side.
    pub sigmas: Vec<f64>,
    pub inference_steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_per_class: 90,
            sigmas: vec![0.0, 0.1, 0.3, 0.5],
            inference_steps: 50,
        }
    }
}

impl SampleConfig {
    /// Generation spec for one sigma; the seed is derived per (run, sigma).
    pub fn spec(&self, sigma: f64, seed: u64, classes: Vec<String>) -> GenerationSpec {
        GenerationSpec {
            n_per_class: self.n_per_class,
            sigma_style: sigma,
            inference_steps: self.inference_steps,
            seed,
            classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub recall: RecallConfig,
    /// PCA sample cap per source when exporting coordinates.
    pub pca_max_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub classifier: ClassifierConfig,
    pub n_runs: usize,
    pub mixed_ratios: Vec<u32>,
    pub scaling_scales: Vec<u32>,
    pub plus_real: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            classifier: ClassifierConfig::default(),
            n_runs: 3,
            mixed_ratios: (0..=10).map(|i| i * 10).collect(),
            scaling_scales: vec![100, 200, 500, 1000],
            plus_real: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.denoiser.validate()?;
        self.train.validate()?;
        self.harness.classifier.validate()?;
        Ok(())
    }

    /// Canonical hash of the serialized config (run manifests).
    pub fn digest(&self) -> Result<String> {
        let text = self.to_toml()?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// Derive the ChaCha stream for `component` under `master` seed.
pub fn seed_rng(master: u64, component: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(b"/");
    hasher.update(component.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Convenience: a derived u64 sub-seed (for components that re-derive).
pub fn derive_seed(master: u64, component: &str) -> u64 {
    let mut rng = seed_rng(master, component);
    rand::RngCore::next_u64(&mut rng)
}
