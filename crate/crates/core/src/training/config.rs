//! Declarative experiment description.
//!
//! Serialized as a flat TOML key/value file (schema `version = 1`); every key
//! can be overridden from the command line with `key=value`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Layout;
use crate::losses::{BaseKind, LossConfig};
use crate::models::{DenoiserSpec, DiffusionSchedule, DiscriminatorSpec, GeneratorArch, GeneratorSpec, ModelError};
use crate::prior::BackendKind;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse override `{0}` (expected key=value)")]
    Override(String),
    #[error("config file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Pix2pixUnet,
    Pix2pixResnet,
    RegressionUnet,
    Ddpm,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Pix2pixUnet, Arch::Pix2pixResnet, Arch::RegressionUnet, Arch::Ddpm];

    pub fn base_kind(self) -> BaseKind {
        match self {
            Arch::Pix2pixUnet | Arch::Pix2pixResnet => BaseKind::AdversarialL1,
            Arch::RegressionUnet => BaseKind::L1Regression,
            Arch::Ddpm => BaseKind::DiffusionNoise,
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Arch::Pix2pixUnet | Arch::Pix2pixResnet)
    }

    pub fn label(self) -> &'static str {
        match self {
            Arch::Pix2pixUnet => "Pix2Pix (UNet)",
            Arch::Pix2pixResnet => "Pix2Pix (ResNet)",
            Arch::RegressionUnet => "Regression (UNet)",
            Arch::Ddpm => "Diffusion (DDPM)",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Pix2pixUnet => "pix2pix_unet",
            Arch::Pix2pixResnet => "pix2pix_resnet",
            Arch::RegressionUnet => "regression_unet",
            Arch::Ddpm => "ddpm",
        })
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| format!("unknown arch `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    None,
    Binary,
    Soft,
}

impl PriorMode {
    pub fn in_channels(self) -> usize {
        match self {
            PriorMode::None => 3,
            PriorMode::Binary | PriorMode::Soft => 4,
        }
    }
}

impl std::fmt::Display for PriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorMode::None => "none",
            PriorMode::Binary => "binary",
            PriorMode::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub arch: Arch,
    pub prior_mode: PriorMode,
    pub use_var_loss: bool,
    pub in_channels: usize,

    pub lambda_var: f64,
    pub kernel_k: usize,
    pub lambda_l1: f64,
    pub base_kind: BaseKind,

    pub optimizer: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub deterministic: bool,

    pub dataset: String,
    pub layout: Layout,
    pub image_size: usize,
    pub prior_backend: BackendKind,
    pub binarize_threshold: f64,

    pub base_width: usize,
    pub depth: usize,
    pub res_blocks: usize,
    pub disc_width: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_dim: usize,
    /// Seeds stochastic prediction (diffusion sampling) and validation noise.
    pub sample_seed: u64,
}

impl ExperimentConfig {
    /// Full-scale settings: 256x256 patches, batch 16, Adam, lambda_var = 50
    /// with k = 15, lambda_l1 = 100.
    pub fn paper(arch: Arch) -> Self {
        let (lr, beta1, epochs) = match arch {
            Arch::Pix2pixUnet | Arch::Pix2pixResnet => (2e-4, 0.5, 1000),
            Arch::RegressionUnet => (1e-4, 0.9, 150),
            Arch::Ddpm => (2e-4, 0.9, 1000),
        };
        Self {
            version: CONFIG_VERSION,
            arch,
            prior_mode: PriorMode::None,
            use_var_loss: false,
            in_channels: 3,
            lambda_var: 50.0,
            kernel_k: 15,
            lambda_l1: 100.0,
            base_kind: arch.base_kind(),
            optimizer: "adam".into(),
            lr,
            beta1,
            beta2: 0.999,
            epochs,
            batch_size: 16,
            patience: 20,
            seed: 0,
            deterministic: true,
            dataset: String::new(),
            layout: Layout::DeepliifLike,
            image_size: 256,
            prior_backend: BackendKind::Intensity,
            binarize_threshold: crate::prior::DEFAULT_THRESHOLD,
            base_width: 64,
            depth: match arch {
                Arch::Pix2pixResnet => 2,
                _ => 4,
            },
            res_blocks: 6,
            disc_width: 64,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            time_dim: 64,
            sample_seed: 0,
        }
    }

    /// Small networks on 64x64 patches for CPU runs.
    pub fn desk(arch: Arch) -> Self {
        Self {
            image_size: 64,
            base_width: 16,
            depth: match arch {
                Arch::Pix2pixResnet => 2,
                _ => 3,
            },
            res_blocks: 3,
            disc_width: 16,
            time_dim: 32,
            batch_size: 4,
            epochs: 30,
            patience: 20,
            ..Self::paper(arch)
        }
    }

    /// Sets the prior mode and the matching input channel count.
    pub fn with_prior(mut self, mode: PriorMode) -> Self {
        self.prior_mode = mode;
        self.in_channels = mode.in_channels();
        self
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_var: self.lambda_var,
            kernel_k: self.kernel_k,
            lambda_l1: self.lambda_l1,
            base_kind: self.base_kind,
        }
    }

    pub fn generator_spec(&self, out_channels: usize) -> GeneratorSpec {
        GeneratorSpec {
            arch: match self.arch {
                Arch::Pix2pixResnet => GeneratorArch::Resnet,
                _ => GeneratorArch::Unet,
            },
            in_channels: self.in_channels,
            out_channels,
            base_width: self.base_width,
            depth: self.depth,
            res_blocks: self.res_blocks,
        }
    }

    pub fn discriminator_spec(&self, out_channels: usize) -> DiscriminatorSpec {
        DiscriminatorSpec::patch70(self.in_channels + out_channels, self.disc_width)
    }

    pub fn denoiser_spec(&self, out_channels: usize) -> DenoiserSpec {
        DenoiserSpec {
            cond_channels: self.in_channels,
            out_channels,
            base_width: self.base_width,
            depth: self.depth,
            time_dim: self.time_dim,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, ModelError> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        if self.in_channels != self.prior_mode.in_channels() {
            return bad(format!(
                "prior_mode={} requires in_channels={}, got {}",
                self.prior_mode,
                self.prior_mode.in_channels(),
                self.in_channels
            ));
        }
        if self.base_kind != self.arch.base_kind() {
            return bad(format!("{} must use base loss {}", self.arch, self.arch.base_kind()));
        }
        self.loss().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.optimizer != "adam" {
            return bad(format!("unsupported optimizer `{}`", self.optimizer));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("optimizer lr/betas out of range".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive".into());
        }
        if self.image_size % (1 << self.depth) != 0 {
            return bad(format!("image_size {} not divisible by 2^{}", self.image_size, self.depth));
        }
        if self.kernel_k > self.image_size {
            return bad(format!("kernel_k {} exceeds image_size {}", self.kernel_k, self.image_size));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return bad(format!("binarize_threshold {} outside (0,1)", self.binarize_threshold));
        }
        if self.arch == Arch::Ddpm {
            self.schedule().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.dataset.is_empty() {
            return bad("dataset path is empty".into());
        }
        Ok(())
    }

    /// Flat key -> value view used for diffs and overrides.
    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Applies `key=value` overrides (see [`apply_override`]). Changing
    /// `prior_mode` also updates `in_channels`; changing `arch` also updates
    /// `base_kind`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut table = self.to_table();
        for raw in overrides {
            let key = apply_override(&mut table, raw.as_ref())?;
            match key.as_str() {
                "prior_mode" => {
                    let mode: PriorMode = table["prior_mode"]
                        .clone()
                        .try_into()
                        .map_err(|_| ConfigError::Invalid(format!("bad prior_mode in `{}`", raw.as_ref())))?;
                    table.insert("in_channels".into(), toml::Value::Integer(mode.in_channels() as i64));
                }
                "arch" => {
                    let arch: Arch = table["arch"]
                        .clone()
                        .try_into()
                        .map_err(|_| ConfigError::Invalid(format!("bad arch in `{}`", raw.as_ref())))?;
                    table.insert("base_kind".into(), toml::Value::String(arch.base_kind().to_string()));
                }
                _ => {}
            }
        }
        Self::from_table(table)
    }

    /// Keys whose values differ between two configs.
    pub fn diff_keys(&self, other: &Self) -> Vec<String> {
        let a = self.to_table();
        let b = other.to_table();
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }

    /// SHA-256 of the canonical (sorted-key) JSON encoding, hex.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Sets one `key=value` override on an existing key of `table` and returns
/// the key. Values are parsed as TOML and fall back to bare strings;
/// integers given for float keys are widened.
pub fn apply_override(table: &mut toml::Table, raw: &str) -> Result<String, ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::Override(raw.to_string()))?;
    let key = key.trim();
    if !table.contains_key(key) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parsed = match (&table[key], parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(key.to_string(), parsed);
    Ok(key.to_string())
}

/// SHA-256 (hex) of a value's JSON encoding with object keys sorted.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    fn sort(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let sorted: BTreeMap<String, serde_json::Value> = m.into_iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::to_value(sorted).expect("json")
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.into_iter().map(sort).collect()),
            other => other,
        }
    }
    let bytes = serde_json::to_vec(&sort(serde_json::to_value(value).expect("json"))).expect("json");
    hex::encode(Sha256::digest(bytes))
}
