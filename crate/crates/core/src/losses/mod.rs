//! Variance-preserving regularizer and objective composition.
//!
//! `variance` holds the reference `f64` kernels (with a closed-form
//! gradient); `tensor` holds the differentiable candle versions used inside
//! training loops.

pub mod tensor;
pub mod variance;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::Raster;

pub use variance::{local_variance, variance_loss, variance_loss_grad, VarianceMap};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid kernel: {0}")]
    Kernel(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss in batch {batch}: base={base}, var={var}")]
    NonFinite { batch: String, base: f64, var: f64 },
    #[error("loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Architecture-specific base objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    /// Non-saturating GAN generator loss on patch scores + `lambda_l1 * L1`.
    AdversarialL1,
    /// Mean absolute error.
    L1Regression,
    /// Mean squared error between predicted and true noise.
    DiffusionNoise,
}

impl std::fmt::Display for BaseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaseKind::AdversarialL1 => "adversarial_l1",
            BaseKind::L1Regression => "l1_regression",
            BaseKind::DiffusionNoise => "diffusion_noise",
        })
    }
}

impl std::str::FromStr for BaseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adversarial_l1" => Ok(Self::AdversarialL1),
            "l1_regression" => Ok(Self::L1Regression),
            "diffusion_noise" => Ok(Self::DiffusionNoise),
            other => Err(format!("unknown base loss `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_var: f64,
    pub kernel_k: usize,
    pub lambda_l1: f64,
    pub base_kind: BaseKind,
}

impl LossConfig {
    /// Weights used for the adversarial models: `lambda_var = 50`, `k = 15`,
    /// `lambda_l1 = 100`.
    pub fn paper_defaults(base_kind: BaseKind) -> Self {
        Self {
            lambda_var: 50.0,
            kernel_k: 15,
            lambda_l1: 100.0,
            base_kind,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.kernel_k % 2 == 0 || self.kernel_k < 3 {
            return Err(LossError::Config(format!(
                "kernel_k = {} must be odd and >= 3",
                self.kernel_k
            )));
        }
        for (name, v) in [("lambda_var", self.lambda_var), ("lambda_l1", self.lambda_l1)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// `base + lambda_var * var`, rejecting non-finite terms.
pub fn total_loss(base: f64, var: f64, cfg: &LossConfig, batch: &str) -> Result<f64, LossError> {
    let total = base + cfg.lambda_var * var;
    if !base.is_finite() || !var.is_finite() || !total.is_finite() {
        return Err(LossError::NonFinite {
            batch: batch.to_string(),
            base,
            var,
        });
    }
    Ok(total)
}

pub fn mean_abs_error(pred: &Raster, target: &Raster) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.data().len() as f64)
}

pub fn mean_squared_error(pred: &Raster, target: &Raster) -> Result<f64, LossError> {
    check_shapes(pred, target)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.data().len() as f64)
}

fn check_shapes(pred: &Raster, target: &Raster) -> Result<(), LossError> {
    if !pred.same_shape(target) {
        return Err(LossError::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Base objective on plain rasters.
///
/// `scores` are discriminator probabilities `D(x, G(x)) in (0, 1)` for the
/// generated sample; the generator term is `-mean(ln D)`.
pub fn base_loss(
    cfg: &LossConfig,
    pred: &Raster,
    target: &Raster,
    scores: Option<&[f64]>,
) -> Result<f64, LossError> {
    match (cfg.base_kind, scores) {
        (BaseKind::AdversarialL1, None) => Err(LossError::Config(
            "adversarial loss requires discriminator scores".into(),
        )),
        (BaseKind::AdversarialL1, Some(s)) => {
            if s.is_empty() {
                return Err(LossError::Config("empty discriminator score raster".into()));
            }
            let gan = -s.iter().map(|p| p.ln()).sum::<f64>() / s.len() as f64;
            Ok(gan + cfg.lambda_l1 * mean_abs_error(pred, target)?)
        }
        (_, Some(_)) => Err(LossError::Config(format!(
            "discriminator scores supplied for {}",
            cfg.base_kind
        ))),
        (BaseKind::L1Regression, None) => mean_abs_error(pred, target),
        (BaseKind::DiffusionNoise, None) => mean_squared_error(pred, target),
    }
}

/// One row of the per-step loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: u64,
    #[serde(rename = "L_base")]
    pub l_base: f64,
    /// Absent when the regularizer is disabled.
    #[serde(rename = "L_var")]
    pub l_var: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lambda_var: f64,
    pub k: usize,
}

pub fn write_loss_log(path: &Path, rows: &[LossLogRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()?;
    w.into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?
        .flush()
}

pub fn read_loss_log(path: &Path) -> std::io::Result<Vec<LossLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(std::io::Error::other)
}
