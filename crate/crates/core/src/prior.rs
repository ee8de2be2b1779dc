//! Soft structural prior: per-pixel cell probability maps produced by a
//! pluggable segmentation backend, plus the thresholded mask kept for
//! ablations.
//!
//! Three backends ship with the crate:
//!
//! * [`BlobOracle`]: Gaussian blobs at known nucleus centers. Test oracle.
//! * [`IntensityBackend`]: classical nuclear likelihood from optical density
//!   (brightfield) or intensity (fluorescence), Gaussian-smoothed and passed
//!   through a logistic. Image-driven and weight-free.
//! * [`FilePriorBackend`]: ingests externally computed maps from
//!   `<root>/priors/<case_id>/<patch_id>.png` (16-bit gray, value / 65535).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::filters::{convolve_reflect, gaussian_taps};
use crate::io::{read_png, IoError};
use crate::raster::{ImagePatch, Raster, RasterError};

/// Default binarization threshold for the ablation mask.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("backend `{backend}` failed on {key}: {reason}")]
    Backend {
        backend: String,
        key: PatchKey,
        reason: String,
    },
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("invalid blob: {0}")]
    Blob(String),
    #[error("expected a 3-channel brightfield patch, got {0} channels")]
    Channels(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Identifies a patch for backends that look results up by name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchKey {
    pub case_id: String,
    pub patch_id: String,
}

impl PatchKey {
    pub fn new(case_id: impl Into<String>, patch_id: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            patch_id: patch_id.into(),
        }
    }
}

impl std::fmt::Display for PatchKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.case_id, self.patch_id)
    }
}

/// Continuous cell probability map, one channel, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrior(Raster);

impl SoftPrior {
    pub fn new(prob: Raster) -> Result<Self, RasterError> {
        if prob.channels() != 1 {
            return Err(RasterError::Shape(format!(
                "prior must have one channel, got {}",
                prob.channels()
            )));
        }
        prob.check_range(crate::raster::ValueRange::Unit)?;
        Ok(Self(prob))
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col, 0)
    }

    /// Number of distinct probability values (bitwise comparison).
    pub fn distinct_values(&self) -> usize {
        let mut bits: Vec<u64> = self.0.data().iter().map(|v| v.to_bits()).collect();
        bits.sort_unstable();
        bits.dedup();
        bits.len()
    }
}

/// `1[prob > t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    threshold: f64,
    mask: Vec<u8>,
}

impl BinaryMask {
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// The mask as a `{0, 1}` probability map, for feeding the same channel
    /// slot as the soft prior.
    pub fn to_prior(&self) -> SoftPrior {
        let data = self.mask.iter().map(|&m| m as f64).collect();
        SoftPrior(Raster::new(self.height, self.width, 1, data).expect("mask shape"))
    }
}

pub fn binarize(prior: &SoftPrior, threshold: f64) -> Result<BinaryMask, PriorError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PriorError::Threshold(threshold));
    }
    Ok(BinaryMask {
        height: prior.height(),
        width: prior.width(),
        threshold,
        mask: prior.0.data().iter().map(|&p| u8::from(p > threshold)).collect(),
    })
}

/// A segmentation model producing a per-pixel cell probability map.
///
/// `image` is in `[0, 1]`; brightfield patches have 3 channels, fluorescence
/// nuclear channels have 1. Implementations must return identical maps for
/// identical inputs and must be safe to call concurrently.
pub trait SegmentationBackend: Send + Sync {
    fn name(&self) -> &str;

    fn deterministic(&self) -> bool {
        true
    }

    fn probability_map(&self, key: &PatchKey, image: &Raster) -> Result<Raster, String>;
}

/// Runs `backend` once on a brightfield patch and validates its output.
pub fn generate_soft_prior(
    x: &ImagePatch,
    key: &PatchKey,
    backend: &dyn SegmentationBackend,
) -> Result<SoftPrior, PriorError> {
    if x.channels() != 3 {
        return Err(PriorError::Channels(x.channels()));
    }
    let range = x.range();
    let unit = x.raster().map(|v| range.to_unit(v));
    run_backend(backend, key, &unit)
}

/// Runs `backend` once on an arbitrary `[0,1]` raster (e.g. a nuclear
/// fluorescence channel).
pub fn run_backend(
    backend: &dyn SegmentationBackend,
    key: &PatchKey,
    image: &Raster,
) -> Result<SoftPrior, PriorError> {
    let fail = |reason: String| PriorError::Backend {
        backend: backend.name().to_string(),
        key: key.clone(),
        reason,
    };
    let prob = backend.probability_map(key, image).map_err(fail)?;
    if !prob.same_spatial(image) || prob.channels() != 1 {
        return Err(fail(format!(
            "returned {:?} for a {}x{} input",
            prob.dims(),
            image.height(),
            image.width()
        )));
    }
    SoftPrior::new(prob).map_err(|e| fail(e.to_string()))
}

/// A nucleus center for the blob oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

/// `p(q) = max_i exp(-|q - c_i|^2 / (2 (r_i / 2)^2))`.
#[derive(Debug, Clone)]
pub struct BlobOracle {
    blobs: Vec<Blob>,
    seed: u64,
    name: String,
}

/// Builds the blob oracle; an empty center list yields an all-zero map.
pub fn synthetic_blob_backend(blobs: Vec<Blob>, seed: u64) -> Result<BlobOracle, PriorError> {
    if let Some(b) = blobs
        .iter()
        .find(|b| !(b.radius > 0.0) || !b.row.is_finite() || !b.col.is_finite())
    {
        return Err(PriorError::Blob(format!("{b:?}")));
    }
    Ok(BlobOracle {
        blobs,
        seed,
        name: format!("blob-oracle-{seed}"),
    })
}

impl BlobOracle {
    pub fn blobs(&self) -> &[Blob] {
        &self.blobs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn value_at(&self, row: f64, col: f64) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let d2 = (row - b.row).powi(2) + (col - b.col).powi(2);
                let s = b.radius / 2.0;
                (-d2 / (2.0 * s * s)).exp()
            })
            .fold(0.0, f64::max)
            .clamp(0.0, 1.0)
    }
}

impl SegmentationBackend for BlobOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn probability_map(&self, _key: &PatchKey, image: &Raster) -> Result<Raster, String> {
        let (h, w) = (image.height() as f64, image.width() as f64);
        if let Some(b) = self
            .blobs
            .iter()
            .find(|b| b.row < 0.0 || b.col < 0.0 || b.row >= h || b.col >= w)
        {
            return Err(format!("blob center ({}, {}) outside {h}x{w}", b.row, b.col));
        }
        Ok(Raster::from_fn(image.height(), image.width(), 1, |r, c, _| {
            self.value_at(r as f64, c as f64)
        }))
    }
}

/// Classical nuclear-likelihood backend.
///
/// Brightfield (3 channels): mean optical density `-ln(I)` over RGB, which
/// is high for hematoxylin- and DAB-stained nuclei and low for background.
/// Fluorescence (1 channel): raw intensity. The signal is Gaussian-smoothed
/// and mapped through `1 / (1 + exp(-(s - level) / width))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityBackend {
    pub sigma: f64,
    pub od_level: f64,
    pub fluorescence_level: f64,
    pub width: f64,
}

impl Default for IntensityBackend {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            od_level: 0.3,
            fluorescence_level: 0.35,
            width: 0.05,
        }
    }
}

impl IntensityBackend {
    fn signal(&self, image: &Raster) -> Result<Raster, String> {
        match image.channels() {
            1 => Ok(image.clone()),
            3 => {
                let data = image
                    .data()
                    .chunks_exact(3)
                    .map(|px| px.iter().map(|&v| -(v.max(1.0 / 255.0)).ln()).sum::<f64>() / 3.0)
                    .collect();
                Raster::new(image.height(), image.width(), 1, data).map_err(|e| e.to_string())
            }
            n => Err(format!("unsupported channel count {n}")),
        }
    }
}

impl SegmentationBackend for IntensityBackend {
    fn name(&self) -> &str {
        "intensity"
    }

    fn probability_map(&self, _key: &PatchKey, image: &Raster) -> Result<Raster, String> {
        let level = if image.channels() == 1 {
            self.fluorescence_level
        } else {
            self.od_level
        };
        let signal = self.signal(image)?;
        let size = 2 * (3.0 * self.sigma).ceil() as usize + 1;
        let smooth = if self.sigma > 0.0 {
            convolve_reflect(&signal, &gaussian_taps(size, self.sigma))
        } else {
            signal
        };
        Ok(smooth.map(|s| 1.0 / (1.0 + (-(s - level) / self.width).exp())))
    }
}

/// Reads precomputed maps from `<root>/priors/<case_id>/<patch_id>.png`.
#[derive(Debug, Clone)]
pub struct FilePriorBackend {
    root: PathBuf,
}

impl FilePriorBackend {
    pub fn new(dataset_root: impl Into<PathBuf>) -> Self {
        Self {
            root: dataset_root.into(),
        }
    }

    pub fn path_for(&self, key: &PatchKey) -> PathBuf {
        prior_path(&self.root, key)
    }
}

pub fn prior_path(dataset_root: &Path, key: &PatchKey) -> PathBuf {
    dataset_root
        .join("priors")
        .join(&key.case_id)
        .join(format!("{}.png", key.patch_id))
}

impl SegmentationBackend for FilePriorBackend {
    fn name(&self) -> &str {
        "file"
    }

    fn probability_map(&self, key: &PatchKey, image: &Raster) -> Result<Raster, String> {
        let path = self.path_for(key);
        let map = read_png(&path).map_err(|e: IoError| e.to_string())?;
        if map.channels() != 1 {
            return Err(format!("{} is not grayscale", path.display()));
        }
        if map.same_spatial(image) {
            Ok(map)
        } else {
            // Patches are resized on load; the stored map follows the same path.
            if map.height() < crate::raster::MIN_RESIZE_EXTENT || map.width() < crate::raster::MIN_RESIZE_EXTENT {
                return Err(format!("{} is degenerate", path.display()));
            }
            Ok(map.resize_bilinear(image.height(), image.width()))
        }
    }
}

/// Serializable backend selector used by configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Intensity,
    File,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intensity" => Ok(Self::Intensity),
            "file" => Ok(Self::File),
            other => Err(format!("unknown prior backend `{other}`")),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Intensity => "intensity",
            Self::File => "file",
        })
    }
}

pub fn make_backend(kind: BackendKind, dataset_root: &Path) -> Box<dyn SegmentationBackend> {
    match kind {
        BackendKind::Intensity => Box::new(IntensityBackend::default()),
        BackendKind::File => Box::new(FilePriorBackend::new(dataset_root)),
    }
}
