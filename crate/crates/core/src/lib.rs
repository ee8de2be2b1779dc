//! Virtual staining from brightfield IHC to multiplex immunofluorescence,
//! conditioned on a soft cell-probability prior and trained with a
//! local-variance-preserving loss.

pub mod data;
pub mod filters;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod prior;
pub mod raster;
pub mod training;

pub use data::{Layout, PairedSample, Split, SplitManifest};
pub use losses::{BaseKind, LossConfig};
pub use metrics::{InstanceLabelMap, Ki67Threshold, MetricReport};
pub use prior::{binarize, generate_soft_prior, BinaryMask, PatchKey, SegmentationBackend, SoftPrior};
pub use raster::{concat_channels, denormalize, normalize, resize_to_256, ImagePatch, MifStack, Raster, ValueRange};
pub use training::{Arch, ExperimentConfig, PriorMode};

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Raster(#[from] raster::RasterError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Prior(#[from] prior::PriorError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Config(#[from] training::ConfigError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
}
