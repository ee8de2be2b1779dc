//! Exit-code classification.

use std::fmt;

use vstain_core::metrics::MetricError;
use vstain_core::models::ModelError;
use vstain_core::training::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Numerical => 3,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        kind: Kind::Usage,
        error: anyhow::anyhow!(msg.into()),
    }
}

pub fn data(msg: impl Into<String>) -> Failure {
    Failure {
        kind: Kind::Data,
        error: anyhow::anyhow!(msg.into()),
    }
}

fn classify(e: &vstain_core::Error) -> Kind {
    use vstain_core::Error as E;
    let metric = |m: &MetricError| match m {
        MetricError::UnfrozenThreshold | MetricError::FrozenThreshold(_) => Kind::Usage,
        _ => Kind::Data,
    };
    match e {
        E::Config(_) => Kind::Usage,
        E::Model(ModelError::NonFinite { .. }) => Kind::Numerical,
        E::Metric(m) => metric(m),
        E::Train(t) => match t {
            TrainError::Config(_) => Kind::Usage,
            TrainError::NonFinite { .. } | TrainError::Model(ModelError::NonFinite { .. }) => Kind::Numerical,
            TrainError::Metric(m) => metric(m),
            _ => Kind::Data,
        },
        _ => Kind::Data,
    }
}

impl From<vstain_core::Error> for Failure {
    fn from(e: vstain_core::Error) -> Self {
        Failure {
            kind: classify(&e),
            error: e.into(),
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                vstain_core::Error::from(e).into()
            }
        }
    )*};
}

via_core!(
    TrainError,
    ModelError,
    MetricError,
    vstain_core::training::ConfigError,
    vstain_core::data::DataError,
    vstain_core::io::IoError,
    vstain_core::prior::PriorError,
    vstain_core::raster::RasterError
);

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            kind: Kind::Data,
            error: e.into(),
        }
    }
}
