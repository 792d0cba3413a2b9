use thiserror::Error;

use s2fuse_autograd::GraphError;

use crate::dataset::DatasetError;
use crate::guidance::GuideError;
use crate::metrics::MetricError;
use crate::network::ModelError;
use crate::raster::RasterError;
use crate::training::TrainError;

/// Broad failure category, used to pick a process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad or missing input data, unreadable files.
    Data,
    /// Non-finite values or a diverging computation.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Guide(#[from] GuideError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        let numeric = match self {
            Error::Raster(e) => matches!(e, RasterError::NonFinite),
            Error::Dataset(e) => matches!(e, DatasetError::Raster(RasterError::NonFinite)),
            Error::Graph(e) | Error::Model(ModelError::Graph(e)) | Error::Guide(GuideError::Graph(e)) => {
                matches!(e, GraphError::NonFinite { .. })
            }
            Error::Train(e) => e.is_numeric(),
            _ => false,
        };
        if numeric {
            ErrorClass::Numeric
        } else {
            ErrorClass::Data
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
