use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::backends::{BackendError, TemplateError};
use crate::compute::FitError;
use crate::config::{ConfigErrors, LoadError};
use crate::domain::RegistryError;
use crate::io::IoError;
use crate::reward::RewardError;
use crate::toa::SearchError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl Error {
    /// Short machine-readable category, used in error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Load(_) => "config_load",
            Error::Template(_) => "template",
            Error::Backend(_) => "backend",
            Error::Reward(_) => "reward",
            Error::Registry(_) => "registry",
            Error::Search(_) => "search",
            Error::Analysis(_) => "analysis",
            Error::Fit(_) => "fit",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
