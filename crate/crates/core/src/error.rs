use crate::baselines::BaselineError;
use crate::bins::BinError;
use crate::dataset::DatasetError;
use crate::eval::EvalError;
use crate::event_stream::EventError;
use crate::jsonl::JsonlError;
use crate::kmc::KmcError;
use crate::pipeline::PipelineError;
use crate::species_graph::FormulaError;
use crate::trajectory_io::TrajectoryError;

/// Union of every module error, for callers that drive several stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Formula(#[from] FormulaError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Bin(#[from] BinError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Kmc(#[from] KmcError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

impl Error {
    /// True when the input or configuration is at fault rather than a
    /// stage failing on valid input.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Trajectory(e) => !matches!(e, TrajectoryError::Io { .. }),
            Error::Formula(_) | Error::Bin(_) | Error::Dataset(_) => true,
            Error::Event(e) => !matches!(e, EventError::Trajectory(TrajectoryError::Io { .. })),
            Error::Kmc(e) => !matches!(e, KmcError::Io(_) | KmcError::NoConvergence { .. }),
            Error::Baseline(e) => matches!(
                e,
                BaselineError::Hyperparams(_)
                    | BaselineError::UnknownKind(_)
                    | BaselineError::Version { .. }
                    | BaselineError::ZeroK
                    | BaselineError::ZeroSteps
                    | BaselineError::EmptyHistory
                    | BaselineError::WrongDirection { .. }
                    | BaselineError::MixedDirections
            ),
            Error::Eval(e) => !matches!(e, EvalError::Io { .. } | EvalError::Jsonl(_)),
            Error::Pipeline(e) => e.is_validation(),
            Error::Jsonl(e) => matches!(e, JsonlError::Parse { .. }),
        }
    }
}
