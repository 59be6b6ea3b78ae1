use thiserror::Error;

use crate::feedforward::FeedforwardError;
use crate::markov::MarkovError;
use crate::model::ModelError;
use crate::riccati::RiccatiError;
use crate::scenario::ScenarioError;
use crate::simulate::SimulationError;
use crate::stability::StabilityError;
use crate::turnpike::TurnpikeError;

/// Any failure the crate reports, with a coarse category for exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Feedforward(#[from] FeedforwardError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Turnpike(#[from] TurnpikeError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// 1 for invalid input, 2 for numerical failure, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Scenario(ScenarioError::Io { .. }) => 3,
            Error::Markov(_) | Error::Model(_) | Error::Scenario(_) => 1,
            Error::Simulation(SimulationError::InvalidConfig(_)) => 1,
            Error::Riccati(RiccatiError::InvalidGrid { .. } | RiccatiError::HorizonList(_)) => 1,
            Error::Turnpike(TurnpikeError::InvalidHorizons(_) | TurnpikeError::Model(_)) => 1,
            Error::Feedforward(FeedforwardError::Model(_)) => 1,
            _ => 2,
        }
    }
}
