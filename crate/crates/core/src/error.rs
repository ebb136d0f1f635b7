use thiserror::Error;

/// Errors raised by the network, cover, synthesis and simulation layers.
///
/// Node and set identifiers carried in messages are 1-based so they line up
/// with the graph and cover file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("no communication path between node {from} and node {to}")]
    Unreachable { from: usize, to: usize },

    #[error("communication subgraph induced by {nodes:?} is disconnected")]
    DisconnectedSubgraph { nodes: Vec<usize> },

    #[error("similarity undefined: both edge sets are empty")]
    EmptyEdgeSets,

    #[error("could not reach similarity {target:.3} after {attempts} attempts (best {best:.3})")]
    SimilarityNotReached {
        target: f64,
        best: f64,
        attempts: usize,
    },

    #[error("invalid cover assignment: {0}")]
    InvalidCover(String),

    #[error("node {node} does not estimate subsystem {target}")]
    NotEstimated { node: usize, target: usize },

    #[error("pareto audit limited to {limit} nodes, got {n}")]
    AuditTooLarge { n: usize, limit: usize },

    #[error("dimension mismatch in {block}: expected {expected}, got {got}")]
    Dimension {
        block: String,
        expected: String,
        got: String,
    },

    #[error("pair is not observable: {0}")]
    Unobservable(String),

    #[error("pair is not controllable: {0}")]
    Uncontrollable(String),

    #[error("pole placement failed: {0}")]
    Placement(String),

    #[error("matrix is not Hurwitz (spectral abscissa {abscissa:.3e})")]
    NotHurwitz { abscissa: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("coupling gain {gamma:.4e} does not exceed the lower bound {bound:.4e}")]
    GammaTooSmall { gamma: f64, bound: f64 },

    #[error("simulation diverged at step {step} (t = {time:.6}): {reason}")]
    Diverged {
        step: usize,
        time: f64,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad inputs (files, flags, graph shape) as
    /// opposed to numerical breakdowns.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidNetwork(_)
                | Error::InvalidCover(_)
                | Error::Dimension { .. }
                | Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::AuditTooLarge { .. }
                | Error::EmptyEdgeSets
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
