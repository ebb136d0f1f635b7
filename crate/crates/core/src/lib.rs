//! Cover-based distributed observers for large-scale LTI systems.
//!
//! Agents observe only the subsystems they are physically coupled to instead
//! of the full plant state. The crate covers the whole chain:
//!
//! - [`netgraph`]: physical/communication network pairs and graph tools.
//! - [`coverage`]: the greedy cover solver, validation and audits.
//! - [`plant`]: block-sparse plants and the microgrid instance.
//! - [`gains`]: high-gain observer and controller synthesis.
//! - [`observer`]: the observer bank, fusion and the distributed control laws.
//! - [`simloop`]: RK4 closed-loop simulation and performance metrics.
//! - [`cli`]: the command-line front end.

pub mod cli;
pub mod coverage;
pub mod error;
pub mod gains;
pub mod linalg;
pub mod netgraph;
pub mod observer;
pub mod plant;
pub mod simloop;

pub use error::{Error, Result};
