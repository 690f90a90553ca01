//! Symbolic event toolchain for reactive molecular dynamics.
//!
//! Frames carrying bond orders are thresholded into connectivity graphs,
//! split into molecular species, tracked across time and run-length
//! encoded into `(formula, duration)` events. Those events feed an
//! instruction-dataset builder, count-based and regression baselines, an
//! evaluation harness, and a semi-Markov generator used as ground truth.

pub mod baselines;
pub mod bins;
pub mod dataset;
pub mod elements;
pub mod eval;
pub mod event_stream;
pub mod jsonl;
pub mod kmc;
pub mod pipeline;
pub mod seed;
pub mod species_graph;
pub mod trajectory_io;

mod error;

pub use error::Error;
pub use event_stream::MolecularEvent;
pub use species_graph::CanonicalFormula;
pub use trajectory_io::Frame;

pub type Result<T, E = Error> = std::result::Result<T, E>;
