//! Learning from a stream of large data chunks under a compute budget.
//!
//! Data arrives as a stream of `B` mega-batches. A learner decides how many
//! mega-batches to wait for before each training event, optionally replays
//! everything seen so far, and may grow its capacity between events. After
//! every arrival it is scored on a fixed test set, and the run is summarised
//! by the cumulative error rate together with cumulative parameter and FLOP
//! counts.
//!
//! Module map:
//!
//! - [`numkit`]: dense float64 matrices, parameter sets, MLP forward/backward,
//!   optimizers and a finite-difference gradient oracle.
//! - [`stream`]: mega-batch partitioning, waiting-time schedule, replay and
//!   mini-batch iteration.
//! - [`gmoe`]: tree-gated mixture-of-experts layers that grow by splitting
//!   their worst expert.
//! - [`learners`]: single models, ensembles, uniform mixtures, growing
//!   ensembles and growing MoE networks behind one handle.
//! - [`metrics`]: the per-arrival ledger, cumulative metrics and the FLOP
//!   cost model.
//! - [`harness`]: configs, datasets, the stream driver, checkpoints, reports.

pub mod error;
pub mod gmoe;
pub mod harness;
pub mod learners;
pub mod metrics;
pub mod numkit;
pub mod stream;

pub use error::{Error, Result};
