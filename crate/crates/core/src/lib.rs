//! Budgeted batch classification with early-exit networks.
//!
//! A network with several exit heads can stop early on easy inputs. Given
//! a total compute budget for a batch, this crate decides how much of the
//! batch each head should classify, turns those rates into per-head
//! confidence thresholds on a calibration set, and routes test instances
//! through the heads so the batch stays within budget with high
//! probability.
//!
//! The usual flow is [`io::load_manifest`], [`pipeline::calibrate`] and
//! [`pipeline::infer`]. [`oracle`] gives the best achievable accuracy for
//! comparison and [`synth`] generates synthetic head outputs.

pub mod allocation;
pub mod calibration;
pub mod domain;
pub mod inference;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod scoring;
pub mod synth;

pub use allocation::{solve_allocation, AllocationProblem};
pub use calibration::Correction;
pub use domain::{
    AllocationResult, BatchResult, BatchSummary, BudgetSpec, Dataset, DomainError, ExitPolicy,
    HeadBank, HeadSlice, Split, SplitData,
};
pub use pipeline::{CalibrateConfig, Calibration, PipelineError};
pub use scoring::{ScoreKind, ScoreSpec};
