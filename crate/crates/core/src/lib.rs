//! Sequential identification of anomalous data sources under a sampling
//! constraint.
//!
//! `M` independent sources each follow one of two hypothesized densities; the
//! sources following the alternative are "anomalous". At every time instant a
//! sampling rule picks a subset of sources to observe (at most `K` per instant
//! on average), a stopping rule decides when enough evidence has accumulated,
//! and a decision rule names the anomalous subset, with familywise false
//! positive/negative probabilities controlled at user-specified levels.
//!
//! The crate is split into three layers:
//!
//! - [`model`] — source distributions, log-likelihood ratios, KL numbers, and
//!   the problem configuration (`M`, `ℓ`, `u`, `K`, `α`, `β`).
//! - [`allocation`] — the static sampling-effort mathematics: per-subset
//!   effort summaries, the `x(A)`/`y(A)` split, critical sampling frequencies
//!   `c*`, per-side budgets and the continuously-sampled sets.
//! - [`rules`] — the sequential core: LLR trial state, ordering /
//!   probabilistic / full / stabilized sampling steps, decision rules,
//!   stopping rules and their error-controlling thresholds.
//!
//! Everything here is `no_std` + `alloc`; Monte Carlo execution, calibration
//! and file formats live in the companion `seqident` crate.
//!
//! All logarithms are natural; LLRs, KL numbers and thresholds are in nats.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod allocation;
pub mod model;
pub mod rules;
pub mod subset;

mod math;

pub use allocation::{AllocationCache, AllocationError, AllocationResult, KlSummary};
pub use model::{ConfigError, Density, GroundTruth, ModelError, ProblemConfig, SourceModel};
pub use rules::{RuleError, StepOutcome, Thresholds, TrialState};
pub use subset::SourceSet;

/// Absolute tolerance for floating-point case splits (branch boundaries,
/// integer snapping). Case boundaries are measure-zero ties where either
/// branch yields a consistent allocation.
pub const CASE_TOLERANCE: f64 = 1e-9;

/// `true` when `a` and `b` are within [`CASE_TOLERANCE`] of each other.
#[inline]
pub(crate) fn nearly_equal(a: f64, b: f64) -> bool {
    math::abs(a - b) <= CASE_TOLERANCE
}
