//! The sequential decision core: LLR trial state, sampling steps, decision
//! and stopping rules, and their error-controlling thresholds.
//!
//! A trial evolves in discrete time. At each instant the active sampling
//! rule picks the next set of sources to observe from the current state;
//! [`advance`] then draws observations for exactly that set, accumulates LLR
//! increments, and refreshes the derived quantities (ordering, positive
//! count, estimated anomalous subset). The stopping rule reads the ordered
//! LLRs; on stopping, the decision rule names the anomalous subset.
//!
//! Sampling steps:
//! - [`ordering_step`] — samples the continuously-pinned sets plus the
//!   smallest-LLR estimated-anomalous and largest-LLR estimated-normal
//!   sources, with one Bernoulli-randomized slot per side.
//! - [`probabilistic_step`] — each source independently with probability
//!   `c*_i` of the current estimate.
//! - [`full_sampling_step`] — every source, the classical baseline.
//! - [`stabilized_step`] — the ordering step with the estimate frozen at a
//!   fixed subset; a diagnostic construct.
//!
//! Two uniform draws are consumed by every ordering-type step even when the
//! fractional budget parts are zero, so trajectories stay reproducible when
//! the allocation changes.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::allocation::{split_count, AllocationResult};
use crate::math;
use crate::model::{GroundTruth, ProblemConfig};
use crate::subset::SourceSet;

/// Per-trial sequential state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialState {
    /// Current time `n` (number of completed instants).
    pub time: u64,
    /// Cumulative LLR per source, over its sampled observations only.
    pub llr: Vec<f64>,
    /// Number of times each source has been sampled.
    pub samples: Vec<u64>,
    /// Source indices sorted by decreasing LLR, ties by smallest index.
    pub ordering: Vec<usize>,
    /// Number of sources with strictly positive LLR.
    pub positives: usize,
    /// Currently estimated anomalous subset (always admissible).
    pub estimate: SourceSet,
}

impl TrialState {
    /// Fresh state at time 0: all LLRs zero, estimate of the smallest
    /// admissible size picked by the index tie rule.
    pub fn new(config: &ProblemConfig) -> Self {
        let m = config.num_sources;
        let mut state = TrialState {
            time: 0,
            llr: vec![0.0; m],
            samples: vec![0; m],
            ordering: (0..m).collect(),
            positives: 0,
            estimate: SourceSet::empty(),
        };
        state.refresh(config);
        state
    }

    /// Builds a state from explicit LLR values, refreshing all derived
    /// fields. Intended for randomized rule checks.
    pub fn with_llrs(config: &ProblemConfig, llr: Vec<f64>, samples: Vec<u64>, time: u64) -> Self {
        assert_eq!(llr.len(), config.num_sources);
        assert_eq!(samples.len(), config.num_sources);
        let mut state = TrialState {
            time,
            llr,
            samples,
            ordering: (0..config.num_sources).collect(),
            positives: 0,
            estimate: SourceSet::empty(),
        };
        state.refresh(config);
        state
    }

    /// Empirical sampling frequency `π_i(n) = N_i(n)/n`, zero at `n = 0`.
    pub fn frequency(&self, i: usize) -> f64 {
        if self.time == 0 {
            0.0
        } else {
            self.samples[i] as f64 / self.time as f64
        }
    }

    /// Re-sorts the ordering and recomputes positives and the estimate.
    pub(crate) fn refresh(&mut self, config: &ProblemConfig) {
        let llr = &self.llr;
        self.ordering
            .sort_unstable_by(|&a, &b| llr[b].total_cmp(&llr[a]).then(a.cmp(&b)));
        self.positives = llr.iter().filter(|&&v| v > 0.0).count();
        let size = decision_size(self.positives, config);
        self.estimate.assign_from(&self.ordering[..size]);
    }

    /// LLR at descending rank `k ∈ [1, M]`.
    fn ranked(&self, k: usize) -> f64 {
        self.llr[self.ordering[k - 1]]
    }
}

/// Stopping thresholds, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Thresholds {
    /// Known number of anomalies (`ℓ = u`): stop on an LLR gap of `c`.
    KnownCount { c: f64 },
    /// General bounds (`ℓ < u`): combined gap/interval rule.
    Range { a: f64, b: f64, c: f64, d: f64 },
}

impl Thresholds {
    /// Multiplies every threshold by `factor` (used by empirical
    /// calibration).
    pub fn scaled(&self, factor: f64) -> Thresholds {
        match *self {
            Thresholds::KnownCount { c } => Thresholds::KnownCount { c: c * factor },
            Thresholds::Range { a, b, c, d } => Thresholds::Range {
                a: a * factor,
                b: b * factor,
                c: c * factor,
                d: d * factor,
            },
        }
    }

    /// True when every component is strictly positive and finite.
    pub fn is_valid(&self) -> bool {
        match *self {
            Thresholds::KnownCount { c } => c > 0.0 && c.is_finite(),
            Thresholds::Range { a, b, c, d } => {
                [a, b, c, d].iter().all(|v| *v > 0.0 && v.is_finite())
            }
        }
    }
}

/// Error-controlling thresholds for the stopping rules.
///
/// With `ℓ = u`: `c = |ln(α∧β)| + ln(ℓ(M−ℓ))`. With `ℓ < u`:
/// `a = |ln β| + ln M`, `b = |ln α| + ln M`, `c = |ln α| + ln((M−ℓ)M)`,
/// `d = |ln β| + ln(uM)`. These are union-bound conservative for any
/// sampling rule.
pub fn compute_thresholds(config: &ProblemConfig) -> Thresholds {
    let m = config.num_sources as f64;
    let l = config.lower_bound as f64;
    let u = config.upper_bound as f64;
    let abs_ln_alpha = math::abs(math::ln(config.alpha));
    let abs_ln_beta = math::abs(math::ln(config.beta));
    if config.lower_bound == config.upper_bound {
        let worst = math::abs(math::ln(config.alpha.min(config.beta)));
        Thresholds::KnownCount {
            c: worst + math::ln(l * (m - l)),
        }
    } else {
        Thresholds::Range {
            a: abs_ln_beta + math::ln(m),
            b: abs_ln_alpha + math::ln(m),
            c: abs_ln_alpha + math::ln((m - l) * m),
            d: abs_ln_beta + math::ln(u * m),
        }
    }
}

/// The decision rule: the top `ℓ` LLR sources when `ℓ = u`, otherwise the
/// top `(p(n) ∨ ℓ) ∧ u`.
pub fn decision(state: &TrialState, config: &ProblemConfig) -> SourceSet {
    decision_from_parts(&state.ordering, state.positives, config)
}

fn decision_from_parts(ordering: &[usize], positives: usize, config: &ProblemConfig) -> SourceSet {
    let size = if config.lower_bound == config.upper_bound {
        config.lower_bound
    } else {
        positives.clamp(config.lower_bound, config.upper_bound)
    };
    ordering[..size].iter().copied().collect()
}

/// The stopping rule at the current state.
///
/// Known count: stop when the `ℓ`-th largest LLR exceeds the next by `c`.
/// General: stop when any of the three clauses holds — (i) the `(ℓ+1)`-th
/// LLR is at most `−a` and the gap above it is at least `c`; (ii) the number
/// of positive LLRs is within `[ℓ, u]` and every LLR is outside `(−a, b)`;
/// (iii) the `u`-th LLR is at least `b` and the gap below it is at least
/// `d`. Boundary ranks 0 and `M+1` behave as `+∞`/`−∞`, implemented as
/// explicit logic rather than float infinities.
pub fn should_stop(state: &TrialState, config: &ProblemConfig, thresholds: &Thresholds) -> bool {
    if state.time == 0 {
        return false;
    }
    let m = config.num_sources;
    let l = config.lower_bound;
    let u = config.upper_bound;
    match *thresholds {
        Thresholds::KnownCount { c } => {
            // 1 <= l = u <= M-1, so both ranks exist.
            state.ranked(l) - state.ranked(l + 1) >= c
        }
        Thresholds::Range { a, b, c, d } => {
            let clause_gap_low = {
                // l < M always, so rank l+1 exists; rank 0 acts as +inf.
                let below = state.ranked(l + 1);
                below <= -a && (l == 0 || state.ranked(l) - below >= c)
            };
            let clause_interval = {
                (l..=u).contains(&state.positives)
                    && state.llr.iter().all(|&v| v <= -a || v >= b)
            };
            let clause_gap_high = {
                let at = state.ranked(u);
                at >= b && (u == m || at - state.ranked(u + 1) >= d)
            };
            clause_gap_low || clause_interval || clause_gap_high
        }
    }
}

/// One sampling decision plus everything drawn while applying it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// `R(n+1)`, sorted ascending.
    pub sampled: Vec<usize>,
    /// Observations drawn for `sampled`, filled by [`advance`].
    pub observations: Vec<f64>,
    /// The two uniform randomization draws, when the step consumes them.
    pub randomization: Option<(f64, f64)>,
}

/// The ordering sampling step for the current estimate.
///
/// `alloc` must be the allocation of `state.estimate`.
pub fn ordering_step<R: Rng + ?Sized>(
    state: &TrialState,
    alloc: &AllocationResult,
    rng: &mut R,
) -> Result<StepOutcome, RuleError> {
    if alloc.subset != state.estimate {
        return Err(RuleError::EstimateMismatch);
    }
    ordered_selection(state, alloc, rng)
}

/// The ordering step with the estimate frozen at `alloc.subset`.
pub fn stabilized_step<R: Rng + ?Sized>(
    state: &TrialState,
    alloc: &AllocationResult,
    rng: &mut R,
) -> Result<StepOutcome, RuleError> {
    ordered_selection(state, alloc, rng)
}

fn ordered_selection<R: Rng + ?Sized>(
    state: &TrialState,
    alloc: &AllocationResult,
    rng: &mut R,
) -> Result<StepOutcome, RuleError> {
    // Fixed consumption: both draws happen every step.
    let z1: f64 = rng.gen();
    let z2: f64 = rng.gen();

    let m = state.llr.len();
    let estimate = &alloc.subset;
    let complement = estimate.complement(m);

    let take_hat = side_take(alloc.n_hat, alloc.g_hat.len(), z1);
    let take_check = side_take(alloc.n_check, alloc.g_check.len(), z2);

    let mut sampled: Vec<usize> =
        Vec::with_capacity(alloc.g_hat.len() + alloc.g_check.len() + take_hat + take_check);
    sampled.extend(alloc.g_hat.iter().copied());
    sampled.extend(alloc.g_check.iter().copied());

    pick_extremal(
        &state.llr,
        estimate.difference(&alloc.g_hat),
        take_hat,
        Side::SmallestLlr,
        &mut sampled,
    )?;
    pick_extremal(
        &state.llr,
        complement.difference(&alloc.g_check),
        take_check,
        Side::LargestLlr,
        &mut sampled,
    )?;

    sampled.sort_unstable();
    Ok(StepOutcome {
        sampled,
        observations: Vec::new(),
        randomization: Some((z1, z2)),
    })
}

/// `⌊N⌋ − |G| + 1{z < frac(N)}` with integer snapping.
fn side_take(budget: f64, pinned: usize, z: f64) -> usize {
    let (floor, frac) = split_count(budget);
    let extra = usize::from(frac > 0.0 && z < frac);
    floor
        .checked_sub(pinned)
        .expect("side budget below pinned-set size")
        + extra
}

enum Side {
    SmallestLlr,
    LargestLlr,
}

fn pick_extremal(
    llr: &[f64],
    candidates: SourceSet,
    take: usize,
    side: Side,
    out: &mut Vec<usize>,
) -> Result<(), RuleError> {
    if take == 0 {
        return Ok(());
    }
    if take > candidates.len() {
        return Err(RuleError::CandidateShortfall {
            requested: take,
            available: candidates.len(),
        });
    }
    let mut items: Vec<usize> = candidates.iter().copied().collect();
    match side {
        Side::SmallestLlr => {
            items.sort_unstable_by(|&a, &b| llr[a].total_cmp(&llr[b]).then(a.cmp(&b)))
        }
        Side::LargestLlr => {
            items.sort_unstable_by(|&a, &b| llr[b].total_cmp(&llr[a]).then(a.cmp(&b)))
        }
    }
    out.extend_from_slice(&items[..take]);
    Ok(())
}

/// The probabilistic sampling step: each source independently with
/// probability `c*_i` of the current estimate. Consumes exactly `M` uniform
/// draws per step.
pub fn probabilistic_step<R: Rng + ?Sized>(
    state: &TrialState,
    alloc: &AllocationResult,
    rng: &mut R,
) -> Result<StepOutcome, RuleError> {
    if alloc.subset != state.estimate {
        return Err(RuleError::EstimateMismatch);
    }
    let mut sampled = Vec::with_capacity(alloc.c_star.len());
    for (i, &c) in alloc.c_star.iter().enumerate() {
        let z: f64 = rng.gen();
        if z < c {
            sampled.push(i);
        }
    }
    Ok(StepOutcome {
        sampled,
        observations: Vec::new(),
        randomization: None,
    })
}

/// The full-sampling baseline: every source, every instant.
pub fn full_sampling_step(state: &TrialState) -> StepOutcome {
    StepOutcome {
        sampled: (0..state.llr.len()).collect(),
        observations: Vec::new(),
        randomization: None,
    }
}

/// Applies a sampling decision: draws one observation per sampled source
/// (recorded into `outcome.observations`), accumulates LLR increments,
/// advances time and refreshes the derived state.
///
/// Unsampled sources are untouched; nothing is ever drawn for them.
pub fn advance<R: Rng + ?Sized>(
    state: &mut TrialState,
    outcome: &mut StepOutcome,
    truth: &GroundTruth,
    config: &ProblemConfig,
    rng: &mut R,
) {
    outcome.observations.clear();
    outcome.observations.reserve(outcome.sampled.len());
    for &i in &outcome.sampled {
        let source = &config.sources[i];
        let x = source.draw_observation(truth.is_anomalous(i), rng);
        outcome.observations.push(x);
        state.llr[i] += source.llr_unchecked(x);
        state.samples[i] += 1;
    }
    state.time += 1;
    state.refresh(config);
}

/// Errors from sampling steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleError {
    /// The supplied allocation was computed for a different subset than the
    /// state's current estimate.
    EstimateMismatch,
    /// A side requested more ordered slots than it has candidates; valid
    /// allocations cannot produce this.
    CandidateShortfall { requested: usize, available: usize },
}

impl fmt::Display for RuleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleError::EstimateMismatch => {
                write!(f, "allocation subset does not match the current estimate")
            }
            RuleError::CandidateShortfall {
                requested,
                available,
            } => write!(
                f,
                "ordered selection requested {requested} sources but only {available} are available"
            ),
        }
    }
}

impl core::error::Error for RuleError {}
