//! Monte Carlo execution: single trials, experiment grids, threshold
//! calibration and sampling-frequency probes.
//!
//! Trials are embarrassingly parallel. Every trial owns a ChaCha stream
//! seeded by a stable mix of `(master seed, rule tag, truth index, trial
//! index)`, and per-cell aggregation folds records in trial-index order, so
//! results are bit-identical between serial and parallel execution and
//! across runs. Worker count follows rayon's `RAYON_NUM_THREADS`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use seqident_core::allocation::{allocation, AllocationError, AllocationResult};
use seqident_core::model::{ConfigError, GroundTruth, ProblemConfig};
use seqident_core::rules::{
    advance, compute_thresholds, full_sampling_step, ordering_step, probabilistic_step,
    should_stop, stabilized_step, RuleError, Thresholds, TrialState,
};
use seqident_core::{AllocationCache, SourceSet};

/// Default cap on trial length; the stopping rules are almost surely finite,
/// but the harness must not hang on a misconfiguration.
pub const DEFAULT_HORIZON: u64 = 1_000_000;

/// The sampling rules the harness can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Ordering rule: pinned sets plus extremal-LLR slots per side.
    Ordering,
    /// Each source independently with its critical frequency.
    Probabilistic,
    /// Every source, every instant.
    Full,
    /// Ordering rule with the estimate frozen at the trial's truth.
    Stabilized,
}

impl RuleKind {
    pub fn label(self) -> &'static str {
        match self {
            RuleKind::Ordering => "ordering",
            RuleKind::Probabilistic => "probabilistic",
            RuleKind::Full => "full",
            RuleKind::Stabilized => "stabilized",
        }
    }

    /// Stable tag mixed into per-trial seeds. Never renumber.
    fn seed_tag(self) -> u64 {
        match self {
            RuleKind::Ordering => 1,
            RuleKind::Probabilistic => 2,
            RuleKind::Full => 3,
            RuleKind::Stabilized => 4,
        }
    }
}

impl std::str::FromStr for RuleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordering" => Ok(RuleKind::Ordering),
            "probabilistic" => Ok(RuleKind::Probabilistic),
            "full" => Ok(RuleKind::Full),
            "stabilized" => Ok(RuleKind::Stabilized),
            other => Err(format!(
                "unknown rule '{other}' (expected ordering | probabilistic | full | stabilized)"
            )),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trial seed: `splitmix64` chained over master seed, rule tag, truth
/// index and trial index. Stable across versions; documented in the README.
pub fn trial_seed(master: u64, rule: RuleKind, truth_index: u64, trial_index: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ rule.seed_tag());
    h = splitmix64(h ^ truth_index);
    splitmix64(h ^ trial_index)
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    /// Stopping time `T` (or the horizon, when truncated).
    pub stopping_time: u64,
    /// Final decision `Δ(T)`.
    pub final_decision: SourceSet,
    /// `Δ(T) \ A ≠ ∅`.
    pub false_positive: bool,
    /// `A \ Δ(T) ≠ ∅`.
    pub false_negative: bool,
    /// Total observations `Σ_n |R(n)|`.
    pub total_observations: u64,
    /// First instant after which the estimate stayed at the truth until
    /// stopping, when that happened.
    pub settle_time: Option<u64>,
    /// Final empirical sampling frequencies `π_i(T)`.
    pub final_frequencies: Vec<f64>,
    /// Horizon hit before the stopping rule fired.
    pub truncated: bool,
}

/// Executes a single trial of `rule` against `truth`.
pub fn run_trial(
    config: &ProblemConfig,
    truth: &GroundTruth,
    rule: RuleKind,
    thresholds: &Thresholds,
    horizon: u64,
    seed: u64,
) -> Result<TrialRecord, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrialState::new(config);
    let mut cache = AllocationCache::new();
    let frozen: Option<AllocationResult> = match rule {
        RuleKind::Stabilized => Some(allocation(config, &truth.anomalous)?),
        _ => None,
    };
    let mut current: Option<AllocationResult> = None;
    let mut total_observations = 0u64;
    let mut settle: Option<u64> = None;

    for _ in 0..horizon {
        let mut outcome = match rule {
            RuleKind::Full => full_sampling_step(&state),
            RuleKind::Stabilized => {
                stabilized_step(&state, frozen.as_ref().expect("frozen set"), &mut rng)?
            }
            RuleKind::Ordering | RuleKind::Probabilistic => {
                let stale = current
                    .as_ref()
                    .is_none_or(|a| a.subset != state.estimate);
                if stale {
                    current = Some(cache.get_or_compute(config, &state.estimate)?.clone());
                }
                let alloc = current.as_ref().expect("allocation present");
                match rule {
                    RuleKind::Ordering => ordering_step(&state, alloc, &mut rng)?,
                    _ => probabilistic_step(&state, alloc, &mut rng)?,
                }
            }
        };
        advance(&mut state, &mut outcome, truth, config, &mut rng);
        total_observations += outcome.sampled.len() as u64;
        if state.estimate == truth.anomalous {
            settle.get_or_insert(state.time);
        } else {
            settle = None;
        }
        if should_stop(&state, config, thresholds) {
            return Ok(finish(
                config,
                truth,
                &state,
                total_observations,
                settle,
                false,
            ));
        }
    }
    Ok(finish(config, truth, &state, total_observations, settle, true))
}

fn finish(
    config: &ProblemConfig,
    truth: &GroundTruth,
    state: &TrialState,
    total_observations: u64,
    settle: Option<u64>,
    truncated: bool,
) -> TrialRecord {
    let decision = state.estimate.clone();
    let false_positive = !decision.difference(&truth.anomalous).is_empty();
    let false_negative = !truth.anomalous.difference(&decision).is_empty();
    TrialRecord {
        stopping_time: state.time,
        final_decision: decision,
        false_positive,
        false_negative,
        total_observations,
        settle_time: settle,
        final_frequencies: (0..config.num_sources)
            .map(|i| state.frequency(i))
            .collect(),
        truncated,
    }
}

/// Aggregates for one `(rule, truth)` cell. Truncated trials are counted
/// separately and excluded from all means and rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub rule: RuleKind,
    pub truth: Vec<usize>,
    pub trials: u64,
    pub truncated: u64,
    pub mean_stopping_time: f64,
    pub se_stopping_time: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    /// `Σ observations / Σ T` over completed trials.
    pub budget_ratio: f64,
    /// Delta-method standard error of the budget ratio.
    pub se_budget_ratio: f64,
    pub mean_settle_time: f64,
    pub settled_trials: u64,
    /// Probe result `max_i |π̄_i - c_i(A)|`, when a probe was requested.
    pub freq_deviation: Option<f64>,
}

/// Aggregates trial records in index order (the fold order pins the
/// floating-point sums, which keeps reports bit-exact across executions).
pub fn aggregate_cell(rule: RuleKind, truth: &GroundTruth, records: &[TrialRecord]) -> CellStats {
    let mut n = 0u64;
    let mut truncated = 0u64;
    let (mut sum_t, mut sum_t2) = (0.0f64, 0.0f64);
    let (mut sum_r, mut sum_r2, mut sum_rt) = (0.0f64, 0.0f64, 0.0f64);
    let (mut fp, mut fn_) = (0u64, 0u64);
    let (mut settle_sum, mut settled) = (0.0f64, 0u64);
    for rec in records {
        if rec.truncated {
            truncated += 1;
            continue;
        }
        n += 1;
        let t = rec.stopping_time as f64;
        let r = rec.total_observations as f64;
        sum_t += t;
        sum_t2 += t * t;
        sum_r += r;
        sum_r2 += r * r;
        sum_rt += r * t;
        fp += u64::from(rec.false_positive);
        fn_ += u64::from(rec.false_negative);
        if let Some(s) = rec.settle_time {
            settle_sum += s as f64;
            settled += 1;
        }
    }
    let nf = n as f64;
    let mean_t = if n > 0 { sum_t / nf } else { f64::NAN };
    let var_t = if n > 1 {
        ((sum_t2 - sum_t * sum_t / nf) / (nf - 1.0)).max(0.0)
    } else {
        f64::NAN
    };
    let ratio = if sum_t > 0.0 { sum_r / sum_t } else { f64::NAN };
    // D_i = R_i - ratio*T_i has zero mean by construction of the ratio.
    let se_ratio = if n > 1 && sum_t > 0.0 {
        let var_d = ((sum_r2 - 2.0 * ratio * sum_rt + ratio * ratio * sum_t2) / (nf - 1.0)).max(0.0);
        (var_d / nf).sqrt() / (sum_t / nf)
    } else {
        f64::NAN
    };
    CellStats {
        rule,
        truth: truth.anomalous.iter().copied().collect(),
        trials: records.len() as u64,
        truncated,
        mean_stopping_time: mean_t,
        se_stopping_time: if n > 1 { (var_t / nf).sqrt() } else { f64::NAN },
        fp_rate: if n > 0 { fp as f64 / nf } else { f64::NAN },
        fn_rate: if n > 0 { fn_ as f64 / nf } else { f64::NAN },
        budget_ratio: ratio,
        se_budget_ratio: se_ratio,
        mean_settle_time: if settled > 0 {
            settle_sum / settled as f64
        } else {
            f64::NAN
        },
        settled_trials: settled,
        freq_deviation: None,
    }
}

/// Runs `trials` trials of one `(rule, truth)` cell in parallel, preserving
/// trial-index order in the returned records.
pub fn run_cell(
    config: &ProblemConfig,
    truth: &GroundTruth,
    truth_index: u64,
    rule: RuleKind,
    thresholds: &Thresholds,
    trials: u64,
    master_seed: u64,
    horizon: u64,
) -> Result<Vec<TrialRecord>, EngineError> {
    if trials == 0 {
        return Err(EngineError::ZeroTrials);
    }
    (0..trials)
        .into_par_iter()
        .map(|t| {
            run_trial(
                config,
                truth,
                rule,
                thresholds,
                horizon,
                trial_seed(master_seed, rule, truth_index, t),
            )
        })
        .collect()
}

/// Probe settings: run the rule without stopping to a fixed horizon and
/// compare empirical frequencies against the theoretical limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub horizon: u64,
    pub trials: u64,
}

/// Full experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellStats>,
    pub master_seed: u64,
    pub trials: u64,
    pub horizon: u64,
    pub total_truncated: u64,
}

/// Runs the full `(rule × truth)` grid.
///
/// `rule_thresholds` carries one resolved threshold set per rule, so
/// calibrated, analytic and explicit runs share one code path.
pub fn run_experiment(
    config: &ProblemConfig,
    truths: &[GroundTruth],
    rule_thresholds: &[(RuleKind, Thresholds)],
    trials: u64,
    master_seed: u64,
    horizon: u64,
    probe: Option<ProbeSettings>,
) -> Result<ExperimentReport, EngineError> {
    if trials == 0 {
        return Err(EngineError::ZeroTrials);
    }
    let mut cells = Vec::with_capacity(rule_thresholds.len() * truths.len());
    let mut total_truncated = 0u64;
    for &(rule, ref thresholds) in rule_thresholds {
        for (ti, truth) in truths.iter().enumerate() {
            let records = run_cell(
                config,
                truth,
                ti as u64,
                rule,
                thresholds,
                trials,
                master_seed,
                horizon,
            )?;
            let mut stats = aggregate_cell(rule, truth, &records);
            if let Some(p) = probe {
                if rule != RuleKind::Full {
                    let report = frequency_convergence_probe(
                        config,
                        truth,
                        rule,
                        p.horizon,
                        p.trials,
                        trial_seed(master_seed, rule, ti as u64, u64::MAX / 2),
                    )?;
                    stats.freq_deviation = Some(report.max_deviation);
                }
            }
            total_truncated += stats.truncated;
            cells.push(stats);
        }
    }
    Ok(ExperimentReport {
        cells,
        master_seed,
        trials,
        horizon,
        total_truncated,
    })
}

/// Result of an empirical threshold calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rule: RuleKind,
    /// Common factor applied to the analytic thresholds.
    pub scale: f64,
    pub thresholds: Thresholds,
    /// Worst-case empirical rates over the calibration truths at `scale`.
    pub achieved_fp: f64,
    pub achieved_fn: f64,
    /// Every `(scale, worst fp, worst fn)` evaluated along the way.
    pub evaluations: Vec<(f64, f64, f64)>,
}

/// Acceptance band for calibration: worst-case error within
/// `[0.5, 1.5] × target`, the resolution Monte Carlo affords near rare-event
/// targets.
pub const CALIBRATION_BAND: (f64, f64) = (0.5, 1.5);
const CALIBRATION_MIN_SCALE: f64 = 0.05;
const CALIBRATION_MAX_EVALS: usize = 12;

/// Calibrates the stopping thresholds by bisecting a common scale factor on
/// the analytic thresholds until the worst-case familywise error over
/// `truths` lands near the targets.
///
/// The analytic thresholds are conservative by construction, so the bracket
/// is `(0, 1]`: scale 1 must sit at or below the targets, and the scale
/// shrinks until the error climbs into the acceptance band. Scaling one
/// common factor (rather than searching each threshold separately) keeps the
/// error-tradeoff structure of the analytic solution.
pub fn calibrate_thresholds(
    config: &ProblemConfig,
    truths: &[GroundTruth],
    rule: RuleKind,
    trials: u64,
    master_seed: u64,
    horizon: u64,
) -> Result<Calibration, EngineError> {
    if trials == 0 {
        return Err(EngineError::ZeroTrials);
    }
    let analytic = compute_thresholds(config);
    let (target_fp, target_fn) = (config.alpha, config.beta);
    let mut evaluations: Vec<(f64, f64, f64)> = Vec::new();

    let measure = |scale: f64,
                       eval_index: u64,
                       evaluations: &mut Vec<(f64, f64, f64)>|
     -> Result<(f64, f64), EngineError> {
        let thresholds = analytic.scaled(scale);
        let (mut worst_fp, mut worst_fn) = (0.0f64, 0.0f64);
        for (ti, truth) in truths.iter().enumerate() {
            let records = run_cell(
                config,
                truth,
                ti as u64,
                rule,
                &thresholds,
                trials,
                splitmix64(master_seed ^ (0xCA11 + eval_index)),
                horizon,
            )?;
            let stats = aggregate_cell(rule, truth, &records);
            worst_fp = worst_fp.max(stats.fp_rate);
            worst_fn = worst_fn.max(stats.fn_rate);
        }
        evaluations.push((scale, worst_fp, worst_fn));
        Ok((worst_fp, worst_fn))
    };

    let badness = |fp: f64, fn_: f64| (fp / target_fp).max(fn_ / target_fn);
    let in_band = |fp: f64, fn_: f64| {
        let b = badness(fp, fn_);
        (CALIBRATION_BAND.0..=CALIBRATION_BAND.1).contains(&b)
    };
    let done = |scale: f64, fp: f64, fn_: f64, evaluations: Vec<(f64, f64, f64)>| Calibration {
        rule,
        scale,
        thresholds: analytic.scaled(scale),
        achieved_fp: fp,
        achieved_fn: fn_,
        evaluations,
    };

    // Bracket endpoint 1: analytic thresholds must respect the targets.
    let (fp1, fn1) = measure(1.0, 0, &mut evaluations)?;
    if badness(fp1, fn1) > CALIBRATION_BAND.1 {
        return Err(EngineError::AnalyticThresholdsNotConservative {
            fp: fp1,
            fn_: fn1,
            alpha: target_fp,
            beta: target_fn,
        });
    }
    if in_band(fp1, fn1) {
        return Ok(done(1.0, fp1, fn1, evaluations));
    }

    let (mut lo, mut hi) = (CALIBRATION_MIN_SCALE, 1.0);
    let (fp_lo, fn_lo) = measure(lo, 1, &mut evaluations)?;
    if in_band(fp_lo, fn_lo) {
        return Ok(done(lo, fp_lo, fn_lo, evaluations));
    }
    if badness(fp_lo, fn_lo) < CALIBRATION_BAND.0 {
        return Err(EngineError::CalibrationTargetUnattainable {
            scale: lo,
            fp: fp_lo,
            fn_: fn_lo,
            alpha: target_fp,
            beta: target_fn,
        });
    }

    for eval in 2..(2 + CALIBRATION_MAX_EVALS as u64) {
        let mid = 0.5 * (lo + hi);
        let (fp, fn_) = measure(mid, eval, &mut evaluations)?;
        if in_band(fp, fn_) {
            return Ok(done(mid, fp, fn_, evaluations));
        }
        if badness(fp, fn_) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(EngineError::CalibrationDidNotConverge { evaluations })
}

/// Result of a frequency-convergence probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Theoretical limit frequency per source.
    pub limits: Vec<f64>,
    /// Trial-averaged empirical frequency per source at the probe horizon.
    pub mean_frequencies: Vec<f64>,
    /// `max_i |π̄_i - c_i(A)|`.
    pub max_deviation: f64,
    /// Sources the allocation pins (`Ĝ ∪ Ǧ`).
    pub pinned: Vec<usize>,
    /// True when every pinned source was sampled at every instant of every
    /// trial.
    pub pinned_exact: bool,
}

/// Runs `rule` without stopping to `horizon` and reports how far the
/// empirical sampling frequencies sit from their theoretical limits.
pub fn frequency_convergence_probe(
    config: &ProblemConfig,
    truth: &GroundTruth,
    rule: RuleKind,
    horizon: u64,
    trials: u64,
    master_seed: u64,
) -> Result<ProbeReport, EngineError> {
    if trials == 0 {
        return Err(EngineError::ZeroTrials);
    }
    let alloc = allocation(config, &truth.anomalous)?;
    let limits = match rule {
        RuleKind::Full => vec![1.0; config.num_sources],
        _ => alloc.limit_frequencies(config),
    };
    let pinned: Vec<usize> = alloc
        .g_hat
        .iter()
        .chain(alloc.g_check.iter())
        .copied()
        .collect();

    let per_trial: Vec<(Vec<f64>, bool)> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(Vec<f64>, bool), EngineError> {
            let seed = trial_seed(master_seed, rule, 0, t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = TrialState::new(config);
            let mut cache = AllocationCache::new();
            let mut current: Option<AllocationResult> = None;
            for _ in 0..horizon {
                let mut outcome = match rule {
                    RuleKind::Full => full_sampling_step(&state),
                    RuleKind::Stabilized => stabilized_step(&state, &alloc, &mut rng)?,
                    RuleKind::Ordering | RuleKind::Probabilistic => {
                        let stale = current
                            .as_ref()
                            .is_none_or(|a| a.subset != state.estimate);
                        if stale {
                            current = Some(cache.get_or_compute(config, &state.estimate)?.clone());
                        }
                        let a = current.as_ref().expect("allocation present");
                        match rule {
                            RuleKind::Ordering => ordering_step(&state, a, &mut rng)?,
                            _ => probabilistic_step(&state, a, &mut rng)?,
                        }
                    }
                };
                advance(&mut state, &mut outcome, truth, config, &mut rng);
            }
            let freqs: Vec<f64> = (0..config.num_sources)
                .map(|i| state.frequency(i))
                .collect();
            let exact = pinned.iter().all(|&i| state.samples[i] == horizon);
            Ok((freqs, exact))
        })
        .collect::<Result<_, _>>()?;

    let mut mean = vec![0.0f64; config.num_sources];
    let mut pinned_exact = true;
    for (freqs, exact) in &per_trial {
        for (m, f) in mean.iter_mut().zip(freqs.iter()) {
            *m += f;
        }
        pinned_exact &= exact;
    }
    for m in mean.iter_mut() {
        *m /= trials as f64;
    }
    let max_deviation = mean
        .iter()
        .zip(limits.iter())
        .map(|(m, c)| (m - c).abs())
        .fold(0.0f64, f64::max);
    Ok(ProbeReport {
        limits,
        mean_frequencies: mean,
        max_deviation,
        pinned,
        pinned_exact,
    })
}

/// Engine-level errors.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("experiment requires at least one trial")]
    ZeroTrials,
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("analytic thresholds measured above target: fp={fp}, fn={fn_} vs alpha={alpha}, beta={beta}")]
    AnalyticThresholdsNotConservative {
        fp: f64,
        fn_: f64,
        alpha: f64,
        beta: f64,
    },
    #[error("calibration target unattainable: at minimum scale {scale} the worst rates fp={fp}, fn={fn_} sit below the targets alpha={alpha}, beta={beta}")]
    CalibrationTargetUnattainable {
        scale: f64,
        fp: f64,
        fn_: f64,
        alpha: f64,
        beta: f64,
    },
    #[error("calibration did not converge; evaluations (scale, fp, fn): {evaluations:?}")]
    CalibrationDidNotConverge { evaluations: Vec<(f64, f64, f64)> },
}
