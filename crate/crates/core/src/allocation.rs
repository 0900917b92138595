//! Static sampling-effort allocation for a candidate anomalous subset `A`.
//!
//! For each admissible subset the theory prescribes how much long-run
//! sampling effort each side of the partition needs:
//!
//! - [`KlSummary`] collects the minimum and harmonic-mean KL numbers of the
//!   two sides and the derived per-side effort scales `K̂(A)`, `Ǩ(A)`.
//! - [`compute_xy`] resolves the fractions `x(A), y(A)` of that effort via a
//!   case analysis over the subset size, the asymmetry parameter `r`, and
//!   `θ_A = I*(A)/J*(A)`.
//! - [`compute_c_star`] turns those into the per-source critical sampling
//!   frequencies `c*_i(A)`.
//! - [`select_budgets`] picks the per-side budgets `N̂(A), Ň(A)` (default
//!   `x·K̂`, `y·Ǩ`; overrides validated against the feasibility system).
//! - [`select_g_sets`] picks the sets `Ĝ(A), Ǧ(A)` of sources the ordering
//!   rule samples at every instant.
//!
//! [`allocation`] composes the five steps; [`AllocationCache`] memoizes the
//! result per subset, lazily — a trial only ever touches the few subsets its
//! estimate visits, so the full power set is never materialized.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::model::ProblemConfig;
use crate::subset::SourceSet;
use crate::{nearly_equal, CASE_TOLERANCE};

/// Per-subset KL summary and effort scales.
///
/// Empty-side conventions: the minimum over an empty side is `+∞` (and the
/// harmonic mean likewise), while `K̂(∅) = 0` and `Ǩ([M]) = 0`. `theta` is
/// meaningful only when both sides are nonempty; the sentinels make it `+∞`
/// for `A = ∅` and `0` for `A = [M]`, and the case analysis never consumes
/// it there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlSummary {
    /// `I*(A) = min{I_i : i ∈ A}`.
    pub i_star: f64,
    /// Harmonic mean of `{I_i : i ∈ A}`.
    pub i_tilde: f64,
    /// `J*(A) = min{J_i : i ∉ A}`.
    pub j_star: f64,
    /// Harmonic mean of `{J_i : i ∉ A}`.
    pub j_tilde: f64,
    /// `K̂(A) = Σ_{i∈A} I*(A)/I_i`, zero for the empty set.
    pub k_hat: f64,
    /// `Ǩ(A) = Σ_{i∉A} J*(A)/J_i`, zero for the full set.
    pub k_check: f64,
    /// `θ_A = I*(A)/J*(A)`.
    pub theta: f64,
}

/// Computes the KL summary of `subset` under `config`.
pub fn kl_summary(config: &ProblemConfig, subset: &SourceSet) -> KlSummary {
    let (i_star, i_tilde, k_hat) = side_summary(subset.iter().map(|&i| config.kl_alt_null(i)));
    let complement = subset.complement(config.num_sources);
    let (j_star, j_tilde, k_check) =
        side_summary(complement.iter().map(|&i| config.kl_null_alt(i)));
    KlSummary {
        i_star,
        i_tilde,
        j_star,
        j_tilde,
        k_hat,
        k_check,
        theta: i_star / j_star,
    }
}

/// `(min, harmonic mean, Σ min/value)` of one side; `(∞, ∞, 0)` when empty.
fn side_summary(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let mut count = 0usize;
    let mut min = f64::INFINITY;
    let mut inv_sum = 0.0;
    for v in values {
        count += 1;
        if v < min {
            min = v;
        }
        inv_sum += 1.0 / v;
    }
    if count == 0 {
        (f64::INFINITY, f64::INFINITY, 0.0)
    } else {
        (min, count as f64 / inv_sum, min * inv_sum)
    }
}

#[inline]
fn pos(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Ratio with the empty-side convention: a zero denominator means there is
/// nothing to sample on that side, so the allocated fraction is zero.
#[inline]
fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[inline]
fn min3(a: f64, b: f64, c: f64) -> f64 {
    let m = if a < b { a } else { b };
    if m < c {
        m
    } else {
        c
    }
}

/// Resolves the effort split `(x(A), y(A)) ∈ [0,1]²`.
///
/// Branch boundaries are compared with [`CASE_TOLERANCE`]; at a boundary the
/// equality-inclusive branch is taken. With `|A| = ℓ` the `r ≤ 1` sub-case is
/// checked before `z_A = θ_A/(r-1)` is ever formed, so `r = 1` never divides
/// by zero (mirrored for `|A| = u`).
pub fn compute_xy(config: &ProblemConfig, subset: &SourceSet) -> Result<(f64, f64), AllocationError> {
    let summary = kl_summary(config, subset);
    xy_from_summary(config, subset.len(), &summary)
}

pub(crate) fn xy_from_summary(
    config: &ProblemConfig,
    size: usize,
    s: &KlSummary,
) -> Result<(f64, f64), AllocationError> {
    if !config.admits_size(size) {
        return Err(AllocationError::SubsetSizeOutOfBounds {
            size,
            lower: config.lower_bound,
            upper: config.upper_bound,
        });
    }
    let (l, u, m) = (config.lower_bound, config.upper_bound, config.num_sources);
    let (k, r) = (config.budget, config.r);
    let (kh, kc, th) = (s.k_hat, s.k_check, s.theta);
    let tol = CASE_TOLERANCE;

    let (x, y) = if l == u {
        // Known number of anomalies: 1 <= l = u <= M-1, both sides nonempty.
        if kh <= th * kc + tol {
            (
                (k / kh).min(1.0),
                ratio_or_zero(pos(k - kh), kc).min(1.0),
            )
        } else {
            (
                ratio_or_zero(pos(k - kc), kh).min(1.0),
                (k / kc).min(1.0),
            )
        }
    } else if size > l && size < u {
        let x = min3(k / (kh + (th / r) * kc), r / th, 1.0);
        (x, (th / r) * x)
    } else if size == l {
        if l == 0 || r <= 1.0 + tol {
            (0.0, (k / kc).min(1.0))
        } else {
            let z = th / (r - 1.0);
            if z < 1.0 - tol && k > kh + z * kc + tol {
                (1.0, ((k - kh) / kc).min(1.0))
            } else {
                (
                    min3(k / (kh + z * kc), 1.0 / z, 1.0),
                    min3(k / (kc + kh / z), z, 1.0),
                )
            }
        }
    } else {
        // size == u
        if u == m || r >= 1.0 - tol {
            ((k / kh).min(1.0), 0.0)
        } else {
            let w = (1.0 / th) / (1.0 / r - 1.0);
            if w < 1.0 - tol && k > kc + w * kh + tol {
                (((k - kc) / kh).min(1.0), 1.0)
            } else {
                (
                    min3(k / (kh + kc / w), w, 1.0),
                    min3(k / (kc + w * kh), 1.0 / w, 1.0),
                )
            }
        }
    };

    // Products of clamped factors can overshoot 1 by an ulp.
    let (x, y) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
    debug_assert!(x + y > 0.0);
    Ok((x, y))
}

/// Critical long-run sampling frequencies `c*_i(A)`:
/// `x(A)·I*(A)/I_i` on `A`, `y(A)·J*(A)/J_i` off `A`.
pub fn compute_c_star(
    config: &ProblemConfig,
    subset: &SourceSet,
) -> Result<Vec<f64>, AllocationError> {
    let summary = kl_summary(config, subset);
    let (x, y) = xy_from_summary(config, subset.len(), &summary)?;
    Ok(c_star_from_parts(config, subset, &summary, x, y))
}

fn c_star_from_parts(
    config: &ProblemConfig,
    subset: &SourceSet,
    s: &KlSummary,
    x: f64,
    y: f64,
) -> Vec<f64> {
    let mut c = vec![0.0; config.num_sources];
    for i in 0..config.num_sources {
        c[i] = if subset.contains(i) {
            x * s.i_star / config.kl_alt_null(i)
        } else {
            y * s.j_star / config.kl_null_alt(i)
        };
    }
    c
}

/// Selects the per-side sampling budgets `(N̂(A), Ň(A))`.
///
/// The default is `N̂ = x(A)·K̂(A)`, `Ň = y(A)·Ǩ(A)`, which always satisfies
/// the feasibility system. A configured override is accepted only if it
/// satisfies every inequality of the system plus the per-side size caps; a
/// violation reports the inequality by name.
pub fn select_budgets(
    config: &ProblemConfig,
    subset: &SourceSet,
) -> Result<(f64, f64), AllocationError> {
    let summary = kl_summary(config, subset);
    let (x, y) = xy_from_summary(config, subset.len(), &summary)?;
    budgets_from_parts(config, subset, &summary, x, y)
}

fn budgets_from_parts(
    config: &ProblemConfig,
    subset: &SourceSet,
    s: &KlSummary,
    x: f64,
    y: f64,
) -> Result<(f64, f64), AllocationError> {
    let tol = CASE_TOLERANCE;
    let floor_hat = x * s.k_hat;
    let floor_check = y * s.k_check;
    // The default choice is feasible by construction; keep that guarded.
    assert!(
        floor_hat + floor_check <= config.budget + tol,
        "default budgets exceed K: {} + {} > {}",
        floor_hat,
        floor_check,
        config.budget
    );
    let Some(ov) = config.budget_override else {
        return Ok((floor_hat, floor_check));
    };
    let a_len = subset.len() as f64;
    let comp_len = (config.num_sources - subset.len()) as f64;
    let violated = if ov.n_hat + ov.n_check > config.budget + tol {
        Some("n_hat + n_check <= K")
    } else if ov.n_hat < floor_hat - tol {
        Some("n_hat >= x(A) * k_hat(A)")
    } else if ov.n_check < floor_check - tol {
        Some("n_check >= y(A) * k_check(A)")
    } else if ov.n_hat > a_len + tol {
        Some("n_hat <= |A|")
    } else if ov.n_check > comp_len + tol {
        Some("n_check <= |A^c|")
    } else {
        None
    };
    if let Some(inequality) = violated {
        return Err(AllocationError::BudgetOverrideInfeasible {
            inequality,
            n_hat: ov.n_hat,
            n_check: ov.n_check,
        });
    }
    Ok((ov.n_hat, ov.n_check))
}

/// Selects the continuously-sampled sets `(Ĝ(A), Ǧ(A))` for the given
/// budgets.
///
/// Three branches per side: the whole side when the budget snaps to its
/// size; empty when the budget is below the side's effort scale; otherwise
/// the minimal prefix of the side's sources ordered by ascending KL number
/// (ties by smallest index) that brings the residual budget below the
/// residual effort scale. The search is guaranteed to terminate; this is
/// assert-checked.
pub fn select_g_sets(
    config: &ProblemConfig,
    subset: &SourceSet,
    budgets: (f64, f64),
) -> (SourceSet, SourceSet) {
    let complement = subset.complement(config.num_sources);
    let g_hat = g_side(
        subset,
        budgets.0,
        subset.iter().map(|&i| (i, config.kl_alt_null(i))).collect(),
    );
    let g_check = g_side(
        &complement,
        budgets.1,
        complement
            .iter()
            .map(|&i| (i, config.kl_null_alt(i)))
            .collect(),
    );
    (g_hat, g_check)
}

fn g_side(side: &SourceSet, budget: f64, mut items: Vec<(usize, f64)>) -> SourceSet {
    let n = items.len();
    assert!(
        budget >= -CASE_TOLERANCE && budget <= n as f64 + CASE_TOLERANCE,
        "side budget {budget} outside [0, {n}]"
    );
    if nearly_equal(budget, n as f64) {
        return side.clone();
    }
    items.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    if budget < scale_of(&items) - CASE_TOLERANCE {
        return SourceSet::empty();
    }
    // Minimal prefix length g with budget - g < scale of the remainder.
    for g in 1..n {
        if budget - (g as f64) < scale_of(&items[g..]) - CASE_TOLERANCE {
            return items[..g].iter().map(|&(i, _)| i).collect();
        }
    }
    unreachable!("prefix search must terminate by {} items", n - 1);
}

/// `Σ min/value` over a slice sorted ascending by value.
fn scale_of(items: &[(usize, f64)]) -> f64 {
    let min = items[0].1;
    items.iter().map(|&(_, v)| min / v).sum()
}

/// Full allocation for one subset: summary, effort split, critical
/// frequencies, budgets and continuously-sampled sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub subset: SourceSet,
    pub summary: KlSummary,
    pub x: f64,
    pub y: f64,
    pub c_star: Vec<f64>,
    pub n_hat: f64,
    pub n_check: f64,
    pub g_hat: SourceSet,
    pub g_check: SourceSet,
}

impl AllocationResult {
    /// The long-run sampling frequencies the ordering rule settles into when
    /// the estimate stays at this subset: 1 on the pinned sets, and on each
    /// unpinned side the KL-equalizing solution (`c_i·I_i` constant) whose
    /// total matches the side budget net of the pinned sources.
    pub fn limit_frequencies(&self, config: &ProblemConfig) -> Vec<f64> {
        let m = config.num_sources;
        let mut c = vec![0.0; m];
        for &i in self.g_hat.iter().chain(self.g_check.iter()) {
            c[i] = 1.0;
        }
        let hat_free = self.subset.difference(&self.g_hat);
        if !hat_free.is_empty() {
            let total = self.n_hat - self.g_hat.len() as f64;
            let inv_sum: f64 = hat_free.iter().map(|&i| 1.0 / config.kl_alt_null(i)).sum();
            for &i in hat_free.iter() {
                c[i] = total / (config.kl_alt_null(i) * inv_sum);
            }
        }
        let check_free = self
            .subset
            .complement(m)
            .difference(&self.g_check);
        if !check_free.is_empty() {
            let total = self.n_check - self.g_check.len() as f64;
            let inv_sum: f64 = check_free
                .iter()
                .map(|&i| 1.0 / config.kl_null_alt(i))
                .sum();
            for &i in check_free.iter() {
                c[i] = total / (config.kl_null_alt(i) * inv_sum);
            }
        }
        c
    }
}

/// Composes the allocation pipeline for `subset`.
pub fn allocation(
    config: &ProblemConfig,
    subset: &SourceSet,
) -> Result<AllocationResult, AllocationError> {
    if !subset.within(config.num_sources) {
        return Err(AllocationError::SubsetOutOfRange {
            num_sources: config.num_sources,
        });
    }
    let summary = kl_summary(config, subset);
    let (x, y) = xy_from_summary(config, subset.len(), &summary)?;
    let c_star = c_star_from_parts(config, subset, &summary, x, y);
    let (n_hat, n_check) = budgets_from_parts(config, subset, &summary, x, y)?;
    let (g_hat, g_check) = select_g_sets(config, subset, (n_hat, n_check));
    Ok(AllocationResult {
        subset: subset.clone(),
        summary,
        x,
        y,
        c_star,
        n_hat,
        n_check,
        g_hat,
        g_check,
    })
}

/// Lazy per-subset memo of allocation results.
///
/// Owned by a single trial; recomputation across trials is idempotent, so no
/// cross-trial sharing is needed.
#[derive(Debug, Default, Clone)]
pub struct AllocationCache {
    map: BTreeMap<SourceSet, AllocationResult>,
}

impl AllocationCache {
    pub fn new() -> Self {
        AllocationCache {
            map: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Returns the cached allocation for `subset`, computing it on first use.
    pub fn get_or_compute(
        &mut self,
        config: &ProblemConfig,
        subset: &SourceSet,
    ) -> Result<&AllocationResult, AllocationError> {
        if !self.map.contains_key(subset) {
            let result = allocation(config, subset)?;
            self.map.insert(subset.clone(), result);
        }
        Ok(self.map.get(subset).expect("just inserted"))
    }
}

/// Errors from the allocation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum AllocationError {
    /// Subset mentions a source index outside `[0, M)`.
    SubsetOutOfRange { num_sources: usize },
    /// `|A|` outside `[ℓ, u]`.
    SubsetSizeOutOfBounds {
        size: usize,
        lower: usize,
        upper: usize,
    },
    /// A configured budget override violates the named inequality.
    BudgetOverrideInfeasible {
        inequality: &'static str,
        n_hat: f64,
        n_check: f64,
    },
}

impl fmt::Display for AllocationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocationError::SubsetOutOfRange { num_sources } => {
                write!(f, "subset contains indices outside [0, {num_sources})")
            }
            AllocationError::SubsetSizeOutOfBounds { size, lower, upper } => write!(
                f,
                "subset size {size} outside the admissible range [{lower}, {upper}]"
            ),
            AllocationError::BudgetOverrideInfeasible {
                inequality,
                n_hat,
                n_check,
            } => write!(
                f,
                "budget override (n_hat={n_hat}, n_check={n_check}) violates: {inequality}"
            ),
        }
    }
}

impl core::error::Error for AllocationError {}

/// Floors a per-side budget into integer part and Bernoulli remainder,
/// snapping values within [`CASE_TOLERANCE`] of an integer.
pub fn split_count(budget: f64) -> (usize, f64) {
    let rounded = math::round(budget);
    if math::abs(budget - rounded) <= CASE_TOLERANCE {
        (rounded as usize, 0.0)
    } else {
        let fl = math::floor(budget);
        (fl as usize, budget - fl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProblemConfig;
    use approx::assert_abs_diff_eq;
    use std::vec::Vec;

    fn fig_homogeneous() -> ProblemConfig {
        ProblemConfig::homogeneous_gaussian(10, 1, 6, 5.0, 1e-3, 1e-3, 0.5).unwrap()
    }

    /// Two-tier setup: means 0.5 on the lower half, 1.0 on the upper half.
    fn fig_heterogeneous() -> ProblemConfig {
        let means: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else { 1.0 }).collect();
        ProblemConfig::gaussian_from_means(&means, 1, 6, 5.0, 1e-3, 1e-3).unwrap()
    }

    fn prefix(m: usize) -> SourceSet {
        (0..m).collect()
    }

    #[test]
    fn summary_homogeneous() {
        let cfg = fig_homogeneous();
        let s = kl_summary(&cfg, &prefix(3));
        assert_eq!(s.i_star, 0.125);
        assert_abs_diff_eq!(s.i_tilde, 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.k_hat, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.k_check, 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.theta, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn summary_empty_and_full_conventions() {
        let cfg = ProblemConfig::homogeneous_gaussian(6, 0, 6, 3.0, 1e-3, 1e-3, 0.5).unwrap();
        let s = kl_summary(&cfg, &SourceSet::empty());
        assert_eq!(s.k_hat, 0.0);
        assert!(s.i_star.is_infinite());
        let s = kl_summary(&cfg, &SourceSet::full(6));
        assert_eq!(s.k_check, 0.0);
        assert!(s.j_star.is_infinite());
    }

    #[test]
    fn summary_two_tier_slow_half() {
        // All slow sources: minimum equals the harmonic mean, scale is |A|.
        let cfg = fig_heterogeneous();
        let s = kl_summary(&cfg, &prefix(5));
        assert_eq!(s.i_star, 0.125);
        assert_abs_diff_eq!(s.i_tilde, 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.k_hat, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn summary_forms_agree() {
        // |A| * I*/Ĩ equals Σ I*/I_i.
        let cfg = fig_heterogeneous();
        for m in 1..=6 {
            let a = prefix(m);
            let s = kl_summary(&cfg, &a);
            let via_harmonic = a.len() as f64 * s.i_star / s.i_tilde;
            assert_abs_diff_eq!(via_harmonic, s.k_hat, epsilon = 1e-12);
            let via_harmonic =
                (cfg.num_sources - a.len()) as f64 * s.j_star / s.j_tilde;
            assert_abs_diff_eq!(via_harmonic, s.k_check, epsilon = 1e-12);
        }
    }

    #[test]
    fn xy_known_count_symmetric() {
        // l = u = 5, M = 10, homogeneous, K = 5: effort fits the anomalous
        // side exactly.
        let cfg = ProblemConfig::homogeneous_gaussian(10, 5, 5, 5.0, 1e-3, 1e-3, 0.5).unwrap();
        let (x, y) = compute_xy(&cfg, &prefix(5)).unwrap();
        assert_eq!((x, y), (1.0, 0.0));
    }

    #[test]
    fn xy_at_lower_bound_zero() {
        let cfg = ProblemConfig::homogeneous_gaussian(10, 0, 6, 5.0, 1e-3, 1e-3, 0.5).unwrap();
        let (x, y) = compute_xy(&cfg, &SourceSet::empty()).unwrap();
        assert_eq!(x, 0.0);
        assert_abs_diff_eq!(y, 0.5, epsilon = 1e-12); // K/Ǩ = 5/10
    }

    #[test]
    fn xy_interior_homogeneous() {
        let cfg = fig_homogeneous();
        let (x, y) = compute_xy(&cfg, &prefix(3)).unwrap();
        assert_abs_diff_eq!(x, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn xy_rejects_inadmissible_size() {
        let cfg = fig_homogeneous();
        assert!(matches!(
            compute_xy(&cfg, &prefix(7)),
            Err(AllocationError::SubsetSizeOutOfBounds { .. })
        ));
    }

    #[test]
    fn xy_r_equal_one_routes_to_first_subcase() {
        // |A| = l > 0 with r = 1 must take the r <= 1 branch (x = 0).
        let cfg = fig_homogeneous();
        let (x, y) = compute_xy(&cfg, &prefix(1)).unwrap();
        assert_eq!(x, 0.0);
        assert_abs_diff_eq!(y, 5.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn c_star_examples() {
        let cfg = ProblemConfig::homogeneous_gaussian(10, 5, 5, 5.0, 1e-3, 1e-3, 0.5).unwrap();
        let c = compute_c_star(&cfg, &prefix(5)).unwrap();
        for i in 0..10 {
            assert_eq!(c[i], if i < 5 { 1.0 } else { 0.0 });
        }
        let cfg = fig_homogeneous();
        let c = compute_c_star(&cfg, &prefix(3)).unwrap();
        for i in 0..10 {
            assert_abs_diff_eq!(c[i], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn c_star_sums_match_split_effort() {
        // Σ_{i∈A} c*_i = x·K̂ and Σ_{i∉A} c*_i = y·Ǩ on random configs.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let m = rng.gen_range(3..=9);
            let means: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..2.0)).collect();
            let upper = rng.gen_range(1..=m);
            let lower = rng.gen_range(0..=upper.min(m - 1));
            let k = rng.gen_range(0.5..=m as f64);
            let alpha = 10f64.powf(-rng.gen_range(1.0..4.0));
            let beta = 10f64.powf(-rng.gen_range(1.0..4.0));
            let Ok(cfg) = ProblemConfig::gaussian_from_means(&means, lower, upper, k, alpha, beta)
            else {
                continue;
            };
            let size = rng.gen_range(lower..=upper);
            let mut idx: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let a: SourceSet = idx[..size].iter().copied().collect();
            let s = kl_summary(&cfg, &a);
            let (x, y) = compute_xy(&cfg, &a).unwrap();
            let c = compute_c_star(&cfg, &a).unwrap();
            let sum_in: f64 = a.iter().map(|&i| c[i]).sum();
            let sum_out: f64 = (0..m).filter(|i| !a.contains(*i)).map(|i| c[i]).sum();
            assert_abs_diff_eq!(sum_in, x * s.k_hat, epsilon = 1e-10);
            assert_abs_diff_eq!(sum_out, y * s.k_check, epsilon = 1e-10);
        }
    }

    #[test]
    fn default_budgets() {
        let cfg = fig_homogeneous();
        let (nh, nc) = select_budgets(&cfg, &prefix(3)).unwrap();
        assert_abs_diff_eq!(nh, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nc, 3.5, epsilon = 1e-12);
        let cfg = ProblemConfig::homogeneous_gaussian(10, 5, 5, 5.0, 1e-3, 1e-3, 0.5).unwrap();
        let (nh, nc) = select_budgets(&cfg, &prefix(5)).unwrap();
        assert_abs_diff_eq!(nh, 5.0, epsilon = 1e-12);
        assert_eq!(nc, 0.0);
    }

    #[test]
    fn override_above_total_budget_rejected() {
        let cfg = fig_homogeneous().with_budget_override(6.0, 0.0).unwrap();
        let err = select_budgets(&cfg, &prefix(3)).unwrap_err();
        assert!(matches!(
            err,
            AllocationError::BudgetOverrideInfeasible {
                inequality: "n_hat + n_check <= K",
                ..
            }
        ));
    }

    #[test]
    fn override_below_side_floor_rejected() {
        let cfg = fig_homogeneous().with_budget_override(1.0, 3.5).unwrap();
        let err = select_budgets(&cfg, &prefix(3)).unwrap_err();
        assert!(matches!(
            err,
            AllocationError::BudgetOverrideInfeasible {
                inequality: "n_hat >= x(A) * k_hat(A)",
                ..
            }
        ));
    }

    #[test]
    fn feasible_override_accepted() {
        // Two-tier setup with K = 8 leaves slack at |A| = 6: the default
        // budgets are (5.25, 0), so (6, 0.5) satisfies the whole system.
        let means: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else { 1.0 }).collect();
        let cfg = ProblemConfig::gaussian_from_means(&means, 1, 6, 8.0, 1e-3, 1e-3)
            .unwrap()
            .with_budget_override(6.0, 0.5)
            .unwrap();
        assert_eq!(select_budgets(&cfg, &prefix(6)).unwrap(), (6.0, 0.5));
    }

    #[test]
    fn g_sets_homogeneous() {
        let cfg = fig_homogeneous();
        // N̂ < |A| → empty on the anomalous side.
        let (g_hat, g_check) = select_g_sets(&cfg, &prefix(3), (1.5, 3.5));
        assert!(g_hat.is_empty());
        assert!(g_check.is_empty());
        // N̂ = |A| → the whole side.
        let (g_hat, _) = select_g_sets(&cfg, &prefix(3), (3.0, 2.0));
        assert_eq!(g_hat, prefix(3));
    }

    #[test]
    fn g_sets_two_tier_middle_branch() {
        // K = 8 makes x = 1 at |A| = u = 6; the anomalous-side budget equals
        // the effort scale 5.25, so the five slow sources are pinned.
        let means: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else { 1.0 }).collect();
        let cfg = ProblemConfig::gaussian_from_means(&means, 1, 6, 8.0, 1e-3, 1e-3).unwrap();
        let alloc = allocation(&cfg, &prefix(6)).unwrap();
        assert_abs_diff_eq!(alloc.n_hat, 5.25, epsilon = 1e-12);
        assert_eq!(alloc.g_hat, prefix(5));
        assert!(alloc.g_check.is_empty());
    }

    #[test]
    fn g_prefix_search_stays_below_budget_floor() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let m = rng.gen_range(3..=9);
            let means: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..2.0)).collect();
            let upper = rng.gen_range(1..=m);
            let lower = rng.gen_range(0..=upper.min(m - 1));
            let k = rng.gen_range(0.5..=m as f64);
            let Ok(cfg) = ProblemConfig::gaussian_from_means(&means, lower, upper, k, 1e-3, 1e-3)
            else {
                continue;
            };
            let size = rng.gen_range(lower..=upper);
            let a: SourceSet = (0..size).collect();
            let alloc = allocation(&cfg, &a).unwrap();
            if !alloc.g_hat.is_empty() && alloc.g_hat != a {
                let (floor, _) = split_count(alloc.n_hat);
                assert!(alloc.g_hat.len() <= floor);
            }
        }
    }

    #[test]
    fn x_equal_one_pins_exactly_the_unit_frequency_sources() {
        // With x = 1 and default budgets, Ĝ is the set of sources whose
        // critical frequency is 1.
        let means: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else { 1.0 }).collect();
        let cfg = ProblemConfig::gaussian_from_means(&means, 1, 6, 8.0, 1e-3, 1e-3).unwrap();
        let alloc = allocation(&cfg, &prefix(6)).unwrap();
        assert_eq!(alloc.x, 1.0);
        let pinned: SourceSet = alloc
            .subset
            .iter()
            .copied()
            .filter(|&i| nearly_equal(alloc.c_star[i], 1.0))
            .collect();
        assert_eq!(alloc.g_hat, pinned);
    }

    #[test]
    fn enumeration_of_the_admissible_family() {
        // Σ_{m=1}^{6} C(10, m) = 847 subsets, all allocate without error.
        let cfg = fig_homogeneous();
        let mut count = 0usize;
        for mask in 0u32..(1 << 10) {
            let size = mask.count_ones() as usize;
            if !(1..=6).contains(&size) {
                continue;
            }
            let a: SourceSet = (0..10).filter(|&i| mask & (1 << i) != 0).collect();
            allocation(&cfg, &a).unwrap();
            count += 1;
        }
        assert_eq!(count, 847);
    }

    #[test]
    fn cache_returns_identical_results() {
        let cfg = fig_homogeneous();
        let mut cache = AllocationCache::new();
        let first = cache.get_or_compute(&cfg, &prefix(3)).unwrap().clone();
        let second = cache.get_or_compute(&cfg, &prefix(3)).unwrap().clone();
        assert_eq!(first, second);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn limit_frequencies_single_free_source() {
        // |A \ Ĝ| = 1: the free source's limit is exactly N̂ - |Ĝ|.
        let means: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else { 1.0 }).collect();
        let cfg = ProblemConfig::gaussian_from_means(&means, 1, 6, 8.0, 1e-3, 1e-3).unwrap();
        let alloc = allocation(&cfg, &prefix(6)).unwrap();
        assert_eq!(alloc.g_hat, prefix(5));
        let c = alloc.limit_frequencies(&cfg);
        for i in 0..5 {
            assert_eq!(c[i], 1.0);
        }
        assert_abs_diff_eq!(c[5], alloc.n_hat - 5.0, epsilon = 1e-12);
        for i in 6..10 {
            assert_eq!(c[i], 0.0); // y = 0 at |A| = u
        }
    }

    #[test]
    fn limit_frequencies_match_critical_ones_under_default_budgets() {
        let cfg = fig_heterogeneous();
        for m in 1..=6 {
            let alloc = allocation(&cfg, &prefix(m)).unwrap();
            let c = alloc.limit_frequencies(&cfg);
            for i in 0..10 {
                assert_abs_diff_eq!(c[i], alloc.c_star[i], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn split_count_snaps_near_integers() {
        assert_eq!(split_count(2.0), (2, 0.0));
        assert_eq!(split_count(2.0 + 4e-10), (2, 0.0));
        assert_eq!(split_count(2.0 - 4e-10), (2, 0.0));
        let (fl, frac) = split_count(1.5);
        assert_eq!(fl, 1);
        assert_abs_diff_eq!(frac, 0.5, epsilon = 1e-15);
    }
}
