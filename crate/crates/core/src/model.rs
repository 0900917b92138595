//! Source distributions and the testing-problem configuration.
//!
//! Each source `i` emits iid observations with density `f0i` (normal
//! behavior) or `f1i` (anomalous). The per-source log-likelihood ratio
//! function `g_i = ln(f1i/f0i)` and the KL divergences
//! `I_i = KL(f1i‖f0i)`, `J_i = KL(f0i‖f1i)` drive everything downstream:
//! LLR statistics, allocation effort, and stopping thresholds.
//!
//! v1 ships Gaussian densities only (the mean-shift setup used throughout the
//! simulation study); [`Density`] is a tagged form so other exponential
//! families can be added without changing the API. Gaussian LLRs have finite
//! moments of every order, so the moment requirements behind the asymptotic
//! guarantees hold automatically for every configuration expressible here;
//! nothing is gated at runtime.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::math;
use crate::subset::SourceSet;

/// Distribution descriptor for one hypothesis of one source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density {
    /// Normal with the given mean and variance.
    Gaussian { mean: f64, variance: f64 },
}

impl Density {
    fn validate(&self) -> Result<(), ModelError> {
        match *self {
            Density::Gaussian { mean, variance } => {
                if !mean.is_finite() || !variance.is_finite() || variance <= 0.0 {
                    return Err(ModelError::DegenerateDensity { mean, variance });
                }
                Ok(())
            }
        }
    }

    fn log_density(&self, x: f64) -> f64 {
        match *self {
            Density::Gaussian { mean, variance } => {
                let d = x - mean;
                -0.5 * math::ln(2.0 * core::f64::consts::PI * variance)
                    - d * d / (2.0 * variance)
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Density::Gaussian { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + math::sqrt(variance) * z
            }
        }
    }
}

/// KL divergence between two densities, in nats.
fn kl(p: &Density, q: &Density) -> f64 {
    match (*p, *q) {
        (
            Density::Gaussian {
                mean: mp,
                variance: vp,
            },
            Density::Gaussian {
                mean: mq,
                variance: vq,
            },
        ) => {
            let d = mp - mq;
            if vp == vq {
                // Closed form without the cancellation-prone variance terms.
                d * d / (2.0 * vp)
            } else {
                0.5 * (math::ln(vq / vp) + (vp + d * d) / vq - 1.0)
            }
        }
    }
}

/// One data source: its two hypothesized densities and derived KL numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    /// Index of the source, `0..M`.
    pub id: usize,
    /// Density under normal behavior (`f0`).
    pub null_density: Density,
    /// Density under anomalous behavior (`f1`).
    pub alt_density: Density,
    /// `I = KL(f1‖f0)`.
    pub kl_alt_null: f64,
    /// `J = KL(f0‖f1)`.
    pub kl_null_alt: f64,
}

impl SourceModel {
    /// Builds a source model, computing and validating its KL numbers.
    ///
    /// Both divergences must be positive and finite; identical hypotheses are
    /// rejected.
    pub fn new(id: usize, null_density: Density, alt_density: Density) -> Result<Self, ModelError> {
        null_density.validate()?;
        alt_density.validate()?;
        let i = kl(&alt_density, &null_density);
        let j = kl(&null_density, &alt_density);
        if !(i > 0.0) || !(j > 0.0) || !i.is_finite() || !j.is_finite() {
            return Err(ModelError::IndistinguishableHypotheses { id, i, j });
        }
        Ok(SourceModel {
            id,
            null_density,
            alt_density,
            kl_alt_null: i,
            kl_null_alt: j,
        })
    }

    /// Unit-variance Gaussian mean shift: `N(0,1)` vs `N(mu,1)`.
    ///
    /// Here `I = J = mu²/2` exactly.
    pub fn gaussian_mean_shift(id: usize, mu: f64) -> Result<Self, ModelError> {
        SourceModel::new(
            id,
            Density::Gaussian {
                mean: 0.0,
                variance: 1.0,
            },
            Density::Gaussian {
                mean: mu,
                variance: 1.0,
            },
        )
    }

    /// `g_i(x) = ln(f1i(x)/f0i(x))`, in nats.
    pub fn log_likelihood_ratio(&self, observation: f64) -> Result<f64, ModelError> {
        if !observation.is_finite() {
            return Err(ModelError::NonFiniteObservation { value: observation });
        }
        Ok(self.llr_unchecked(observation))
    }

    #[inline]
    pub(crate) fn llr_unchecked(&self, x: f64) -> f64 {
        self.alt_density.log_density(x) - self.null_density.log_density(x)
    }

    /// `(I_i, J_i)`.
    pub fn kl_divergences(&self) -> (f64, f64) {
        (self.kl_alt_null, self.kl_null_alt)
    }

    /// Draws one observation from `f1` when `is_anomalous`, else from `f0`.
    pub fn draw_observation<R: Rng + ?Sized>(&self, is_anomalous: bool, rng: &mut R) -> f64 {
        if is_anomalous {
            self.alt_density.draw(rng)
        } else {
            self.null_density.draw(rng)
        }
    }
}

/// Scalar override for the per-side sampling budgets, applied to every
/// estimated subset and validated against the feasibility system at use time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetOverride {
    /// Budget for the estimated-anomalous side.
    pub n_hat: f64,
    /// Budget for the estimated-normal side.
    pub n_check: f64,
}

/// The full testing problem: sources, prior bounds on the number of
/// anomalies, sampling budget and error tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// `M`, the number of sources.
    pub num_sources: usize,
    /// `ℓ`, lower bound on the number of anomalous sources.
    pub lower_bound: usize,
    /// `u`, upper bound on the number of anomalous sources.
    pub upper_bound: usize,
    /// `K`, average number of sampled sources allowed per time instant.
    pub budget: f64,
    /// Familywise false-positive tolerance.
    pub alpha: f64,
    /// Familywise false-negative tolerance.
    pub beta: f64,
    /// Error-rate asymmetry parameter; defaults to `|ln α| / |ln β|`.
    pub r: f64,
    /// Per-source models, indexed by source id.
    pub sources: Vec<SourceModel>,
    /// Optional per-side budget override (see [`BudgetOverride`]).
    pub budget_override: Option<BudgetOverride>,
}

impl ProblemConfig {
    /// Validates and assembles a configuration.
    ///
    /// Requirements: `0 ≤ ℓ ≤ u ≤ M`, `ℓ < M`, `u > 0`; `K ∈ (0, M]`;
    /// `α, β ∈ (0, 1)`; one source model per index.
    pub fn new(
        lower_bound: usize,
        upper_bound: usize,
        budget: f64,
        alpha: f64,
        beta: f64,
        sources: Vec<SourceModel>,
    ) -> Result<Self, ConfigError> {
        let m = sources.len();
        if m == 0 {
            return Err(ConfigError::NoSources);
        }
        if !(lower_bound <= upper_bound && upper_bound <= m && lower_bound < m && upper_bound > 0) {
            return Err(ConfigError::BadAnomalyBounds {
                lower: lower_bound,
                upper: upper_bound,
                num_sources: m,
            });
        }
        if !budget.is_finite() || budget <= 0.0 || budget > m as f64 {
            return Err(ConfigError::BadBudget {
                budget,
                num_sources: m,
            });
        }
        if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
            return Err(ConfigError::BadErrorTolerance { alpha, beta });
        }
        for (idx, s) in sources.iter().enumerate() {
            if s.id != idx {
                return Err(ConfigError::SourceIdMismatch {
                    position: idx,
                    id: s.id,
                });
            }
        }
        let r = math::abs(math::ln(alpha)) / math::abs(math::ln(beta));
        Ok(ProblemConfig {
            num_sources: m,
            lower_bound,
            upper_bound,
            budget,
            alpha,
            beta,
            r,
            sources,
            budget_override: None,
        })
    }

    /// Homogeneous unit-variance Gaussian setup with mean shift `mu`.
    pub fn homogeneous_gaussian(
        m: usize,
        lower_bound: usize,
        upper_bound: usize,
        budget: f64,
        alpha: f64,
        beta: f64,
        mu: f64,
    ) -> Result<Self, ConfigError> {
        let sources = (0..m)
            .map(|i| SourceModel::gaussian_mean_shift(i, mu))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ConfigError::Model)?;
        ProblemConfig::new(lower_bound, upper_bound, budget, alpha, beta, sources)
    }

    /// Unit-variance Gaussian setup with one mean shift per source.
    pub fn gaussian_from_means(
        means: &[f64],
        lower_bound: usize,
        upper_bound: usize,
        budget: f64,
        alpha: f64,
        beta: f64,
    ) -> Result<Self, ConfigError> {
        let sources = means
            .iter()
            .enumerate()
            .map(|(i, &mu)| SourceModel::gaussian_mean_shift(i, mu))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ConfigError::Model)?;
        ProblemConfig::new(lower_bound, upper_bound, budget, alpha, beta, sources)
    }

    /// Overrides the default `r = |ln α| / |ln β|`.
    pub fn with_r(mut self, r: f64) -> Result<Self, ConfigError> {
        if !r.is_finite() || r <= 0.0 {
            return Err(ConfigError::BadR { r });
        }
        self.r = r;
        Ok(self)
    }

    /// Installs a per-side budget override; feasibility is checked per subset
    /// when budgets are selected.
    pub fn with_budget_override(mut self, n_hat: f64, n_check: f64) -> Result<Self, ConfigError> {
        if !n_hat.is_finite() || !n_check.is_finite() || n_hat < 0.0 || n_check < 0.0 {
            return Err(ConfigError::BadBudgetOverride { n_hat, n_check });
        }
        self.budget_override = Some(BudgetOverride { n_hat, n_check });
        Ok(self)
    }

    /// `true` when `|A| ∈ [ℓ, u]`.
    pub fn admits_size(&self, size: usize) -> bool {
        size >= self.lower_bound && size <= self.upper_bound
    }

    /// `I_i` for each source.
    pub fn kl_alt_null(&self, i: usize) -> f64 {
        self.sources[i].kl_alt_null
    }

    /// `J_i` for each source.
    pub fn kl_null_alt(&self, i: usize) -> f64 {
        self.sources[i].kl_null_alt
    }
}

/// The true anomalous subset of a simulated trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub anomalous: SourceSet,
}

impl GroundTruth {
    /// Validates membership in the admissible family: `ℓ ≤ |A| ≤ u` and
    /// `A ⊆ [0, M)`.
    pub fn new(anomalous: SourceSet, config: &ProblemConfig) -> Result<Self, ConfigError> {
        if !anomalous.within(config.num_sources) {
            return Err(ConfigError::TruthOutOfRange {
                num_sources: config.num_sources,
            });
        }
        if !config.admits_size(anomalous.len()) {
            return Err(ConfigError::TruthSizeOutOfBounds {
                size: anomalous.len(),
                lower: config.lower_bound,
                upper: config.upper_bound,
            });
        }
        Ok(GroundTruth { anomalous })
    }

    pub fn is_anomalous(&self, i: usize) -> bool {
        self.anomalous.contains(i)
    }
}

/// Errors from source-model construction and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Variance is non-positive or a parameter is non-finite.
    DegenerateDensity { mean: f64, variance: f64 },
    /// The two hypotheses have zero or non-finite KL separation.
    IndistinguishableHypotheses { id: usize, i: f64, j: f64 },
    /// Observation outside the support (non-finite).
    NonFiniteObservation { value: f64 },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::DegenerateDensity { mean, variance } => write!(
                f,
                "degenerate density (mean {mean}, variance {variance}); variance must be positive and finite"
            ),
            ModelError::IndistinguishableHypotheses { id, i, j } => write!(
                f,
                "source {id}: KL divergences must be positive and finite (got I={i}, J={j})"
            ),
            ModelError::NonFiniteObservation { value } => {
                write!(f, "observation {value} is not finite")
            }
        }
    }
}

impl core::error::Error for ModelError {}

/// Errors from problem-configuration validation.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    NoSources,
    BadAnomalyBounds {
        lower: usize,
        upper: usize,
        num_sources: usize,
    },
    BadBudget {
        budget: f64,
        num_sources: usize,
    },
    BadErrorTolerance {
        alpha: f64,
        beta: f64,
    },
    BadR {
        r: f64,
    },
    BadBudgetOverride {
        n_hat: f64,
        n_check: f64,
    },
    SourceIdMismatch {
        position: usize,
        id: usize,
    },
    TruthOutOfRange {
        num_sources: usize,
    },
    TruthSizeOutOfBounds {
        size: usize,
        lower: usize,
        upper: usize,
    },
    Model(ModelError),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::NoSources => write!(f, "at least one source is required"),
            ConfigError::BadAnomalyBounds {
                lower,
                upper,
                num_sources,
            } => write!(
                f,
                "anomaly-count bounds lower={lower}, upper={upper} with M={num_sources} violate: requires 0 <= lower <= upper <= M, lower < M, upper > 0"
            ),
            ConfigError::BadBudget {
                budget,
                num_sources,
            } => write!(
                f,
                "sampling budget {budget} must lie in (0, {num_sources}]"
            ),
            ConfigError::BadErrorTolerance { alpha, beta } => write!(
                f,
                "error tolerances alpha={alpha}, beta={beta} must lie in (0, 1)"
            ),
            ConfigError::BadR { r } => write!(f, "r={r} must be positive and finite"),
            ConfigError::BadBudgetOverride { n_hat, n_check } => write!(
                f,
                "budget override (n_hat={n_hat}, n_check={n_check}) must be nonnegative and finite"
            ),
            ConfigError::SourceIdMismatch { position, id } => write!(
                f,
                "source at position {position} has id {id}; ids must equal their index"
            ),
            ConfigError::TruthOutOfRange { num_sources } => {
                write!(f, "truth subset contains indices outside [0, {num_sources})")
            }
            ConfigError::TruthSizeOutOfBounds { size, lower, upper } => write!(
                f,
                "truth subset has size {size}; requires lower <= size <= upper with lower={lower}, upper={upper}"
            ),
            ConfigError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ConfigError {}

impl From<ModelError> for ConfigError {
    fn from(e: ModelError) -> Self {
        ConfigError::Model(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_shift(mu: f64) -> SourceModel {
        SourceModel::gaussian_mean_shift(0, mu).unwrap()
    }

    #[test]
    fn llr_closed_form_matches_log_density_difference() {
        let s = mean_shift(0.5);
        // mu*x - mu^2/2 evaluated independently of the log-density path.
        for &x in &[-2.0, 0.0, 0.25, 0.5, 1.7] {
            let direct = 0.5 * x - 0.125;
            assert_abs_diff_eq!(
                s.log_likelihood_ratio(x).unwrap(),
                direct,
                epsilon = 1e-12
            );
        }
        assert_abs_diff_eq!(s.log_likelihood_ratio(0.0).unwrap(), -0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.log_likelihood_ratio(0.25).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.log_likelihood_ratio(0.5).unwrap(), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn llr_rejects_non_finite_observation() {
        let s = mean_shift(0.5);
        assert!(matches!(
            s.log_likelihood_ratio(f64::NAN),
            Err(ModelError::NonFiniteObservation { .. })
        ));
        assert!(s.log_likelihood_ratio(f64::INFINITY).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(mean_shift(0.5).kl_divergences(), (0.125, 0.125));
        assert_eq!(mean_shift(1.0).kl_divergences(), (0.5, 0.5));
    }

    #[test]
    fn kl_matches_quadrature() {
        // Independent oracle: Simpson quadrature of ∫ ln(f1/f0) f1 dx.
        let s = mean_shift(0.7);
        let f = |x: f64| {
            let g = s.log_likelihood_ratio(x).unwrap();
            let alt = (-0.5 * (x - 0.7) * (x - 0.7)).exp() / (2.0 * core::f64::consts::PI).sqrt();
            g * alt
        };
        let (a, b, n) = (-12.0_f64, 12.7_f64, 20_000usize);
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 0 { 2.0 } else { 4.0 };
            acc += w * f(a + k as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert_abs_diff_eq!(integral, s.kl_alt_null, epsilon = 1e-6);
    }

    #[test]
    fn kl_general_gaussian_positive_and_finite() {
        let s = SourceModel::new(
            0,
            Density::Gaussian {
                mean: 0.0,
                variance: 1.0,
            },
            Density::Gaussian {
                mean: 0.3,
                variance: 2.5,
            },
        )
        .unwrap();
        let (i, j) = s.kl_divergences();
        assert!(i > 0.0 && j > 0.0 && i.is_finite() && j.is_finite());
    }

    #[test]
    fn zero_shift_rejected() {
        assert!(matches!(
            SourceModel::gaussian_mean_shift(0, 0.0),
            Err(ModelError::IndistinguishableHypotheses { .. })
        ));
    }

    #[test]
    fn zero_variance_rejected() {
        let err = SourceModel::new(
            0,
            Density::Gaussian {
                mean: 0.0,
                variance: 0.0,
            },
            Density::Gaussian {
                mean: 1.0,
                variance: 1.0,
            },
        );
        assert!(matches!(err, Err(ModelError::DegenerateDensity { .. })));
    }

    #[test]
    fn draws_concentrate_on_the_hypothesis_mean() {
        let s = mean_shift(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean_alt: f64 =
            (0..n).map(|_| s.draw_observation(true, &mut rng)).sum::<f64>() / n as f64;
        let mean_null: f64 =
            (0..n).map(|_| s.draw_observation(false, &mut rng)).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(mean_alt, 0.5, epsilon = 0.01);
        assert_abs_diff_eq!(mean_null, 0.0, epsilon = 0.01);
    }

    #[test]
    fn draws_are_deterministic_under_a_fixed_seed() {
        let s = mean_shift(0.5);
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let xs: std::vec::Vec<f64> = (0..64).map(|_| s.draw_observation(true, &mut a)).collect();
        let ys: std::vec::Vec<f64> = (0..64).map(|_| s.draw_observation(true, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn llr_means_match_kl_numbers() {
        // E[g | f1] = +I and E[g | f0] = -J, within 3 standard errors.
        let s = mean_shift(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 200_000;
        let (mut sum1, mut sumsq1, mut sum0, mut sumsq0) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let g1 = s
                .log_likelihood_ratio(s.draw_observation(true, &mut rng))
                .unwrap();
            let g0 = s
                .log_likelihood_ratio(s.draw_observation(false, &mut rng))
                .unwrap();
            sum1 += g1;
            sumsq1 += g1 * g1;
            sum0 += g0;
            sumsq0 += g0 * g0;
        }
        let nf = n as f64;
        let (m1, m0) = (sum1 / nf, sum0 / nf);
        let se1 = ((sumsq1 / nf - m1 * m1) / nf).sqrt();
        let se0 = ((sumsq0 / nf - m0 * m0) / nf).sqrt();
        assert!((m1 - s.kl_alt_null).abs() <= 3.0 * se1);
        assert!((m0 + s.kl_null_alt).abs() <= 3.0 * se0);
    }

    #[test]
    fn config_validation() {
        assert!(ProblemConfig::homogeneous_gaussian(10, 1, 6, 5.0, 1e-3, 1e-3, 0.5).is_ok());
        // lower = M is rejected.
        assert!(matches!(
            ProblemConfig::homogeneous_gaussian(4, 4, 4, 2.0, 1e-3, 1e-3, 0.5),
            Err(ConfigError::BadAnomalyBounds { .. })
        ));
        // upper = 0 is rejected.
        assert!(ProblemConfig::homogeneous_gaussian(4, 0, 0, 2.0, 1e-3, 1e-3, 0.5).is_err());
        // budget above M is rejected.
        assert!(matches!(
            ProblemConfig::homogeneous_gaussian(4, 1, 2, 5.0, 1e-3, 1e-3, 0.5),
            Err(ConfigError::BadBudget { .. })
        ));
    }

    #[test]
    fn r_defaults_to_log_ratio() {
        let cfg = ProblemConfig::homogeneous_gaussian(4, 1, 2, 2.0, 1e-3, 1e-3, 0.5).unwrap();
        assert_abs_diff_eq!(cfg.r, 1.0, epsilon = 1e-15);
        let cfg = ProblemConfig::homogeneous_gaussian(4, 1, 2, 2.0, 1e-2, 1e-4, 0.5).unwrap();
        assert_abs_diff_eq!(cfg.r, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn truth_must_respect_bounds() {
        let cfg = ProblemConfig::homogeneous_gaussian(5, 1, 3, 2.0, 1e-3, 1e-3, 0.5).unwrap();
        assert!(GroundTruth::new(SourceSet::from_indices(std::vec![0, 2]), &cfg).is_ok());
        assert!(GroundTruth::new(SourceSet::empty(), &cfg).is_err());
        assert!(GroundTruth::new(SourceSet::from_indices(std::vec![0, 1, 2, 3]), &cfg).is_err());
        assert!(GroundTruth::new(SourceSet::from_indices(std::vec![5]), &cfg).is_err());
    }
}
