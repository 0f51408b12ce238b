//! Closed-form step sizes, contraction factors, absorption radii and iteration bounds for the
//! implicit-update and predictive-method dynamics under gradient errors of norm `≤ α`.
//!
//! All logarithms are natural. Radii take `α` as given; any constant hidden in the error
//! bound is expected to be folded into it.

use serde::Serialize;

use crate::dynamics::MethodKind;
use crate::error::{Error, Result};
use crate::game::SpectralSummary;

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn need_lambda_max(s: &SpectralSummary) -> Result<()> {
    if s.lambda_max > 0.0 && s.lambda_max.is_finite() {
        Ok(())
    } else {
        Err(Error::DegenerateSpectrum(format!(
            "lambda_max(CCᵀ) = {} must be positive",
            s.lambda_max
        )))
    }
}

fn need_lambda_min(s: &SpectralSummary) -> Result<()> {
    need_lambda_max(s)?;
    if s.is_degenerate() {
        Err(Error::DegenerateSpectrum(format!(
            "lambda_min(CCᵀ) = {:e} is zero relative to lambda_max = {:e}",
            s.lambda_min, s.lambda_max
        )))
    } else {
        Ok(())
    }
}

fn need_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("gamma = {gamma} must be positive")))
    }
}

fn need_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("alpha = {alpha} must be >= 0")))
    }
}

/// Initial distance `r0` and target slack `ε` for an iteration bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationQuery {
    pub r0: f64,
    pub epsilon: f64,
}

impl IterationQuery {
    pub fn new(r0: f64, epsilon: f64) -> Result<Self> {
        if !(r0 > 0.0 && epsilon > 0.0 && r0.is_finite() && epsilon.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "iteration query needs positive r0 and epsilon (got {r0}, {epsilon})"
            )));
        }
        Ok(Self { r0, epsilon })
    }

    /// `ln(r0 / ε)`, or `None` when the bound is vacuous.
    fn log_ratio(&self) -> Option<f64> {
        (self.epsilon < self.r0).then(|| (self.r0 / self.epsilon).ln())
    }
}

fn ceil_steps(x: f64) -> u64 {
    if x <= 0.0 {
        0
    } else {
        x.ceil() as u64
    }
}

/// `η = 1/√λ_max`.
pub fn iu_step_size(s: &SpectralSummary) -> Result<f64> {
    need_lambda_max(s)?;
    Ok(1.0 / s.lambda_max.sqrt())
}

/// Linearized contraction `1 - (1 - 1/√2)/κ`.
pub fn iu_contraction_linearized(s: &SpectralSummary) -> Result<f64> {
    need_lambda_min(s)?;
    Ok(1.0 - (1.0 - INV_SQRT2) * s.lambda_min / s.lambda_max)
}

/// Exact contraction `1/√(1 + η²λ_min)`, the reciprocal of the least singular value of `I + ηJ`.
pub fn iu_contraction_exact(s: &SpectralSummary, eta: f64) -> f64 {
    1.0 / (1.0 + eta * eta * s.lambda_min).sqrt()
}

/// Absorption radius `α√λ_max / ((1 - 1/√2) λ_min)`.
pub fn iu_neighborhood_radius(s: &SpectralSummary, alpha: f64) -> Result<f64> {
    need_lambda_min(s)?;
    need_alpha(alpha)?;
    Ok(alpha * s.lambda_max.sqrt() / ((1.0 - INV_SQRT2) * s.lambda_min))
}

/// `⌈(2 + √2) κ ln(r0/ε)⌉`, zero when `ε ≥ r0`.
pub fn iu_iteration_bound(s: &SpectralSummary, q: &IterationQuery) -> Result<u64> {
    need_lambda_min(s)?;
    Ok(q.log_ratio().map_or(0, |l| {
        ceil_steps((2.0 + std::f64::consts::SQRT_2) * (s.lambda_max / s.lambda_min) * l)
    }))
}

/// `η = γλ_min / (λ_max + γ²λ_max²)`.
pub fn pm_step_size(s: &SpectralSummary, gamma: f64) -> Result<f64> {
    need_lambda_max(s)?;
    need_gamma(gamma)?;
    let lmax = s.lambda_max;
    Ok(gamma * s.lambda_min / (lmax + gamma * gamma * lmax * lmax))
}

/// Bound `σ̄ = √(1 - γ²λ_min² / (γ²λ_max² + λ_max))` on the largest singular value of the
/// combined predictive transition at the step size of [`pm_step_size`]. `β = 1 - σ̄`.
pub fn pm_contraction(s: &SpectralSummary, gamma: f64) -> Result<f64> {
    need_lambda_min(s)?;
    need_gamma(gamma)?;
    Ok((1.0 - pm_rate(s, gamma)).sqrt())
}

/// `γ²λ_min² / (γ²λ_max² + λ_max)`, the quantity under the square root of `σ̄`.
fn pm_rate(s: &SpectralSummary, gamma: f64) -> f64 {
    let g2 = gamma * gamma;
    g2 * s.lambda_min * s.lambda_min / (g2 * s.lambda_max * s.lambda_max + s.lambda_max)
}

/// Absorption radius `η(γ + 1)α / β`.
pub fn pm_neighborhood_radius(s: &SpectralSummary, gamma: f64, alpha: f64) -> Result<f64> {
    need_alpha(alpha)?;
    let eta = pm_step_size(s, gamma)?;
    let beta = 1.0 - pm_contraction(s, gamma)?;
    Ok(eta * (gamma + 1.0) * alpha / beta)
}

/// Both forms of the predictive-method iteration bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PmIterationBound {
    /// `⌈2(γ²λ_max² + λ_max)/(γ²λ_min²) · ln(r0/ε)⌉`, which dominates `ln(r0/ε)/(-ln σ̄)`.
    pub derived: u64,
    /// `⌈2(γ²λ_max² + λ_max)/(γ²λ_min) · ln(r0/ε)⌉`, with `λ_min` unsquared in the denominator.
    /// Matches `derived` when `λ_min = 1`.
    pub stated: u64,
}

pub fn pm_iteration_bound(
    s: &SpectralSummary,
    gamma: f64,
    q: &IterationQuery,
) -> Result<PmIterationBound> {
    need_lambda_min(s)?;
    need_gamma(gamma)?;
    let Some(l) = q.log_ratio() else {
        return Ok(PmIterationBound {
            derived: 0,
            stated: 0,
        });
    };
    let g2 = gamma * gamma;
    let num = 2.0 * (g2 * s.lambda_max * s.lambda_max + s.lambda_max);
    Ok(PmIterationBound {
        derived: ceil_steps(num / (g2 * s.lambda_min * s.lambda_min) * l),
        stated: ceil_steps(num / (g2 * s.lambda_min) * l),
    })
}

/// Smallest `T` with `contraction^T ≤ ε/r0`; the tight count behind both closed forms.
pub fn contraction_steps(contraction: f64, q: &IterationQuery) -> Option<u64> {
    let l = q.log_ratio()?;
    (contraction > 0.0 && contraction < 1.0).then(|| ceil_steps(l / -contraction.ln()))
}

/// Everything the predictors say about one method on one game.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryPrediction {
    pub method: MethodKind,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Linearized contraction used in the radius balance (`ρ̄` for IU, `σ̄` for PM).
    pub contraction_linearized: f64,
    /// Contraction read off the singular values of the exact transition.
    pub contraction_exact: f64,
    pub alpha: f64,
    pub radius: f64,
    /// Bound on the number of steps to reach `radius + ε` from `r0`.
    pub iteration_bound: u64,
    /// The `λ_min`-unsquared predictive-method bound; absent for IU.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration_bound_stated: Option<u64>,
}

impl TheoryPrediction {
    /// Per-step additive error budget `η · α · (1 for IU, γ + 1 for PM)`.
    pub fn error_budget(&self) -> f64 {
        let mult = self.gamma.map_or(1.0, |g| g + 1.0);
        self.eta * self.alpha * mult
    }
}

pub fn predict_iu(s: &SpectralSummary, alpha: f64, q: &IterationQuery) -> Result<TheoryPrediction> {
    let eta = iu_step_size(s)?;
    Ok(TheoryPrediction {
        method: MethodKind::Iu,
        eta,
        gamma: None,
        contraction_linearized: iu_contraction_linearized(s)?,
        contraction_exact: iu_contraction_exact(s, eta),
        alpha,
        radius: iu_neighborhood_radius(s, alpha)?,
        iteration_bound: iu_iteration_bound(s, q)?,
        iteration_bound_stated: None,
    })
}

/// Largest singular value of the combined predictive transition at step size `eta`, using
/// that it decouples into scaled 2×2 rotations along each singular pair of `C`.
pub fn pm_contraction_exact(s: &SpectralSummary, gamma: f64, eta: f64) -> f64 {
    let at = |l: f64| {
        let a = 1.0 - eta * gamma * l;
        (a * a + eta * eta * l).sqrt()
    };
    // The map λ ↦ (1-ηγλ)² + η²λ is convex, so its maximum over [λ_min, λ_max] is at an end.
    at(s.lambda_min).max(at(s.lambda_max))
}

pub fn predict_pm(
    s: &SpectralSummary,
    gamma: f64,
    alpha: f64,
    q: &IterationQuery,
) -> Result<TheoryPrediction> {
    let eta = pm_step_size(s, gamma)?;
    let bound = pm_iteration_bound(s, gamma, q)?;
    Ok(TheoryPrediction {
        method: MethodKind::Pm,
        eta,
        gamma: Some(gamma),
        contraction_linearized: pm_contraction(s, gamma)?,
        contraction_exact: pm_contraction_exact(s, gamma, eta),
        alpha,
        radius: pm_neighborhood_radius(s, gamma, alpha)?,
        iteration_bound: bound.derived,
        iteration_bound_stated: Some(bound.stated),
    })
}

/// Prediction for `kind`, or `None` for methods without closed-form guarantees.
pub fn predict(
    kind: MethodKind,
    s: &SpectralSummary,
    gamma: f64,
    alpha: f64,
    q: &IterationQuery,
) -> Result<Option<TheoryPrediction>> {
    match kind {
        MethodKind::Iu => predict_iu(s, alpha, q).map(Some),
        MethodKind::Pm => predict_pm(s, gamma, alpha, q).map(Some),
        MethodKind::Sga | MethodKind::Co | MethodKind::Omd => Ok(None),
    }
}
