//! Gaussian-mechanism calibration, zCDP accounting, sensitivity and
//! Lipschitz bounds, and a Monte-Carlo privacy-loss tail check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::backbone::{Backbone, TaskKind, TermCoefficients};
use crate::error::{MbdError, Result};
use crate::param_store::{GlobalIndex, ParameterStore};
use crate::trainer::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for PrivacyBudget {
    fn default() -> Self {
        PrivacyBudget {
            epsilon: 0.5,
            delta: 1e-5,
        }
    }
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        let b = PrivacyBudget { epsilon, delta };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(MbdError::Privacy(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(MbdError::Privacy(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityMethod {
    #[default]
    SelectedWeightNorm,
    LipschitzScaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBound {
    pub delta: f64,
    pub method: SensitivityMethod,
    /// Multiplier on the selected-weight norm: 1, or the Lipschitz estimate.
    pub scale: f64,
    /// Digest of the store the bound was computed from.
    pub inputs_digest: String,
}

/// σ = Δ √(2 ln(1.25/δ)) / ε.
pub fn gaussian_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity.is_finite() && sensitivity >= 0.0) {
        return Err(MbdError::Privacy(format!(
            "sensitivity must be finite and >= 0, got {sensitivity}"
        )));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(MbdError::Privacy(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.25) {
        return Err(MbdError::Privacy(format!("delta must lie in (0, 1.25), got {delta}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

pub fn calibrate_sigma(bound: &SensitivityBound, budget: &PrivacyBudget) -> Result<f64> {
    budget.validate()?;
    gaussian_sigma(bound.delta, budget.epsilon, budget.delta)
}

/// ρ = Δ²/(2σ²); zero sensitivity costs nothing.
pub fn gaussian_rho(sensitivity: f64, sigma: f64) -> Result<f64> {
    if !(sensitivity.is_finite() && sensitivity >= 0.0) {
        return Err(MbdError::Privacy(format!(
            "sensitivity must be finite and >= 0, got {sensitivity}"
        )));
    }
    if sensitivity == 0.0 {
        return Ok(0.0);
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(MbdError::Privacy(format!("sigma must be positive, got {sigma}")));
    }
    Ok(sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// ε(ρ, δ) = ρ + 2√(ρ ln(1/δ)).
pub fn to_eps_delta(rho: f64, delta: f64) -> Result<f64> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(MbdError::Privacy(format!("rho must be finite and >= 0, got {rho}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(MbdError::Privacy(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZcdpEvent {
    pub rho: f64,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZcdpLedger {
    pub events: Vec<ZcdpEvent>,
}

impl ZcdpLedger {
    pub fn compose(&mut self, rho: f64, description: impl Into<String>, timestamp: Option<String>) -> Result<()> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(MbdError::Privacy(format!("cannot compose rho = {rho}")));
        }
        self.events.push(ZcdpEvent {
            rho,
            description: description.into(),
            timestamp,
        });
        Ok(())
    }

    pub fn cumulative_rho(&self) -> f64 {
        self.events.iter().map(|e| e.rho).sum()
    }

    pub fn cumulative_epsilon(&self, delta: f64) -> Result<f64> {
        to_eps_delta(self.cumulative_rho(), delta)
    }
}

/// Δ for a planned surgery over coordinates `indices` of `pre`.
pub fn bound_sensitivity(
    indices: &[GlobalIndex],
    pre: &ParameterStore,
    method: SensitivityMethod,
    lipschitz: Option<&LipschitzEstimate>,
) -> Result<SensitivityBound> {
    let mut sq = 0.0;
    for idx in indices {
        let v = pre.value(idx)?;
        sq += v * v;
    }
    let scale = match method {
        SensitivityMethod::SelectedWeightNorm => 1.0,
        SensitivityMethod::LipschitzScaled => {
            lipschitz
                .ok_or_else(|| MbdError::Privacy("lipschitz-scaled sensitivity needs an estimate".into()))?
                .l_hat
        }
    };
    Ok(SensitivityBound {
        delta: scale * sq.sqrt(),
        method,
        scale,
        inputs_digest: pre.digest().to_hex(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Max per-sample ℓ2 norm of the clamped task-loss gradient.
    pub l_hat: f64,
    /// Max per-sample Frobenius norm of the output Jacobian.
    pub b_act: f64,
    pub b_ell_prime: f64,
    /// Max ℓ2 norm of any layer-input row on the batch.
    pub max_row_activation_norm: f64,
    pub samples: usize,
    pub calib_digest: String,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn estimate_lipschitz(backbone: &Backbone, store: &ParameterStore, calib: &Dataset) -> Result<LipschitzEstimate> {
    if calib.is_empty() {
        return Err(MbdError::EmptyBatch("lipschitz estimation"));
    }
    let outputs = backbone.config().output_dim();
    let weights = Default::default();
    let per_sample: Vec<(f64, f64, f64)> = calib
        .samples
        .par_iter()
        .map(|s| -> Result<(f64, f64, f64)> {
            let b = backbone.batch(std::slice::from_ref(s))?;
            let (_, g) = backbone.objective_grad(store, &b, &weights, &TermCoefficients::task_only(true))?;
            let mut jac = 0.0;
            for j in 0..outputs {
                let r = backbone.output_grad(store, &b, j)?;
                jac += r.iter().map(|x| x * x).sum::<f64>();
            }
            let fw = backbone.forward(store, &b)?;
            let act = fw
                .layer_inputs()
                .iter()
                .map(|(_, a)| a.row(0).iter().map(|x| x * x).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            Ok((l2(&g), jac.sqrt(), act))
        })
        .collect::<Result<_>>()?;
    let max = |f: fn(&(f64, f64, f64)) -> f64| per_sample.iter().map(f).fold(0.0, f64::max);
    Ok(LipschitzEstimate {
        l_hat: max(|t| t.0),
        b_act: max(|t| t.1),
        b_ell_prime: match backbone.config().task {
            TaskKind::Regression => 1.0,
            TaskKind::Classification => std::f64::consts::SQRT_2,
        },
        max_row_activation_norm: max(|t| t.2),
        samples: calib.len(),
        calib_digest: calib.digest()?.to_hex(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlrvReport {
    pub trials: u64,
    pub exceedances: u64,
    /// Empirical Pr(|privacy loss| > ε).
    pub empirical: f64,
    /// Φ̄(εσ/Δ − Δ/(2σ)).
    pub analytic_upper: f64,
    /// Upper plus lower tail, the exact Pr(|privacy loss| > ε).
    pub analytic_two_sided: f64,
    pub se_budget: f64,
    pub se_analytic: f64,
    pub within_budget: bool,
    pub agrees_with_analytic: bool,
}

impl PlrvReport {
    pub fn pass(&self) -> bool {
        self.within_budget && self.agrees_with_analytic
    }
}

const PLRV_CHUNK: u64 = 1 << 16;

/// Count of |L| > ε over `trials` draws of the privacy-loss variable
/// L = Δ²/(2σ²) − (Δ/σ) g, g ~ N(0, 1), which is ⟨ξ, u⟩ projected for
/// ξ ~ N(0, σ²I) and a shift of norm Δ.
fn plrv_exceedances(sens: f64, sigma: f64, epsilon: f64, trials: u64, seed: u64) -> u64 {
    let chunks = trials.div_ceil(PLRV_CHUNK);
    let mean = sens * sens / (2.0 * sigma * sigma);
    let scale = sens / sigma;
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let n = PLRV_CHUNK.min(trials - c * PLRV_CHUNK);
            (0..n)
                .filter(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    (mean - scale * g).abs() > epsilon
                })
                .count() as u64
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

pub fn plrv_tail_check(sens: f64, sigma: f64, budget: &PrivacyBudget, trials: u64, seed: u64) -> Result<PlrvReport> {
    budget.validate()?;
    if trials == 0 {
        return Err(MbdError::Privacy("trials must be positive".into()));
    }
    if !(sens.is_finite() && sens >= 0.0) {
        return Err(MbdError::Privacy(format!(
            "sensitivity must be finite and >= 0, got {sens}"
        )));
    }
    if sens > 0.0 && !(sigma.is_finite() && sigma > 0.0) {
        return Err(MbdError::Privacy(
            "sigma = 0 with positive sensitivity has no finite privacy loss".into(),
        ));
    }
    let n = trials as f64;
    let (exceed, upper, two) = if sens == 0.0 {
        (0, 0.0, 0.0)
    } else {
        let std = Normal::standard();
        let a = budget.epsilon * sigma / sens;
        let b = sens / (2.0 * sigma);
        let upper = std.sf(a - b);
        let lower = std.sf(a + b);
        (
            plrv_exceedances(sens, sigma, budget.epsilon, trials, seed),
            upper,
            upper + lower,
        )
    };
    let empirical = exceed as f64 / n;
    let se_budget = (budget.delta * (1.0 - budget.delta) / n).sqrt();
    let se_analytic = (two * (1.0 - two) / n).sqrt();
    Ok(PlrvReport {
        trials,
        exceedances: exceed,
        empirical,
        analytic_upper: upper,
        analytic_two_sided: two,
        se_budget,
        se_analytic,
        within_budget: empirical <= budget.delta + 3.0 * se_budget,
        agrees_with_analytic: (empirical - two).abs() <= 3.0 * se_analytic.max(1.0 / n),
    })
}
