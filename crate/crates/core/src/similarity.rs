//! Uncertainty-aware similarity between two entrances at a state-action pair,
//! computed from the source and target NSR predictions, and the two things
//! derived from it: the instance filter and the action-constraint width β.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nsr::{GaussPred, NsrModel};

/// How β moves with the similarity weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaDirection {
    /// Higher similarity, fewer allowed actions (tighter pull toward the source agent).
    #[default]
    Narrowing,
    /// Higher similarity, more allowed actions.
    Widening,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    pub tau: f64,
    pub clamp_weights: bool,
    pub beta_min: usize,
    pub beta_max: usize,
    /// Keep every source sample and scale its loss by `w` instead of filtering.
    pub weighted_mode: bool,
    pub beta_direction: BetaDirection,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { tau: 0.5, clamp_weights: true, beta_min: 1, beta_max: 8, weighted_mode: false, beta_direction: BetaDirection::Narrowing }
    }
}

impl SimilarityConfig {
    pub fn validate(&self, n_actions: usize) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be a non-negative number", self.tau)));
        }
        if !(1 <= self.beta_min && self.beta_min <= self.beta_max && self.beta_max <= n_actions) {
            return Err(Error::Config(format!(
                "need 1 <= beta_min ({}) <= beta_max ({}) <= {n_actions}",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

/// `KL(p || q)` between univariate Gaussians.
pub fn kl_gauss(p: GaussPred, q: GaussPred) -> Result<f64> {
    if !(p.var > 0.0 && q.var > 0.0) {
        return Err(Error::Usage(format!("variances must be positive, got {} and {}", p.var, q.var)));
    }
    let d = p.mu - q.mu;
    Ok(0.5 * (q.var / p.var).ln() + (p.var + d * d) / (2.0 * q.var) - 0.5)
}

/// `w = 1 - KL(p_S || p_T)`, clamped to `[0, 1]` when configured.
pub fn weight(p_s: GaussPred, p_t: GaussPred, cfg: &SimilarityConfig) -> Result<f64> {
    let w = 1.0 - kl_gauss(p_s, p_t)?;
    Ok(if cfg.clamp_weights { w.clamp(0.0, 1.0) } else { w })
}

/// Similarity from predicted means only: `clamp(1 - |μ_S - μ_T| / scale, 0, 1)`.
pub fn mean_only_weight(p_s: GaussPred, p_t: GaussPred, scale: f64) -> f64 {
    (1.0 - (p_s.mu - p_t.mu).abs() / scale).clamp(0.0, 1.0)
}

/// Sets `w` on every transition from the two models' predictions.
pub fn annotate_weights(mut dataset: Dataset, model_s: &NsrModel, model_t: &NsrModel, cfg: &SimilarityConfig) -> Result<Dataset> {
    let ps = model_s.predictor()?.predict_transitions(&dataset.transitions);
    let pt = model_t.predictor()?.predict_transitions(&dataset.transitions);
    for ((t, s), q) in dataset.transitions.iter_mut().zip(ps).zip(pt) {
        t.w = Some(weight(s, q, cfg)?);
    }
    Ok(dataset)
}

/// Instance filter: keeps `w >= tau` (hard mode) or everything (weighted mode).
pub fn filter_source(dataset: Dataset, cfg: &SimilarityConfig) -> Result<Dataset> {
    if dataset.iter().any(|t| t.w.is_none()) {
        return Err(Error::Usage("filter_source needs similarity-annotated transitions".into()));
    }
    if cfg.weighted_mode {
        return Ok(dataset);
    }
    let nsr = dataset.nsr;
    let kept = dataset.transitions.into_iter().filter(|t| t.w.is_some_and(|w| w >= cfg.tau)).collect();
    Ok(Dataset { transitions: kept, nsr })
}

/// Linear map from similarity to the number of actions the target max may
/// range over, rounded half-to-even and clamped to `[beta_min, beta_max]`.
pub fn beta_from_weight(w: f64, n_actions: usize, cfg: &SimilarityConfig) -> usize {
    let lo = cfg.beta_min.max(1) as f64;
    let hi = cfg.beta_max.min(n_actions) as f64;
    let w = w.clamp(0.0, 1.0);
    let raw = match cfg.beta_direction {
        BetaDirection::Narrowing => hi - w * (hi - lo),
        BetaDirection::Widening => lo + w * (hi - lo),
    };
    raw.round_ties_even().clamp(lo, hi) as usize
}
