use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::ModelParams;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Fedavg,
    #[default]
    Mba,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationPolicy {
    pub kind: AggregationKind,
    /// Softmax temperature for minimal-bias aggregation.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Divide the realized MBA weights by their sum (off by default).
    #[serde(default)]
    pub renormalize_weights: bool,
}

fn default_tau() -> f64 {
    0.1
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self {
            kind: AggregationKind::Mba,
            tau: default_tau(),
            renormalize_weights: false,
        }
    }
}

impl AggregationPolicy {
    pub fn fedavg() -> Self {
        Self {
            kind: AggregationKind::Fedavg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check(models: &[&ModelParams], sizes: &[f64]) -> Result<()> {
    let first = models.first().ok_or(Error::EmptyBatch)?;
    if sizes.len() != models.len() {
        return Err(Error::Shape(format!(
            "{} models but {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    if models.iter().any(|m| m.arch != first.arch) {
        return Err(Error::Shape("client models differ in architecture".into()));
    }
    if sizes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidValue("client sizes must be positive".into()));
    }
    Ok(())
}

/// Size proportions `N_i / sum_j N_j`.
pub fn size_weights(sizes: &[f64]) -> Vec<f64> {
    let total: f64 = sizes.iter().sum();
    sizes.iter().map(|s| s / total).collect()
}

fn weighted_sum(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let mut theta = vec![0.0; models[0].n_params()];
    for (m, w) in models.iter().zip(weights) {
        for (t, v) in theta.iter_mut().zip(&m.theta) {
            *t += w * v;
        }
    }
    ModelParams::new(models[0].arch, theta)
}

/// Size-weighted average of client models.
pub fn aggregate_fedavg(models: &[&ModelParams], sizes: &[f64]) -> Result<ModelParams> {
    check(models, sizes)?;
    weighted_sum(models, &size_weights(sizes))
}

/// Realized minimal-bias weights `k * softmax(s / tau)_i * p_i`.
pub fn mba_weights(scores: &[f64], sizes: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.len() != sizes.len() || scores.is_empty() {
        return Err(Error::Shape(
            "scores and sizes must be nonempty and equal length".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidValue(format!("tau {tau}")));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let k = scores.len() as f64;
    let p = size_weights(sizes);
    Ok(exps.iter().zip(&p).map(|(e, p)| k * e / z * p).collect())
}

/// Minimal-bias aggregation; returns the model and the weights applied.
pub fn aggregate_mba(
    models: &[&ModelParams],
    sizes: &[f64],
    scores: &[f64],
    tau: f64,
    renormalize: bool,
) -> Result<(ModelParams, Vec<f64>)> {
    check(models, sizes)?;
    let mut w = mba_weights(scores, sizes, tau)?;
    if renormalize {
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
    }
    Ok((weighted_sum(models, &w)?, w))
}
