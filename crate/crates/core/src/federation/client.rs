use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FedConfig;
use crate::error::{Error, Result};
use crate::learner::{batch_objective, forward_signal, LossBreakdown, ModelParams};
use crate::signal::{augment, default_window, waveform_consistency, SpatioTemporalMap};
use crate::vmf::{
    estimate_batch_stats, kl_divergence, update_global, vkl_weight_with, BatchStats, GlobalDistState, UnitVector,
    VmfParams,
};

/// A client as the federation sees it: an id and unlabeled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FedClient {
    pub id: u32,
    pub inputs: Vec<SpatioTemporalMap>,
}

/// Server to client message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastPayload {
    pub theta: ModelParams,
    pub mu: Option<UnitVector>,
    pub kappa: Option<f64>,
}

impl BroadcastPayload {
    pub fn global_vmf(&self) -> Option<VmfParams> {
        match (&self.mu, self.kappa) {
            (Some(mu), Some(kappa)) => VmfParams::new(mu.clone(), kappa).ok(),
            _ => None,
        }
    }
}

/// Round-level aggregates a client reports alongside its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDiagnostics {
    pub batches: usize,
    pub skipped_batches: usize,
    pub v_kl_mean: f64,
    pub v_kl_min: f64,
    pub v_kl_max: f64,
    pub kl_mean: Option<f64>,
    /// Mean over applied batches.
    pub loss: LossBreakdown,
}

/// Client to server message. Only model parameters and summary scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub theta_i: ModelParams,
    pub s_i: f64,
    pub stats: BatchStats,
    /// `N_i`, the number of local training samples.
    pub n_samples: usize,
    pub diagnostics: ClientDiagnostics,
}

/// Per-sample SSM consistency of the model's outputs on original vs
/// augmented inputs. Samples whose outputs are degenerate are skipped.
pub fn consistency_scores<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: &[SpatioTemporalMap],
    cfg: &FedConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        let x_a = augment(x, &cfg.augment, rng)?;
        let l = cfg.ssm_window.unwrap_or_else(|| default_window(x.fs()));
        let y = forward_signal(params, x)?;
        let y_a = forward_signal(params, &x_a)?;
        match waveform_consistency(&y, &y_a, l, cfg.ssm_center) {
            Ok(s) => out.push(s),
            Err(e @ (Error::DegenerateSignal(_) | Error::InvalidWindow { .. })) => {
                log::debug!("consistency skipped a sample: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Mean of [`consistency_scores`]; the client's `s_i`.
pub fn consistency_score<R: Rng + ?Sized>(
    params: &ModelParams,
    inputs: &[SpatioTemporalMap],
    cfg: &FedConfig,
    rng: &mut R,
) -> Result<f64> {
    let scores = consistency_scores(params, inputs, cfg, rng)?;
    if scores.is_empty() {
        return Err(Error::DegenerateSignal("no sample produced an SSM".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn batches_for<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn is_degenerate(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateSpectrum(_) | Error::DegenerateResultant(_) | Error::DegenerateSignal(_) | Error::Domain(_)
    )
}

/// V_KL for one batch, or 1 when the controller is inactive this round.
fn batch_weight(
    stats: &BatchStats,
    global: Option<&VmfParams>,
    round_idx: u64,
    cfg: &FedConfig,
    sigma: Option<f64>,
) -> Result<(f64, Option<f64>)> {
    let active = cfg.gdlc.enabled && round_idx > cfg.gdlc.warmup_rounds;
    let (Some(global), true) = (global, active) else {
        return Ok((1.0, None));
    };
    let kl = kl_divergence(&stats.to_vmf()?, global)?;
    let sigma = sigma.unwrap_or(cfg.gdlc.sigma);
    Ok((vkl_weight_with(kl, sigma, cfg.gdlc.gamma, cfg.gdlc.form), Some(kl)))
}

/// One client round: score the received model, then one or more local
/// epochs of GDLC-weighted updates.
pub fn client_round<R: Rng + ?Sized>(
    client: &FedClient,
    payload: &BroadcastPayload,
    round_idx: u64,
    cfg: &FedConfig,
    sigma: Option<f64>,
    rng: &mut R,
) -> Result<ClientReport> {
    let fail = |reason: String| Error::ClientFailure {
        client: client.id as usize,
        reason,
    };
    if client.inputs.is_empty() {
        return Err(fail("no local data".into()));
    }
    let arch = payload.theta.arch;
    if client.inputs[0].shape() != arch.input_shape() {
        return Err(Error::Shape(format!(
            "client {} inputs {:?} vs model {:?}",
            client.id,
            client.inputs[0].shape(),
            arch.input_shape()
        )));
    }
    let mut theta = payload.theta.clone();
    let s_i =
        consistency_score(&theta, &client.inputs, cfg, rng).map_err(|e| fail(format!("consistency score: {e}")))?;
    let global = payload.global_vmf();

    let mut pooled = GlobalDistState::uninitialized();
    let mut batches = 0usize;
    let mut skipped = 0usize;
    let (mut v_sum, mut v_min, mut v_max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    let (mut kl_sum, mut kl_count) = (0.0, 0usize);
    let mut loss_sum = LossBreakdown::default();

    for _ in 0..cfg.local_epochs {
        for idx in batches_for(client.inputs.len(), cfg.batch_size, rng) {
            batches += 1;
            let batch: Vec<&SpatioTemporalMap> = idx.iter().map(|&i| &client.inputs[i]).collect();
            let step = batch_objective(&theta, &batch, &cfg.band, &cfg.loss_weights, 1.0).and_then(|obj| {
                let features: Vec<UnitVector> = obj.outputs.iter().map(|o| o.feature.clone()).collect();
                let stats = estimate_batch_stats(&features)?;
                let (v, kl) = batch_weight(&stats, global.as_ref(), round_idx, cfg, sigma)?;
                Ok((obj, stats, v, kl))
            });
            let (obj, stats, v, kl) = match step {
                Ok(r) => r,
                Err(e) if is_degenerate(&e) => {
                    log::warn!("client {} round {round_idx}: skipping batch: {e}", client.id);
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            match update_global(&pooled, &stats) {
                Ok(next) => pooled = next,
                Err(e) => log::warn!("client {}: batch stats not pooled: {e}", client.id),
            }
            if cfg.lr > 0.0 {
                theta = theta.stepped(&obj.grad, cfg.lr * v)?;
            }
            v_sum += v;
            v_min = v_min.min(v);
            v_max = v_max.max(v);
            if let Some(kl) = kl {
                kl_sum += kl;
                kl_count += 1;
            }
            loss_sum.bandwidth += obj.loss.bandwidth;
            loss_sum.sparsity += obj.loss.sparsity;
            loss_sum.variation += obj.loss.variation;
            loss_sum.total += obj.loss.total;
        }
    }
    let applied = batches - skipped;
    let Some(mu) = pooled.mu.clone().filter(|_| applied > 0) else {
        return Err(fail(format!("all {batches} batches degenerate")));
    };
    let a = applied as f64;
    Ok(ClientReport {
        client_id: client.id,
        theta_i: theta,
        s_i,
        stats: BatchStats {
            mu,
            r_bar: pooled.r_bar,
            n: pooled.n_total,
        },
        n_samples: client.inputs.len(),
        diagnostics: ClientDiagnostics {
            batches,
            skipped_batches: skipped,
            v_kl_mean: v_sum / a,
            v_kl_min: v_min,
            v_kl_max: v_max,
            kl_mean: (kl_count > 0).then(|| kl_sum / kl_count as f64),
            loss: LossBreakdown {
                bandwidth: loss_sum.bandwidth / a,
                sparsity: loss_sum.sparsity / a,
                variation: loss_sum.variation / a,
                total: loss_sum.total / a,
            },
        },
    })
}

/// D_KL of each local batch under the received model, for calibrating
/// sigma. Uses its own stream so the training round is unaffected.
pub fn probe_batch_kl<R: Rng + ?Sized>(
    client: &FedClient,
    payload: &BroadcastPayload,
    cfg: &FedConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let Some(global) = payload.global_vmf() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for idx in batches_for(client.inputs.len(), cfg.batch_size, rng) {
        let mut features = Vec::with_capacity(idx.len());
        for &i in &idx {
            features.push(crate::learner::forward(&payload.theta, &client.inputs[i])?.feature);
        }
        let stats = match estimate_batch_stats(&features).and_then(|s| s.to_vmf()) {
            Ok(s) => s,
            Err(e) if is_degenerate(&e) => continue,
            Err(e) => return Err(e),
        };
        out.push(kl_divergence(&stats, &global)?);
    }
    Ok(out)
}
