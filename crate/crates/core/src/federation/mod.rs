//! Protocol engine: broadcast, client rounds, minimal-bias aggregation and
//! the global vMF state that drives the learning controller.

mod aggregate;
mod client;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_fedavg, aggregate_mba, mba_weights, size_weights, AggregationKind, AggregationPolicy};
pub use client::{
    client_round, consistency_score, consistency_scores, probe_batch_kl, BroadcastPayload, ClientDiagnostics,
    ClientReport, FedClient,
};

use crate::error::{Error, Result};
use crate::learner::{FrequencyBand, LossWeights, ModelParams};
use crate::metrics::RoundEval;
use crate::rng;
use crate::signal::AugmentPolicy;
use crate::vmf::{update_global, GlobalDistState, VklForm};

/// How `sigma` is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaCalibration {
    /// Use the configured value.
    #[default]
    Fixed,
    /// Replace sigma with a quantile of the batch D_KL values probed on the
    /// first round in which the controller is active.
    FirstActiveQuantile { q: f64 },
}

/// Global distribution-aware learning controller settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdlcConfig {
    pub enabled: bool,
    pub sigma: f64,
    pub gamma: f64,
    #[serde(default)]
    pub form: VklForm,
    /// Rounds with index `<= warmup_rounds` use V_KL = 1.
    #[serde(default = "default_warmup")]
    pub warmup_rounds: u64,
    #[serde(default)]
    pub calibration: SigmaCalibration,
}

fn default_warmup() -> u64 {
    1
}

impl Default for GdlcConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma: 50.0,
            gamma: 0.5,
            form: VklForm::Logistic,
            warmup_rounds: default_warmup(),
            calibration: SigmaCalibration::Fixed,
        }
    }
}

impl GdlcConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub policy: AggregationPolicy,
    pub gdlc: GdlcConfig,
    pub band: FrequencyBand,
    pub augment: AugmentPolicy,
    pub loss_weights: LossWeights,
    /// SSM window in samples; `None` uses 1.5 s.
    pub ssm_window: Option<usize>,
    pub ssm_center: bool,
    /// Evaluate on the target every this many rounds (0: final round only).
    pub eval_every: u64,
    /// Run client rounds on the rayon pool.
    pub parallel: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            lr: 1e-4,
            batch_size: 100,
            local_epochs: 1,
            policy: AggregationPolicy::default(),
            gdlc: GdlcConfig::default(),
            band: FrequencyBand::default(),
            augment: AugmentPolicy::default(),
            loss_weights: LossWeights::default(),
            ssm_window: None,
            ssm_center: false,
            eval_every: 10,
            parallel: true,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.augment.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::Config("batch_size and local_epochs must be positive".into()));
        }
        if !(self.gdlc.gamma > 0.0) || !self.gdlc.sigma.is_finite() {
            return Err(Error::Config(format!(
                "gdlc sigma {} / gamma {} invalid",
                self.gdlc.sigma, self.gdlc.gamma
            )));
        }
        if let SigmaCalibration::FirstActiveQuantile { q } = self.gdlc.calibration {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("calibration quantile {q}")));
            }
        }
        Ok(())
    }
}

/// Server-side state between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ModelParams,
    pub dist: GlobalDistState,
    /// Completed aggregations.
    pub round: u64,
    pub policy: AggregationPolicy,
    /// Sigma fixed by calibration, once it has happened.
    #[serde(default)]
    pub calibrated_sigma: Option<f64>,
}

impl ServerState {
    pub fn new(theta: ModelParams, policy: AggregationPolicy) -> Self {
        Self {
            theta,
            dist: GlobalDistState::uninitialized(),
            round: 0,
            policy,
            calibrated_sigma: None,
        }
    }

    pub fn payload(&self) -> BroadcastPayload {
        BroadcastPayload {
            theta: self.theta.clone(),
            mu: self.dist.mu.clone(),
            kappa: self.dist.mu.as_ref().map(|_| self.dist.kappa),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundSummary {
    pub id: u32,
    pub s: Option<f64>,
    pub n_samples: usize,
    pub diagnostics: Option<ClientDiagnostics>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientWeight {
    pub id: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSnapshot {
    pub n: u64,
    pub r_bar: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub clients: Vec<ClientRoundSummary>,
    pub weights: Vec<ClientWeight>,
    pub weight_sum: f64,
    pub dist: DistSnapshot,
    pub sigma: Option<f64>,
    pub eval: Option<RoundEval>,
}

/// Folds reports into the global state and aggregates their models.
/// Reports are processed in ascending client id whatever their order.
pub fn server_round(server: &ServerState, reports: &[ClientReport]) -> Result<(ServerState, Vec<ClientWeight>)> {
    if reports.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sorted: Vec<&ClientReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    let mut dist = server.dist.clone();
    for r in &sorted {
        match update_global(&dist, &r.stats) {
            Ok(next) => dist = next,
            Err(e) => log::warn!("client {} stats not folded: {e}", r.client_id),
        }
    }
    let models: Vec<&ModelParams> = sorted.iter().map(|r| &r.theta_i).collect();
    let sizes: Vec<f64> = sorted.iter().map(|r| r.n_samples as f64).collect();
    let (theta, weights) = match server.policy.kind {
        AggregationKind::Fedavg => (aggregate_fedavg(&models, &sizes)?, size_weights(&sizes)),
        AggregationKind::Mba => {
            let scores: Vec<f64> = sorted.iter().map(|r| r.s_i).collect();
            aggregate_mba(
                &models,
                &sizes,
                &scores,
                server.policy.tau,
                server.policy.renormalize_weights,
            )?
        }
    };
    let weights = sorted
        .iter()
        .zip(weights)
        .map(|(r, w)| ClientWeight {
            id: r.client_id,
            weight: w,
        })
        .collect();
    Ok((
        ServerState {
            theta,
            dist,
            round: server.round + 1,
            policy: server.policy,
            calibrated_sigma: server.calibrated_sigma,
        },
        weights,
    ))
}

/// Evaluation hook; the federation engine itself never touches labels.
pub trait Evaluator: Sync {
    fn evaluate(&self, model: &ModelParams, include_target: bool) -> Result<RoundEval>;
}

/// Evaluator that does nothing.
pub struct NoEval;

impl Evaluator for NoEval {
    fn evaluate(&self, _: &ModelParams, _: bool) -> Result<RoundEval> {
        Ok(RoundEval::default())
    }
}

pub const CLIENT_STREAM: &str = "fed/client";
pub const PROBE_STREAM: &str = "fed/probe";

fn client_stream(seed: u64, round: u64, id: u32) -> rng::Stream {
    rng::stream(seed, CLIENT_STREAM, (round << 32) | id as u64)
}

fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(values.len() - 1);
    values[i] + (pos - i as f64) * (values[j] - values[i])
}

fn run_clients<F, T>(clients: &[FedClient], parallel: bool, f: F) -> Vec<T>
where
    F: Fn(&FedClient) -> T + Sync + Send,
    T: Send,
{
    if parallel {
        clients.par_iter().map(f).collect()
    } else {
        clients.iter().map(f).collect()
    }
}

/// Runs rounds `state.round .. cfg.rounds`, calling `on_round` after each
/// aggregation. Deterministic in `(cfg, clients, state, seed)`.
pub fn run_fudg(
    cfg: &FedConfig,
    clients: &[FedClient],
    mut state: ServerState,
    seed: u64,
    evaluator: &dyn Evaluator,
    on_round: &mut dyn FnMut(&RoundRecord, &ServerState) -> Result<()>,
) -> Result<ServerState> {
    cfg.validate()?;
    let mut ids: Vec<u32> = clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("duplicate client ids".into()));
    }
    while state.round < cfg.rounds {
        let round = state.round;
        let payload = state.payload();

        let active = cfg.gdlc.enabled && round > cfg.gdlc.warmup_rounds && payload.mu.is_some();
        if let (true, None, SigmaCalibration::FirstActiveQuantile { q }) =
            (active, state.calibrated_sigma, cfg.gdlc.calibration)
        {
            let probes = run_clients(clients, cfg.parallel, |c| {
                probe_batch_kl(c, &payload, cfg, &mut rng::stream(seed, PROBE_STREAM, c.id as u64))
            });
            let mut all = Vec::new();
            for p in probes {
                all.extend(p?);
            }
            if !all.is_empty() {
                let sigma = quantile(&mut all, q);
                log::info!(
                    "round {round}: sigma calibrated to {sigma:.6} from {} batches",
                    all.len()
                );
                state.calibrated_sigma = Some(sigma);
            }
        }
        let sigma = state.calibrated_sigma;

        let outcomes = run_clients(clients, cfg.parallel, |c| {
            client_round(c, &payload, round, cfg, sigma, &mut client_stream(seed, round, c.id))
        });
        let mut reports = Vec::new();
        let mut summaries = Vec::new();
        for (c, out) in clients.iter().zip(outcomes) {
            match out {
                Ok(r) => {
                    summaries.push(ClientRoundSummary {
                        id: c.id,
                        s: Some(r.s_i),
                        n_samples: r.n_samples,
                        diagnostics: Some(r.diagnostics.clone()),
                        failure: None,
                    });
                    reports.push(r);
                }
                Err(e @ Error::ClientFailure { .. }) => {
                    log::warn!("round {round}: {e}; client excluded");
                    summaries.push(ClientRoundSummary {
                        id: c.id,
                        s: None,
                        n_samples: c.inputs.len(),
                        diagnostics: None,
                        failure: Some(e.to_string()),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        summaries.sort_by_key(|s| s.id);
        if reports.is_empty() {
            return Err(Error::ClientFailure {
                client: usize::MAX,
                reason: format!("every client failed in round {round}"),
            });
        }
        let (next, weights) = server_round(&state, &reports)?;
        state = next;
        let final_round = state.round == cfg.rounds;
        let with_target = final_round || (cfg.eval_every > 0 && state.round % cfg.eval_every == 0);
        let eval = Some(evaluator.evaluate(&state.theta, with_target)?);
        let record = RoundRecord {
            round,
            clients: summaries,
            weight_sum: weights.iter().map(|w| w.weight).sum(),
            weights,
            dist: DistSnapshot {
                n: state.dist.n_total,
                r_bar: state.dist.r_bar,
                kappa: state.dist.kappa,
            },
            sigma: if cfg.gdlc.enabled {
                Some(sigma.unwrap_or(cfg.gdlc.sigma))
            } else {
                None
            },
            eval,
        };
        on_round(&record, &state)?;
    }
    Ok(state)
}

/// One JSON object per line.
pub fn write_history_jsonl<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// CSV summary: round, per-client s and weight, mean val MAE, target MAE.
pub fn history_csv(records: &[RoundRecord]) -> String {
    let ids: Vec<u32> = records
        .first()
        .map(|r| r.clients.iter().map(|c| c.id).collect())
        .unwrap_or_default();
    let mut out = String::from("round");
    for id in &ids {
        out.push_str(&format!(",s_{id},w_{id}"));
    }
    out.push_str(",val_mae,target_mae\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in records {
        out.push_str(&r.round.to_string());
        for id in &ids {
            let s = r.clients.iter().find(|c| c.id == *id).and_then(|c| c.s);
            let w = r.weights.iter().find(|w| w.id == *id).map(|w| w.weight);
            out.push_str(&format!(",{},{}", fmt(s), fmt(w)));
        }
        let val = r.eval.as_ref().and_then(|e| e.mean_val_mae());
        let target = r.eval.as_ref().and_then(|e| e.target.as_ref().map(|t| t.mae));
        out.push_str(&format!(",{},{}\n", fmt(val), fmt(target)));
    }
    out
}

/// Checkpoint: model binary plus JSON for everything else.
pub fn save_checkpoint(state: &ServerState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::io::write_model(&dir.join("model.bin"), &state.theta)?;
    #[derive(Serialize)]
    struct Meta<'a> {
        dist: &'a GlobalDistState,
        round: u64,
        policy: &'a AggregationPolicy,
        calibrated_sigma: Option<f64>,
    }
    let meta = Meta {
        dist: &state.dist,
        round: state.round,
        policy: &state.policy,
        calibrated_sigma: state.calibrated_sigma,
    };
    std::fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ServerState> {
    let theta = crate::io::read_model(&dir.join("model.bin"))?;
    #[derive(Deserialize)]
    struct Meta {
        dist: GlobalDistState,
        round: u64,
        policy: AggregationPolicy,
        calibrated_sigma: Option<f64>,
    }
    let meta: Meta = serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)?;
    Ok(ServerState {
        theta,
        dist: meta.dist,
        round: meta.round,
        policy: meta.policy,
        calibrated_sigma: meta.calibrated_sigma,
    })
}
