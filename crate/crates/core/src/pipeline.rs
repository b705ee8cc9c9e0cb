//! Glue between benchmark generation, pre-training and federated runs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::federation::{
    consistency_scores, run_fudg, AggregationPolicy, FedClient, FedConfig, GdlcConfig, RoundRecord, ServerState,
    SigmaCalibration,
};
use crate::learner::{pretrain, FrequencyBand, ModelArch, ModelParams, PretrainConfig, PretrainOutcome};
use crate::metrics::{evaluate, predict_hrs, tail_report, BenchmarkEvaluator, EvalResult, TailReport};
use crate::rng;
use crate::signal::{SpatioTemporalMap, Waveform};
use crate::synth::{Benchmark, SyntheticSample};

/// Federation settings used for the bundled benchmarks: a step size suited
/// to the small reference model and sigma calibrated from the first active
/// round.
pub fn tuned_fed_config() -> FedConfig {
    FedConfig {
        lr: 1e-2,
        gdlc: GdlcConfig {
            gamma: 0.5,
            calibration: SigmaCalibration::FirstActiveQuantile { q: 0.9 },
            ..GdlcConfig::default()
        },
        ..FedConfig::default()
    }
}

pub const PRETRAIN_STREAM: &str = "pretrain";

/// Unlabeled training inputs for every source client.
pub fn fed_clients(bench: &Benchmark) -> Vec<FedClient> {
    bench
        .clients
        .iter()
        .map(|c| FedClient {
            id: c.id,
            inputs: strip_labels(&c.split.train),
        })
        .collect()
}

pub fn strip_labels(samples: &[SyntheticSample]) -> Vec<SpatioTemporalMap> {
    samples.iter().map(|s| s.x.clone()).collect()
}

fn pairs(samples: &[SyntheticSample]) -> Vec<(&SpatioTemporalMap, &Waveform)> {
    samples.iter().map(|s| (&s.x, &s.gt_signal)).collect()
}

/// Reference architecture for a benchmark's input shape.
pub fn default_arch(bench: &Benchmark) -> ModelArch {
    let [t, s, c] = bench.pretrain.train[0].x.shape();
    ModelArch::reference(t, s, c)
}

/// Supervised pre-training on the benchmark's labeled pretrain split,
/// starting from the band-spread filter bank.
pub fn pretrain_benchmark(
    bench: &Benchmark,
    arch: ModelArch,
    band: &FrequencyBand,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let fs = bench.pretrain.train[0].x.fs();
    let init = ModelParams::filter_bank(arch, fs, band)?;
    pretrain(
        &init,
        &pairs(&bench.pretrain.train),
        &pairs(&bench.pretrain.val),
        cfg,
        &mut rng::stream(seed, PRETRAIN_STREAM, 0),
    )
}

/// One configuration of aggregation policy and controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: &'static str,
    pub policy: AggregationPolicy,
    pub gdlc: GdlcConfig,
}

impl Arm {
    /// Applies the arm's policy and controller switch to `base`. Controller
    /// hyperparameters come from `base` so every arm shares them.
    pub fn configure(&self, base: &FedConfig) -> FedConfig {
        FedConfig {
            policy: AggregationPolicy {
                tau: base.policy.tau,
                renormalize_weights: base.policy.renormalize_weights,
                ..self.policy
            },
            gdlc: GdlcConfig {
                enabled: self.gdlc.enabled,
                ..base.gdlc
            },
            ..base.clone()
        }
    }
}

/// The full method, its two ablations and the size-weighted baseline.
pub fn standard_arms() -> [Arm; 4] {
    let mba = AggregationPolicy::default();
    let fedavg = AggregationPolicy::fedavg();
    [
        Arm {
            name: "fedhug",
            policy: mba,
            gdlc: GdlcConfig::default(),
        },
        Arm {
            name: "no-mba",
            policy: fedavg,
            gdlc: GdlcConfig::default(),
        },
        Arm {
            name: "no-gdlc",
            policy: mba,
            gdlc: GdlcConfig::disabled(),
        },
        Arm {
            name: "fedavg",
            policy: fedavg,
            gdlc: GdlcConfig::disabled(),
        },
    ]
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub history: Vec<RoundRecord>,
    pub state: ServerState,
}

/// Federated run from `init` with client-val and target evaluation.
pub fn run_benchmark(bench: &Benchmark, init: &ModelParams, cfg: &FedConfig, seed: u64) -> Result<RunOutput> {
    let clients = fed_clients(bench);
    let evaluator = BenchmarkEvaluator {
        client_val: bench.clients.iter().map(|c| (c.id, c.split.val.as_slice())).collect(),
        target: &bench.target,
        band: cfg.band,
    };
    let mut history = Vec::new();
    let state = run_fudg(
        cfg,
        &clients,
        ServerState::new(init.clone(), cfg.policy),
        seed,
        &evaluator,
        &mut |r, _| {
            history.push(r.clone());
            Ok(())
        },
    )?;
    Ok(RunOutput { history, state })
}

pub const SCORE_STREAM: &str = "eval/scores";

/// Per-sample consistency scores of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScores {
    pub id: u32,
    pub scores: Vec<f64>,
}

/// Per-sample `s` on every client's training inputs. Each client uses its
/// own stream, so two models scored with the same seed see the same
/// augmentations.
pub fn client_scores(bench: &Benchmark, model: &ModelParams, cfg: &FedConfig, seed: u64) -> Result<Vec<ClientScores>> {
    fed_clients(bench)
        .iter()
        .map(|c| {
            let mut r = rng::stream(seed, SCORE_STREAM, c.id as u64);
            Ok(ClientScores {
                id: c.id,
                scores: consistency_scores(model, &c.inputs, cfg, &mut r)?,
            })
        })
        .collect()
}

/// Target metrics and score distributions at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub target: EvalResult,
    pub preds: Vec<f64>,
    pub gts: Vec<f64>,
    pub tail: TailReport,
    pub s_initial: Vec<ClientScores>,
    pub s_final: Vec<ClientScores>,
}

pub fn final_eval(
    bench: &Benchmark,
    init: &ModelParams,
    model: &ModelParams,
    cfg: &FedConfig,
    seed: u64,
) -> Result<FinalEval> {
    let target = evaluate(model, &bench.target, &cfg.band)?;
    let (preds, gts, _) = predict_hrs(model, &bench.target, &cfg.band)?;
    let tail = tail_report(&preds, &gts)?;
    Ok(FinalEval {
        target,
        tail,
        preds,
        gts,
        s_initial: client_scores(bench, init, cfg, seed)?,
        s_final: client_scores(bench, model, cfg, seed)?,
    })
}
