use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedhug::config::ExperimentConfig;
use fedhug::federation::{
    history_csv, load_checkpoint, read_history_jsonl, run_fudg, save_checkpoint, RoundRecord, ServerState,
};
use fedhug::io::{json_hash, load_benchmark, read_model, save_benchmark, sha256_hex, write_model};
use fedhug::learner::{EpochRecord, ModelParams};
use fedhug::metrics::BenchmarkEvaluator;
use fedhug::pipeline::{fed_clients, final_eval, pretrain_benchmark, FinalEval};
use fedhug::synth::{gen_benchmark, Benchmark};

pub const MANIFEST: &str = "manifest.json";
pub const HISTORY: &str = "history.jsonl";
pub const SUMMARY: &str = "summary.csv";
pub const FINAL_EVAL: &str = "final_eval.json";
pub const MODEL: &str = "model.bin";
const CHECKPOINT_DIR: &str = "checkpoint";
const PRETRAIN_RECORD: &str = "pretrain.json";

/// Written next to every command's outputs; enough to rerun the command.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_model_sha256: Option<String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let single = ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            name: None,
            config_hash: json_hash(&single)?,
            config: single,
            dataset_hash: None,
            init_model_sha256: None,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub fn gen(cfg: &ExperimentConfig) -> Result<()> {
    let bench_cfg = cfg.benchmark.resolve()?;
    for &seed in &cfg.seeds {
        let dir = cfg.data_dir(seed);
        let bench = gen_benchmark(&bench_cfg, seed)?;
        let m = save_benchmark(&dir, &bench_cfg, seed, &bench, cfg.dtype)
            .with_context(|| format!("writing dataset to {}", dir.display()))?;
        log::info!(
            "seed {seed}: {} files in {} (config {})",
            m.files.len(),
            dir.display(),
            m.config_hash
        );
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<(String, Benchmark)> {
    let dir = cfg.data_dir(seed);
    if !dir.exists() {
        bail!("dataset {} not found; run `fedhug gen` first", dir.display());
    }
    let (manifest, bench) = load_benchmark(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if manifest.config != cfg.benchmark.resolve()? {
        bail!(
            "dataset {} was generated from a different benchmark config",
            dir.display()
        );
    }
    Ok((json_hash(&manifest)?, bench))
}

#[derive(Debug, Serialize, Deserialize)]
struct PretrainRecord {
    initial_val_loss: f64,
    best_val_loss: f64,
    /// `1 - best_val_loss`: mean per-sample waveform Pearson on the val split.
    val_pearson: f64,
    plateaued: bool,
    history: Vec<EpochRecord>,
}

pub fn pretrain(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    for &seed in &cfg.seeds {
        let (dataset_hash, bench) = load_data(cfg, seed)?;
        let dir = cfg.pretrain_dir(seed);
        let mut manifest = RunManifest::new("pretrain", cfg, seed)?;
        manifest.dataset_hash = Some(dataset_hash);
        if !force && dir.join(MODEL).exists() {
            if let Ok(old) = read_manifest(&dir) {
                if old.config.pretrain == cfg.pretrain
                    && old.config.model == cfg.model
                    && old.dataset_hash == manifest.dataset_hash
                {
                    log::info!(
                        "seed {seed}: converged model already in {}; nothing to do",
                        dir.display()
                    );
                    continue;
                }
            }
        }
        let arch = cfg.arch(&cfg.benchmark.resolve()?);
        let out = pretrain_benchmark(&bench, arch, &cfg.federation.band, &cfg.pretrain, seed)
            .with_context(|| format!("pre-training seed {seed}"))?;
        fs::create_dir_all(&dir)?;
        write_model(&dir.join(MODEL), &out.params)?;
        let record = PretrainRecord {
            initial_val_loss: out.initial_val_loss,
            best_val_loss: out.best_val_loss,
            val_pearson: 1.0 - out.best_val_loss,
            plateaued: out.plateaued,
            history: out.history,
        };
        fs::write(dir.join(PRETRAIN_RECORD), serde_json::to_vec_pretty(&record)?)?;
        manifest.write(&dir)?;
        log::info!(
            "seed {seed}: val pearson {:.4} after {} epochs",
            record.val_pearson,
            record.history.len()
        );
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_init(cfg: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    let path = cfg.pretrain_dir(seed).join(MODEL);
    if !path.exists() {
        bail!(
            "pretrained model {} not found; run `fedhug pretrain` first",
            path.display()
        );
    }
    Ok(read_model(&path)?)
}

pub fn run(cfg: &ExperimentConfig, name: &str, resume: bool) -> Result<()> {
    let fed = &cfg.federation;
    let mut finals = Vec::new();
    for &seed in &cfg.seeds {
        let (dataset_hash, bench) = load_data(cfg, seed)?;
        let init = load_init(cfg, seed)?;
        let dir = cfg.run_dir(name, seed);
        let ckpt = dir.join(CHECKPOINT_DIR);
        let hist_path = dir.join(HISTORY);

        let (state, kept) = if resume && ckpt.join("state.json").exists() {
            let state = load_checkpoint(&ckpt).context("loading checkpoint")?;
            let kept: Vec<RoundRecord> = read_history_jsonl(&hist_path)?
                .into_iter()
                .filter(|r| r.round < state.round)
                .collect();
            if kept.len() as u64 != state.round {
                bail!(
                    "{} holds {} rounds but the checkpoint is at round {}",
                    hist_path.display(),
                    kept.len(),
                    state.round
                );
            }
            log::info!("seed {seed}: resuming at round {}", state.round);
            (state, kept)
        } else {
            if dir.exists() {
                log::warn!("overwriting {}", dir.display());
                fs::remove_dir_all(&dir)?;
            }
            (ServerState::new(init.clone(), fed.policy), Vec::new())
        };

        let mut manifest = RunManifest::new("run", cfg, seed)?;
        manifest.name = Some(name.into());
        manifest.dataset_hash = Some(dataset_hash);
        manifest.init_model_sha256 = Some(sha256_hex(&fedhug::io::encode_model(&init)?));
        manifest.write(&dir)?;

        let mut file = File::create(&hist_path)?;
        let mut history = Vec::with_capacity(fed.rounds as usize);
        for r in kept {
            write_line(&mut file, &r)?;
            history.push(r);
        }
        let clients = fed_clients(&bench);
        let evaluator = BenchmarkEvaluator {
            client_val: bench.clients.iter().map(|c| (c.id, c.split.val.as_slice())).collect(),
            target: &bench.target,
            band: fed.band,
        };
        let every = cfg.checkpoint_every;
        let state = run_fudg(fed, &clients, state, seed, &evaluator, &mut |r, s| {
            write_line(&mut file, r)?;
            history.push(r.clone());
            if every > 0 && (s.round % every == 0 || s.round == fed.rounds) {
                save_checkpoint(s, &ckpt)?;
            }
            Ok(())
        })
        .with_context(|| {
            format!(
                "seed {seed}: federated run failed; partial history in {}",
                hist_path.display()
            )
        })?;
        drop(file);

        fs::write(dir.join(SUMMARY), history_csv(&history))?;
        write_model(&dir.join(MODEL), &state.theta)?;
        let fe = final_eval(&bench, &init, &state.theta, fed, seed)?;
        fs::write(dir.join(FINAL_EVAL), serde_json::to_vec(&fe)?)?;
        log::info!("seed {seed}: target MAE {:.3} bpm", fe.target.mae);
        finals.push((seed, fe));
    }
    write_aggregate(&cfg.run_root(name), &finals)
}

fn write_line(file: &mut File, r: &RoundRecord) -> fedhug::Result<()> {
    let mut line = serde_json::to_vec(r)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.flush()?;
    Ok(())
}

fn write_aggregate(root: &Path, finals: &[(u64, FinalEval)]) -> Result<()> {
    let mut out = String::from("seed,mae,sd,rmse,pearson,tail_mae\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (seed, f) in finals {
        let t = &f.target;
        out.push_str(&format!(
            "{seed},{},{},{},{},{}\n",
            t.mae,
            t.sd,
            t.rmse,
            t.pearson,
            fmt(f.tail.tail_mae)
        ));
    }
    let n = finals.len() as f64;
    let mean = |g: &dyn Fn(&FinalEval) -> f64| finals.iter().map(|(_, f)| g(f)).sum::<f64>() / n;
    let tails: Vec<f64> = finals.iter().filter_map(|(_, f)| f.tail.tail_mae).collect();
    let tail_mean = (!tails.is_empty()).then(|| tails.iter().sum::<f64>() / tails.len() as f64);
    out.push_str(&format!(
        "mean,{},{},{},{},{}\n",
        mean(&|f| f.target.mae),
        mean(&|f| f.target.sd),
        mean(&|f| f.target.rmse),
        mean(&|f| f.target.pearson),
        fmt(tail_mean)
    ));
    fs::create_dir_all(root)?;
    fs::write(root.join("aggregate.csv"), out)?;
    Ok(())
}
