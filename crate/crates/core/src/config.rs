//! Experiment configuration shared by the command-line tools.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::io::Dtype;
use crate::learner::{ModelArch, PretrainConfig};
use crate::synth::{preset, BenchmarkConfig};

/// Which benchmark to generate: a named preset or a full inline definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<BenchmarkConfig>,
}

impl BenchmarkSource {
    pub fn preset(name: &str) -> Self {
        Self {
            preset: Some(name.into()),
            config: None,
        }
    }

    pub fn resolve(&self) -> Result<BenchmarkConfig> {
        match (&self.preset, &self.config) {
            (Some(name), None) => preset(name),
            (None, Some(cfg)) => Ok(cfg.clone()),
            _ => Err(Error::Config(
                "benchmark needs exactly one of `preset` or `config`".into(),
            )),
        }
    }
}

/// Optional changes to the reference architecture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub n_filters: Option<usize>,
    pub taps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkSource,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub federation: FedConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Where generated datasets live; defaults to `<output_dir>/data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    /// Write a resumable server checkpoint every this many rounds (0: never).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Reserved. Accepted so configs carrying it still load; it has no effect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    "runs".into()
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

fn default_checkpoint_every() -> u64 {
    10
}

impl ExperimentConfig {
    pub fn for_preset(name: &str) -> Self {
        Self {
            benchmark: BenchmarkSource::preset(name),
            model: ModelOverrides::default(),
            pretrain: PretrainConfig::default(),
            federation: FedConfig::default(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            dataset_dir: None,
            dtype: default_dtype(),
            checkpoint_every: default_checkpoint_every(),
            beta: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bench = self.benchmark.resolve()?;
        bench.validate()?;
        self.arch(&bench).validate()?;
        self.federation.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate seeds in {:?}", self.seeds)));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(beta) = self.beta {
            out.push(format!("`beta = {beta}` is reserved and has no effect"));
        }
        out
    }

    pub fn arch(&self, bench: &BenchmarkConfig) -> ModelArch {
        let [t, s, c] = bench.shape();
        let mut arch = ModelArch::reference(t, s, c);
        if let Some(f) = self.model.n_filters {
            arch.n_filters = f;
        }
        if let Some(k) = self.model.taps {
            arch.taps = k;
        }
        arch
    }

    pub fn data_root(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.data_root().join(format!("seed_{seed}"))
    }

    pub fn pretrain_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join("pretrain").join(format!("seed_{seed}"))
    }

    pub fn run_root(&self, name: &str) -> PathBuf {
        self.output_dir.join("runs").join(name)
    }

    pub fn run_dir(&self, name: &str, seed: u64) -> PathBuf {
        self.run_root(name).join(format!("seed_{seed}"))
    }
}
