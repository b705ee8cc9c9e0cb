//! Synthetic multi-domain benchmark: long-tailed heart-rate distributions,
//! per-client bias injection, and the pretrain / client / target split.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal::{SpatioTemporalMap, Waveform};

/// Allowed heart-rate range in bpm.
pub const HR_LIMITS: [f64; 2] = [40.0, 180.0];

const MAX_REJECTIONS: usize = 1_000_000;

/// Heart-rate distribution of one domain, truncated to `support` (bpm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HrDistributionSpec {
    /// `median * exp(sigma * z)`; the right tail is the long one.
    TruncatedLognormal {
        median: f64,
        sigma: f64,
        support: [f64; 2],
    },
    GaussianMixture {
        means: Vec<f64>,
        sigmas: Vec<f64>,
        weights: Vec<f64>,
        support: [f64; 2],
    },
    Uniform {
        support: [f64; 2],
    },
}

impl HrDistributionSpec {
    pub fn support(&self) -> [f64; 2] {
        match self {
            Self::TruncatedLognormal { support, .. }
            | Self::GaussianMixture { support, .. }
            | Self::Uniform { support } => *support,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.support();
        if !(lo >= HR_LIMITS[0] && hi <= HR_LIMITS[1] && lo <= hi) {
            return Err(Error::Config(format!(
                "HR support [{lo}, {hi}] must lie within [{}, {}]",
                HR_LIMITS[0], HR_LIMITS[1]
            )));
        }
        match self {
            Self::TruncatedLognormal { median, sigma, .. } => {
                if !(*median > 0.0 && *sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("lognormal median {median} / sigma {sigma}")));
                }
            }
            Self::GaussianMixture {
                means, sigmas, weights, ..
            } => {
                if means.is_empty() || means.len() != sigmas.len() || means.len() != weights.len() {
                    return Err(Error::Config("mixture component lists differ in length".into()));
                }
                if sigmas.iter().any(|s| !(*s >= 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::Config("mixture sigmas and weights must be >= 0".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("mixture weights sum to {total}")));
                }
            }
            Self::Uniform { .. } => {}
        }
        Ok(())
    }
}

/// One draw from `spec`, with out-of-support draws rejected and redrawn.
pub fn sample_hr<R: Rng + ?Sized>(spec: &HrDistributionSpec, rng: &mut R) -> f64 {
    sample_hr_component(spec, rng).0
}

/// As [`sample_hr`], also returning the mixture component of the accepted
/// draw (0 for single-component kinds).
pub fn sample_hr_component<R: Rng + ?Sized>(spec: &HrDistributionSpec, rng: &mut R) -> (f64, usize) {
    let [lo, hi] = spec.support();
    if let HrDistributionSpec::Uniform { .. } = spec {
        return (rng.random_range(lo..=hi), 0);
    }
    let picker = match spec {
        HrDistributionSpec::GaussianMixture { weights, .. } => WeightedIndex::new(weights).ok(),
        _ => None,
    };
    let mut last = (0.5 * (lo + hi), 0);
    for _ in 0..MAX_REJECTIONS {
        let z: f64 = StandardNormal.sample(rng);
        let draw = match spec {
            HrDistributionSpec::TruncatedLognormal { median, sigma, .. } => (median * (sigma * z).exp(), 0),
            HrDistributionSpec::GaussianMixture { means, sigmas, .. } => {
                let j = picker.as_ref().map_or(0, |p| p.sample(rng));
                (means[j] + sigmas[j] * z, j)
            }
            HrDistributionSpec::Uniform { .. } => unreachable!(),
        };
        if draw.0 >= lo && draw.0 <= hi {
            return draw;
        }
        last = draw;
    }
    log::warn!("HR rejection sampling exhausted; clamping to support");
    (last.0.clamp(lo, hi), last.1)
}

/// Domain bias injected into the spatio-temporal map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    /// Per-row pulse gains are `1 + row_gain_sigma * z`, drawn per sample.
    pub row_gain_sigma: f64,
    /// Standard deviation of i.i.d. Gaussian noise on every cell.
    pub noise_sigma: f64,
    pub drift_amp: f64,
    pub drift_freq: f64,
    pub harmonic_ratio: f64,
    /// Pulse gain per channel; empty means 1 for every channel.
    #[serde(default)]
    pub channel_gains: Vec<f64>,
    /// Standard deviation of Gaussian noise shared by all cells of a frame.
    #[serde(default)]
    pub common_noise_sigma: f64,
    #[serde(default)]
    pub interference: Option<Interference>,
}

/// Sinusoidal artifact shared by every row, with a frequency drawn per
/// sample from `band` (Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interference {
    pub amp: f64,
    pub band: [f64; 2],
    /// Amplitude per channel; empty means 1 for every channel.
    #[serde(default)]
    pub channel_gains: Vec<f64>,
}

impl BiasSpec {
    pub fn none() -> Self {
        Self {
            row_gain_sigma: 0.0,
            noise_sigma: 0.0,
            drift_amp: 0.0,
            drift_freq: 0.0,
            harmonic_ratio: 0.0,
            channel_gains: Vec::new(),
            common_noise_sigma: 0.0,
            interference: None,
        }
    }

    pub fn validate(&self, channels: usize, band_lo: f64) -> Result<()> {
        let fields = [
            ("row_gain_sigma", self.row_gain_sigma),
            ("noise_sigma", self.noise_sigma),
            ("drift_amp", self.drift_amp),
            ("drift_freq", self.drift_freq),
            ("harmonic_ratio", self.harmonic_ratio),
            ("common_noise_sigma", self.common_noise_sigma),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("bias {name} = {v} must be >= 0")));
            }
        }
        if self.drift_amp > 0.0 && self.drift_freq >= band_lo {
            return Err(Error::Config(format!(
                "drift_freq {} must be below the pulse band ({band_lo} Hz)",
                self.drift_freq
            )));
        }
        if !self.channel_gains.is_empty() && self.channel_gains.len() != channels {
            return Err(Error::Config(format!(
                "{} channel gains for {channels} channels",
                self.channel_gains.len()
            )));
        }
        if let Some(i) = &self.interference {
            if !(i.amp >= 0.0 && i.amp.is_finite()) || !(i.band[0] > 0.0 && i.band[0] <= i.band[1]) {
                return Err(Error::Config(format!("invalid interference {i:?}")));
            }
            if !i.channel_gains.is_empty() && i.channel_gains.len() != channels {
                return Err(Error::Config(format!(
                    "{} interference gains for {channels} channels",
                    i.channel_gains.len()
                )));
            }
        }
        Ok(())
    }

    fn channel_gain(&self, c: usize) -> f64 {
        self.channel_gains.get(c).copied().unwrap_or(1.0)
    }
}

/// One data domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub id: u32,
    pub hr_dist: HrDistributionSpec,
    pub bias: BiasSpec,
    pub n_samples: usize,
    /// `[T, S, C]`.
    pub shape: [usize; 3],
    pub fs: f64,
}

impl ClientProfile {
    pub fn validate(&self, band_lo: f64) -> Result<()> {
        if self.n_samples < 10 {
            return Err(Error::Config(format!(
                "client {} has {} samples; at least 10 required",
                self.id, self.n_samples
            )));
        }
        if self.shape.iter().any(|&v| v == 0) || self.shape[0] < 2 {
            return Err(Error::Config(format!("client {} shape {:?}", self.id, self.shape)));
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Config(format!("client {} fs {}", self.id, self.fs)));
        }
        self.hr_dist.validate()?;
        self.bias.validate(self.shape[2], band_lo)
    }
}

/// A generated sample. `gt_*` fields are for supervision and evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub x: SpatioTemporalMap,
    pub gt_signal: Waveform,
    pub gt_hr: f64,
}

/// Generates one sample at heart rate `hr`. Draw order: harmonic phase,
/// drift phase, row gains, then noise in time-major cell order.
pub fn gen_sample<R: Rng + ?Sized>(hr: f64, profile: &ClientProfile, rng: &mut R) -> Result<SyntheticSample> {
    let [time, rows, channels] = profile.shape;
    let fs = profile.fs;
    let bias = &profile.bias;
    let f = hr / 60.0;
    let harmonic_phase = rng.random_range(0.0..2.0 * PI);
    let drift_phase = rng.random_range(0.0..2.0 * PI);
    let row_gains: Vec<f64> = (0..rows)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            1.0 + bias.row_gain_sigma * z
        })
        .collect();
    let interference = bias.interference.as_ref().map(|i| {
        let f = if i.band[1] > i.band[0] {
            rng.random_range(i.band[0]..i.band[1])
        } else {
            i.band[0]
        };
        let phase = rng.random_range(0.0..2.0 * PI);
        (i, f, phase)
    });

    let gt: Vec<f64> = (0..time)
        .map(|t| {
            let ph = 2.0 * PI * f * t as f64 / fs;
            ph.sin() + bias.harmonic_ratio * (2.0 * ph + harmonic_phase).sin()
        })
        .collect();

    let mut values = Vec::with_capacity(time * rows * channels);
    for (t, &g) in gt.iter().enumerate() {
        let drift = bias.drift_amp * (2.0 * PI * bias.drift_freq * t as f64 / fs + drift_phase).sin();
        let common = if bias.common_noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            bias.common_noise_sigma * z
        } else {
            0.0
        };
        let artifact = interference
            .map(|(i, f, phase)| i.amp * (2.0 * PI * f * t as f64 / fs + phase).sin())
            .unwrap_or(0.0);
        for gain in &row_gains {
            for c in 0..channels {
                let art = match interference {
                    Some((i, _, _)) => artifact * i.channel_gains.get(c).copied().unwrap_or(1.0),
                    None => 0.0,
                };
                let noise = if bias.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    bias.noise_sigma * z
                } else {
                    0.0
                };
                values.push(gain * bias.channel_gain(c) * g + drift + common + art + noise);
            }
        }
    }
    Ok(SyntheticSample {
        x: SpatioTemporalMap::new(time, rows, channels, fs, values)?,
        gt_signal: Waveform::new(gt, fs)?,
        gt_hr: hr,
    })
}

/// Generates `profile.n_samples` samples from one stream.
pub fn gen_domain<R: Rng + ?Sized>(profile: &ClientProfile, rng: &mut R) -> Result<Vec<SyntheticSample>> {
    (0..profile.n_samples)
        .map(|_| {
            let hr = sample_hr(&profile.hr_dist, rng);
            gen_sample(hr, profile, rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub name: String,
    pub pretrain: ClientProfile,
    pub clients: Vec<ClientProfile>,
    pub target: ClientProfile,
    /// Lower edge of the pulse band, used to validate drift frequencies.
    #[serde(default = "default_band_lo")]
    pub band_lo: f64,
}

fn default_band_lo() -> f64 {
    0.66
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients.len() < 2 {
            return Err(Error::Config(format!(
                "at least 2 clients required, got {}",
                self.clients.len()
            )));
        }
        let mut ids = BTreeSet::new();
        for p in std::iter::once(&self.pretrain)
            .chain(&self.clients)
            .chain(std::iter::once(&self.target))
        {
            p.validate(self.band_lo)?;
            if p.shape != self.pretrain.shape || p.fs != self.pretrain.fs {
                return Err(Error::Config(format!(
                    "profile {} shape/fs differs from the pretrain profile",
                    p.id
                )));
            }
        }
        for c in &self.clients {
            if !ids.insert(c.id) {
                return Err(Error::Config(format!("duplicate client id {}", c.id)));
            }
            if c.bias == self.target.bias && c.hr_dist == self.target.hr_dist {
                return Err(Error::Config(format!("target profile is identical to client {}", c.id)));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.pretrain.shape
    }

    pub fn fs(&self) -> f64 {
        self.pretrain.fs
    }
}

/// A train/validation split at 4:1.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

impl Split {
    pub fn from_samples(mut samples: Vec<SyntheticSample>) -> Self {
        let n_train = train_count(samples.len());
        let val = samples.split_off(n_train);
        Self { train: samples, val }
    }
}

/// Number of training samples in a 4:1 split of `n`.
pub fn train_count(n: usize) -> usize {
    (4 * n + 2) / 5
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub pretrain: Split,
    /// In configuration order.
    pub clients: Vec<ClientData>,
    pub target: Vec<SyntheticSample>,
}

/// Stream tags; each domain draws from its own stream.
pub const PRETRAIN_TAG: &str = "synth/pretrain";
pub const CLIENT_TAG: &str = "synth/client";
pub const TARGET_TAG: &str = "synth/target";

/// Generates the full benchmark as a pure function of `(config, seed)`.
pub fn gen_benchmark(config: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    config.validate()?;
    let pretrain = gen_domain(&config.pretrain, &mut rng::stream(seed, PRETRAIN_TAG, 0))?;
    let clients = config
        .clients
        .iter()
        .map(|p| {
            let samples = gen_domain(p, &mut rng::stream(seed, CLIENT_TAG, p.id as u64))?;
            Ok(ClientData {
                id: p.id,
                split: Split::from_samples(samples),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let target = gen_domain(&config.target, &mut rng::stream(seed, TARGET_TAG, 0))?;
    Ok(Benchmark {
        pretrain: Split::from_samples(pretrain),
        clients,
        target,
    })
}

fn profile(
    id: u32,
    hr_dist: HrDistributionSpec,
    bias: BiasSpec,
    n: usize,
    shape: [usize; 3],
    fs: f64,
) -> ClientProfile {
    ClientProfile {
        id,
        hr_dist,
        bias,
        n_samples: n,
        shape,
        fs,
    }
}

/// Camera-style benchmark: 8 rows × 3 colour channels, 256 frames at 30 fps,
/// one labeled pretrain domain, four source clients and one unseen target.
///
/// The pretrain domain carries an in-band artifact above 130 bpm, so the
/// initial model learns to suppress high heart rates that the target
/// contains. Client 3 holds most of the high-rate data; client 4 is the
/// noisiest and carries a broadband artifact.
pub fn rppg4() -> BenchmarkConfig {
    let shape = [256, 8, 3];
    let fs = 30.0;
    let lognormal = |median: f64, sigma: f64, lo: f64, hi: f64| HrDistributionSpec::TruncatedLognormal {
        median,
        sigma,
        support: [lo, hi],
    };
    let bias = |row: f64, noise: f64, drift: f64, harmonic: f64, gains: [f64; 3], common: f64| BiasSpec {
        row_gain_sigma: row,
        noise_sigma: noise,
        drift_amp: drift,
        drift_freq: 0.15,
        harmonic_ratio: harmonic,
        channel_gains: gains.to_vec(),
        common_noise_sigma: common,
        interference: None,
    };
    let artifact = |amp: f64, band: [f64; 2], gains: [f64; 3]| {
        Some(Interference {
            amp,
            band,
            channel_gains: gains.to_vec(),
        })
    };
    BenchmarkConfig {
        name: "rppg-4".into(),
        pretrain: profile(
            0,
            HrDistributionSpec::Uniform { support: [50.0, 110.0] },
            BiasSpec {
                interference: artifact(1.5, [2.2, 3.0], [0.4, 1.0, 0.6]),
                ..bias(0.1, 0.5, 0.2, 0.3, [0.4, 1.0, 0.6], 0.1)
            },
            2000,
            shape,
            fs,
        ),
        clients: vec![
            profile(
                1,
                lognormal(70.0, 0.15, 45.0, 170.0),
                bias(0.1, 1.0, 0.5, 0.3, [0.4, 1.0, 0.6], 0.2),
                250,
                shape,
                fs,
            ),
            profile(
                2,
                lognormal(80.0, 0.22, 45.0, 175.0),
                bias(0.3, 2.0, 1.0, 0.4, [0.2, 1.0, 0.8], 0.4),
                250,
                shape,
                fs,
            ),
            profile(
                3,
                lognormal(115.0, 0.2, 60.0, 180.0),
                bias(0.5, 1.5, 2.0, 0.5, [0.6, 1.0, 0.3], 0.6),
                250,
                shape,
                fs,
            ),
            profile(
                4,
                lognormal(88.0, 0.30, 45.0, 180.0),
                BiasSpec {
                    interference: artifact(1.5, [0.7, 3.0], [1.0, 0.2, 1.0]),
                    ..bias(0.8, 5.0, 3.0, 0.6, [0.3, 0.8, 0.5], 1.0)
                },
                250,
                shape,
                fs,
            ),
        ],
        target: profile(
            9,
            HrDistributionSpec::GaussianMixture {
                means: vec![70.0, 105.0, 140.0],
                sigmas: vec![8.0, 12.0, 12.0],
                weights: vec![0.45, 0.35, 0.2],
                support: [40.0, 180.0],
            },
            bias(0.4, 2.5, 1.5, 0.45, [0.5, 1.0, 0.4], 0.5),
            500,
            shape,
            fs,
        ),
        band_lo: default_band_lo(),
    }
}

/// Radar-style benchmark: 2 range bins × 5 antenna channels, 256 frames at
/// 20 Hz, three source clients.
pub fn mmwave3() -> BenchmarkConfig {
    let shape = [256, 2, 5];
    let fs = 20.0;
    let bias = |row: f64, noise: f64, drift: f64, harmonic: f64, common: f64| BiasSpec {
        row_gain_sigma: row,
        noise_sigma: noise,
        drift_amp: drift,
        drift_freq: 0.25,
        harmonic_ratio: harmonic,
        channel_gains: vec![1.0, 0.8, 0.6, 0.4, 0.2],
        common_noise_sigma: common,
        interference: None,
    };
    BenchmarkConfig {
        name: "mmwave-3".into(),
        pretrain: profile(
            0,
            HrDistributionSpec::Uniform { support: [55.0, 100.0] },
            bias(0.1, 0.3, 0.5, 0.2, 0.1),
            1500,
            shape,
            fs,
        ),
        clients: vec![
            profile(
                1,
                HrDistributionSpec::TruncatedLognormal {
                    median: 70.0,
                    sigma: 0.15,
                    support: [45.0, 150.0],
                },
                bias(0.2, 0.8, 2.0, 0.3, 0.2),
                300,
                shape,
                fs,
            ),
            profile(
                2,
                HrDistributionSpec::TruncatedLognormal {
                    median: 78.0,
                    sigma: 0.2,
                    support: [45.0, 160.0],
                },
                bias(0.4, 1.5, 4.0, 0.4, 0.4),
                300,
                shape,
                fs,
            ),
            profile(
                3,
                HrDistributionSpec::GaussianMixture {
                    means: vec![65.0, 110.0],
                    sigmas: vec![7.0, 15.0],
                    weights: vec![0.7, 0.3],
                    support: [45.0, 170.0],
                },
                bias(0.7, 3.0, 6.0, 0.5, 0.8),
                300,
                shape,
                fs,
            ),
        ],
        target: profile(
            9,
            HrDistributionSpec::GaussianMixture {
                means: vec![68.0, 125.0],
                sigmas: vec![8.0, 14.0],
                weights: vec![0.6, 0.4],
                support: [40.0, 170.0],
            },
            bias(0.5, 2.0, 5.0, 0.35, 0.5),
            400,
            shape,
            fs,
        ),
        band_lo: default_band_lo(),
    }
}

/// Looks up a built-in benchmark by name.
pub fn preset(name: &str) -> Result<BenchmarkConfig> {
    match name {
        "rppg-4" => Ok(rppg4()),
        "mmwave-3" => Ok(mmwave3()),
        other => Err(Error::Config(format!(
            "unknown benchmark preset {other:?} (known: rppg-4, mmwave-3)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{estimate_hr, FrequencyBand};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quantile(sorted: &[f64], q: f64) -> f64 {
        sorted[((sorted.len() - 1) as f64 * q).round() as usize]
    }

    #[test]
    fn degenerate_uniform_support() {
        let spec = HrDistributionSpec::Uniform { support: [60.0, 60.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_hr(&spec, &mut rng), 60.0);
        }
    }

    #[test]
    fn lognormal_has_long_right_tail() {
        let spec = HrDistributionSpec::TruncatedLognormal {
            median: 70.0,
            sigma: 0.3,
            support: [40.0, 180.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut v: Vec<f64> = (0..100_000).map(|_| sample_hr(&spec, &mut rng)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (p01, p50, p99) = (quantile(&v, 0.01), quantile(&v, 0.5), quantile(&v, 0.99));
        assert!(p99 > p50 + 2.0 * (p50 - p01), "p1={p01} p50={p50} p99={p99}");
        assert!(v[0] >= 40.0 && v[v.len() - 1] <= 180.0);
    }

    #[test]
    fn mixture_component_frequencies_follow_weights() {
        let weights = vec![0.5, 0.3, 0.2];
        let spec = HrDistributionSpec::GaussianMixture {
            means: vec![70.0, 100.0, 130.0],
            sigmas: vec![5.0, 5.0, 5.0],
            weights: weights.clone(),
            support: [40.0, 180.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_hr_component(&spec, &mut rng).1] += 1;
        }
        for (c, w) in counts.iter().zip(&weights) {
            assert!((*c as f64 / n as f64 - w).abs() < 0.01);
        }
    }

    #[test]
    fn spec_validation() {
        let bad = HrDistributionSpec::Uniform { support: [30.0, 100.0] };
        assert!(bad.validate().is_err());
        let bad = HrDistributionSpec::GaussianMixture {
            means: vec![70.0, 90.0],
            sigmas: vec![5.0, 5.0],
            weights: vec![0.5, 0.6],
            support: [40.0, 180.0],
        };
        assert!(bad.validate().is_err());
        let mut b = BiasSpec::none();
        b.drift_amp = 1.0;
        b.drift_freq = 0.8;
        assert!(b.validate(3, 0.66).is_err());
        b.drift_freq = 0.2;
        assert!(b.validate(3, 0.66).is_ok());
        b.noise_sigma = -1.0;
        assert!(b.validate(3, 0.66).is_err());
    }

    fn zero_bias_profile() -> ClientProfile {
        ClientProfile {
            id: 7,
            hr_dist: HrDistributionSpec::Uniform { support: [50.0, 150.0] },
            bias: BiasSpec::none(),
            n_samples: 20,
            shape: [256, 4, 3],
            fs: 30.0,
        }
    }

    #[test]
    fn zero_bias_rows_equal_gt() {
        let p = zero_bias_profile();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = gen_sample(84.0, &p, &mut rng).unwrap();
        for t in 0..256 {
            for r in 0..4 {
                for c in 0..3 {
                    assert_eq!(s.x.get(t, r, c), s.gt_signal.samples()[t]);
                }
            }
        }
    }

    #[test]
    fn gt_dominant_frequency_matches_hr() {
        let mut p = zero_bias_profile();
        p.bias.harmonic_ratio = 0.6;
        let band = FrequencyBand::default();
        let bin_bpm = 60.0 * 30.0 / 1024.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let hr = sample_hr(&p.hr_dist, &mut rng);
            let s = gen_sample(hr, &p, &mut rng).unwrap();
            let est = estimate_hr(&s.gt_signal, &band).unwrap();
            assert!((est - hr).abs() < bin_bpm, "hr {hr} est {est}");
        }
    }

    #[test]
    fn heavy_noise_defeats_single_row_estimates() {
        let mut p = zero_bias_profile();
        p.bias.noise_sigma = 10.0;
        let band = FrequencyBand::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut misses = 0;
        for _ in 0..1000 {
            let hr = sample_hr(&p.hr_dist, &mut rng);
            let s = gen_sample(hr, &p, &mut rng).unwrap();
            let row = Waveform::new(s.x.trace(0, 0), 30.0).unwrap();
            if (estimate_hr(&row, &band).unwrap() - hr).abs() > 5.0 {
                misses += 1;
            }
        }
        assert!(misses > 300, "misses {misses}");
    }

    fn small_config() -> BenchmarkConfig {
        let mut cfg = rppg4();
        cfg.pretrain.n_samples = 20;
        for c in cfg.clients.iter_mut() {
            c.n_samples = 500;
            c.shape = [64, 2, 3];
        }
        cfg.pretrain.shape = [64, 2, 3];
        cfg.target.shape = [64, 2, 3];
        cfg.target.n_samples = 50;
        cfg
    }

    #[test]
    fn benchmark_split_and_determinism() {
        let cfg = small_config();
        let a = gen_benchmark(&cfg, 11).unwrap();
        assert_eq!(a.clients.len(), 4);
        for c in &a.clients {
            assert_eq!(c.split.train.len(), 400);
            assert_eq!(c.split.val.len(), 100);
        }
        assert_eq!(a.pretrain.train.len(), 16);
        let b = gen_benchmark(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_benchmark(&cfg, 12).unwrap();
        assert_ne!(a.target[0].x, c.target[0].x);
    }

    #[test]
    fn adding_a_client_leaves_others_unchanged() {
        let cfg = small_config();
        let a = gen_benchmark(&cfg, 3).unwrap();
        let mut more = cfg.clone();
        let mut extra = more.clients[0].clone();
        extra.id = 42;
        more.clients.insert(1, extra);
        let b = gen_benchmark(&more, 3).unwrap();
        for c in &a.clients {
            let other = b.clients.iter().find(|d| d.id == c.id).unwrap();
            assert_eq!(c, other);
        }
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut cfg = small_config();
        cfg.clients[1].id = cfg.clients[0].id;
        assert!(matches!(gen_benchmark(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.clients.truncate(1);
        assert!(gen_benchmark(&cfg, 0).is_err());
    }

    #[test]
    fn target_tails_nonempty() {
        let cfg = small_config();
        let b = gen_benchmark(&cfg, 5).unwrap();
        let mut pooled: Vec<f64> = b
            .clients
            .iter()
            .flat_map(|c| c.split.train.iter().map(|s| s.gt_hr))
            .collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (p10, p90) = (quantile(&pooled, 0.1), quantile(&pooled, 0.9));
        let lower = b.target.iter().filter(|s| s.gt_hr < p10).count();
        let upper = b.target.iter().filter(|s| s.gt_hr > p90).count();
        assert!(lower > 0 && upper > 0, "lower {lower} upper {upper}");
    }

    #[test]
    fn pooled_client_hr_histogram_matches_mixture_of_specs() {
        // the pooled draw is a mixture of the client specs; compare its
        // empirical CDF against a large independent reference sample
        let cfg = rppg4();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference: Vec<f64> = {
            let mut v: Vec<f64> = (0..200_000)
                .map(|i| sample_hr(&cfg.clients[i % 4].hr_dist, &mut rng))
                .collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let mut pooled: Vec<f64> = cfg
            .clients
            .iter()
            .flat_map(|c| {
                let mut r = rng::stream(99, CLIENT_TAG, c.id as u64);
                (0..2500)
                    .map(move |_| sample_hr(&c.hr_dist, &mut r))
                    .collect::<Vec<_>>()
            })
            .collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, v) in pooled.iter().enumerate() {
            let f_ref = reference.partition_point(|r| r <= v) as f64 / reference.len() as f64;
            ks = ks.max((f_ref - (i + 1) as f64 / pooled.len() as f64).abs());
        }
        // two-sample KS critical value at alpha = 0.001 is about 0.02 here
        assert!(ks < 0.02, "KS {ks}");
        let median = quantile(&pooled, 0.5);
        assert!(quantile(&pooled, 0.99) - median > 2.0 * (median - quantile(&pooled, 0.01)));
    }

    #[test]
    fn presets_validate() {
        rppg4().validate().unwrap();
        mmwave3().validate().unwrap();
        assert_eq!(mmwave3().shape(), [256, 2, 5]);
        assert!(preset("nope").is_err());
    }
}
