//! Heart-rate error metrics, tail-interval analysis and consistency-score
//! histograms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Evaluator;
use crate::learner::{estimate_hr, forward_signal, FrequencyBand, ModelParams};
use crate::signal::{augment, default_window, waveform_consistency, AugmentPolicy, SpatioTemporalMap, Waveform};
use crate::synth::SyntheticSample;

/// Share of samples that may be excluded before evaluation is refused.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    /// Standard deviation of the absolute errors.
    pub sd: f64,
    pub rmse: f64,
    /// 0 when either side has zero variance; see `pearson_defined`.
    pub pearson: f64,
    pub pearson_defined: bool,
    pub n: usize,
    pub excluded: usize,
}

impl EvalResult {
    pub fn csv_header() -> &'static str {
        "mae,sd,rmse,pearson,pearson_defined,n,excluded"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mae, self.sd, self.rmse, self.pearson, self.pearson_defined, self.n, self.excluded
        )
    }
}

/// Metrics over paired predictions and ground truth (bpm).
pub fn hr_metrics(preds: &[f64], gts: &[f64]) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions, {} labels",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = preds.len() as f64;
    let abs: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let sd = (abs.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / n).sqrt();
    let mp = preds.iter().sum::<f64>() / n;
    let mg = gts.iter().sum::<f64>() / n;
    let (mut spg, mut spp, mut sgg) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(gts) {
        spg += (p - mp) * (g - mg);
        spp += (p - mp) * (p - mp);
        sgg += (g - mg) * (g - mg);
    }
    let defined = preds.len() >= 2 && spp > 0.0 && sgg > 0.0;
    let pearson = if defined {
        (spg / (spp.sqrt() * sgg.sqrt())).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(EvalResult {
        mae,
        sd,
        rmse: rmse.max(mae),
        pearson,
        pearson_defined: defined,
        n: preds.len(),
        excluded: 0,
    })
}

/// Predicted and true heart rates, skipping samples with degenerate spectra.
pub fn predict_hrs(
    model: &ModelParams,
    dataset: &[SyntheticSample],
    band: &FrequencyBand,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut preds = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    let mut excluded = 0;
    for s in dataset {
        let y = forward_signal(model, &s.x)?;
        match estimate_hr(&y, band) {
            Ok(hr) => {
                preds.push(hr);
                gts.push(s.gt_hr);
            }
            Err(Error::DegenerateSpectrum(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((preds, gts, excluded))
}

/// Model accuracy on a labeled dataset.
pub fn evaluate(model: &ModelParams, dataset: &[SyntheticSample], band: &FrequencyBand) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (preds, gts, excluded) = predict_hrs(model, dataset, band)?;
    if excluded as f64 > MAX_EXCLUDED_FRACTION * dataset.len() as f64 {
        return Err(Error::EvaluationIntegrity {
            excluded,
            total: dataset.len(),
        });
    }
    let mut r = hr_metrics(&preds, &gts)?;
    r.excluded = excluded;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMae {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    /// Absent when the interval holds no samples.
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub edges: Vec<f64>,
    pub bins: Vec<IntervalMae>,
    pub p10: f64,
    pub p90: f64,
    /// gt below `p10`.
    pub lower_tail: IntervalMae,
    /// gt above `p90`.
    pub upper_tail: IntervalMae,
    /// MAE over the union of both tails.
    pub tail_mae: Option<f64>,
}

impl TailReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("interval,lo,hi,n,mae\n");
        let fmt = |m: Option<f64>| m.map(|v| v.to_string()).unwrap_or_default();
        for b in &self.bins {
            out.push_str(&format!("bin,{},{},{},{}\n", b.lo, b.hi, b.n, fmt(b.mae)));
        }
        for (name, t) in [("lower_tail", &self.lower_tail), ("upper_tail", &self.upper_tail)] {
            out.push_str(&format!("{name},{},{},{},{}\n", t.lo, t.hi, t.n, fmt(t.mae)));
        }
        out
    }
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (pos - i as f64) * (v[j] - v[i])
}

fn interval(preds: &[f64], gts: &[f64], lo: f64, hi: f64, keep: impl Fn(f64) -> bool) -> IntervalMae {
    let errs: Vec<f64> = preds
        .iter()
        .zip(gts)
        .filter(|(_, g)| keep(**g))
        .map(|(p, g)| (p - g).abs())
        .collect();
    IntervalMae {
        lo,
        hi,
        n: errs.len(),
        mae: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
    }
}

/// Per-interval MAE with `width`-bpm bins and tails at the 10th and 90th
/// percentiles of `gts`.
pub fn tail_report(preds: &[f64], gts: &[f64]) -> Result<TailReport> {
    if gts.len() < 10 {
        return Err(Error::InvalidValue(format!(
            "tail report needs >= 10 pairs, got {}",
            gts.len()
        )));
    }
    tail_report_with(preds, gts, 10.0, quantile(gts, 0.1), quantile(gts, 0.9))
}

/// As [`tail_report`] with explicit bin width and tail thresholds (for
/// example percentiles of a pooled reference distribution).
pub fn tail_report_with(preds: &[f64], gts: &[f64], width: f64, p10: f64, p90: f64) -> Result<TailReport> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::Shape(
            "predictions and labels must be nonempty and paired".into(),
        ));
    }
    if !(width > 0.0) {
        return Err(Error::InvalidValue(format!("bin width {width}")));
    }
    let min = gts.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = gts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = (min / width).floor() * width;
    let mut edges = vec![start];
    while *edges.last().unwrap() <= max {
        let next = edges.last().unwrap() + width;
        edges.push(next);
    }
    let bins = edges
        .windows(2)
        .map(|e| interval(preds, gts, e[0], e[1], |g| g >= e[0] && g < e[1]))
        .collect();
    let lower_tail = interval(preds, gts, min, p10, |g| g < p10);
    let upper_tail = interval(preds, gts, p90, max, |g| g > p90);
    let tails = interval(preds, gts, min, max, |g| g < p10 || g > p90);
    Ok(TailReport {
        edges,
        bins,
        p10,
        p90,
        lower_tail,
        upper_tail,
        tail_mae: tails.mae,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SDistribution {
    pub bins: Vec<HistogramBin>,
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

impl SDistribution {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lo,hi,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
        }
        out
    }
}

pub const S_HISTOGRAM_BINS: usize = 40;

/// Fixed-bin histogram of scores over `[-1, 1]`; the last bin is closed.
pub fn s_distribution(values: &[f64]) -> Result<SDistribution> {
    s_distribution_with(values, S_HISTOGRAM_BINS)
}

pub fn s_distribution_with(values: &[f64], n_bins: usize) -> Result<SDistribution> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if n_bins == 0 {
        return Err(Error::InvalidValue("histogram needs at least one bin".into()));
    }
    let width = 2.0 / n_bins as f64;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            lo: -1.0 + i as f64 * width,
            hi: if i + 1 == n_bins {
                1.0
            } else {
                -1.0 + (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for v in values {
        let i = (((v.clamp(-1.0, 1.0) + 1.0) / width).floor() as usize).min(n_bins - 1);
        bins[i].count += 1;
    }
    Ok(SDistribution {
        bins,
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile(values, 0.5),
        n: values.len(),
    })
}

/// Consistency of each ground-truth waveform with its own augmented copy,
/// the label-side reference for the model scores.
pub fn gt_consistency_scores<R: Rng + ?Sized>(
    samples: &[SyntheticSample],
    policy: &AugmentPolicy,
    window: Option<usize>,
    center: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let g = &s.gt_signal;
            let map = SpatioTemporalMap::new(g.len(), 1, 1, g.fs(), g.samples().to_vec())?;
            let shifted = augment(&map, policy, rng)?;
            let g_a = Waveform::new(shifted.values().to_vec(), g.fs())?;
            let l = window.unwrap_or_else(|| default_window(g.fs()));
            waveform_consistency(g, &g_a, l, center)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub id: u32,
    pub result: EvalResult,
}

/// Evaluation attached to a round record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundEval {
    pub client_val: Vec<ClientEval>,
    pub target: Option<EvalResult>,
}

impl RoundEval {
    pub fn mean_val_mae(&self) -> Option<f64> {
        (!self.client_val.is_empty())
            .then(|| self.client_val.iter().map(|c| c.result.mae).sum::<f64>() / self.client_val.len() as f64)
    }
}

/// Evaluates on client validation splits and the held-out target.
pub struct BenchmarkEvaluator<'a> {
    pub client_val: Vec<(u32, &'a [SyntheticSample])>,
    pub target: &'a [SyntheticSample],
    pub band: FrequencyBand,
}

impl Evaluator for BenchmarkEvaluator<'_> {
    fn evaluate(&self, model: &ModelParams, include_target: bool) -> Result<RoundEval> {
        let client_val = self
            .client_val
            .iter()
            .map(|(id, data)| {
                Ok(ClientEval {
                    id: *id,
                    result: evaluate(model, data, &self.band)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let target = if include_target && !self.target.is_empty() {
            Some(evaluate(model, self.target, &self.band)?)
        } else {
            None
        };
        Ok(RoundEval { client_val, target })
    }
}
