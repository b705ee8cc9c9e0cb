//! Frequency-domain self-supervision: bandwidth, sparsity and variation
//! losses over a batch of predicted signals, with their exact gradients.

use serde::{Deserialize, Serialize};

use super::model::PredictedOutput;
use super::spectrum::{engine, FrequencyBand, MIN_POWER};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Half-width in Hz of the window around the in-band peak that counts as
/// signal for the sparsity loss.
pub const SPARSITY_HALF_WIDTH_HZ: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bandwidth: f64,
    pub sparsity: f64,
    pub variation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            sparsity: 1.0,
            variation: 1.0,
        }
    }
}

/// Loss components; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bandwidth: f64,
    pub sparsity: f64,
    pub variation: f64,
    pub total: f64,
}

/// Losses of a batch of model outputs with unit weights.
pub fn unsup_loss(batch: &[PredictedOutput], band: &FrequencyBand) -> Result<LossBreakdown> {
    let signals: Vec<&Waveform> = batch.iter().map(|o| &o.signal).collect();
    unsup_loss_with(&signals, band, &LossWeights::default())
}

/// Losses of a batch of signals with explicit component weights.
pub fn unsup_loss_with(signals: &[&Waveform], band: &FrequencyBand, weights: &LossWeights) -> Result<LossBreakdown> {
    let fs = check_batch(signals)?;
    let raw: Vec<&[f64]> = signals.iter().map(|w| w.samples()).collect();
    Ok(evaluate(&raw, fs, band, weights, false)?.0)
}

fn check_batch(signals: &[&Waveform]) -> Result<f64> {
    let first = signals.first().ok_or(Error::EmptyBatch)?;
    for w in signals {
        if w.len() != first.len() || w.fs() != first.fs() {
            return Err(Error::Shape("batch signals differ in length or fs".into()));
        }
    }
    Ok(first.fs())
}

/// Losses and, if `with_grad`, `d total / d signal` for every signal.
pub(crate) fn evaluate(
    signals: &[&[f64]],
    fs: f64,
    band: &FrequencyBand,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if signals.is_empty() {
        return Err(Error::EmptyBatch);
    }
    band.validate_for(fs)?;
    let len = signals[0].len();
    let eng = engine(len);
    let (lo, hi) = band.bin_range(fs, eng.n_fft);
    let m = hi - lo + 1;
    let half = (SPARSITY_HALF_WIDTH_HZ * eng.n_fft as f64 / fs).round() as usize;
    let bsz = signals.len() as f64;

    struct Sample {
        spectrum: Vec<rustfft::num_complex::Complex64>,
        power: Vec<f64>,
        total: f64,
        inband: f64,
        peak: usize,
        bandwidth: f64,
        sparsity: f64,
    }

    let mut samples = Vec::with_capacity(signals.len());
    for s in signals {
        if s.len() != len {
            return Err(Error::Shape("batch signals differ in length".into()));
        }
        let spectrum = eng.transform(s);
        let power: Vec<f64> = spectrum.iter().map(|x| x.norm_sqr()).collect();
        let total: f64 = power.iter().sum();
        if !(total >= MIN_POWER) {
            return Err(Error::DegenerateSpectrum(total));
        }
        let inband: f64 = power[lo..=hi].iter().sum();
        if !(inband > 0.0) {
            return Err(Error::DegenerateSpectrum(inband));
        }
        let mut peak = lo;
        for k in lo..=hi {
            if power[k] > power[peak] {
                peak = k;
            }
        }
        let near: f64 = power[peak.saturating_sub(half).max(lo)..=(peak + half).min(hi)]
            .iter()
            .sum();
        samples.push(Sample {
            bandwidth: (total - inband) / total,
            sparsity: (inband - near) / inband,
            spectrum,
            power,
            total,
            inband,
            peak,
        });
    }

    let bandwidth = samples.iter().map(|s| s.bandwidth).sum::<f64>() / bsz;
    let sparsity = samples.iter().map(|s| s.sparsity).sum::<f64>() / bsz;

    // batch-mean normalized in-band spectrum against the uniform prior,
    // compared through mean squared CDF difference
    let mut q_mean = vec![0.0; m];
    for s in &samples {
        for (j, q) in q_mean.iter_mut().enumerate() {
            *q += s.power[lo + j] / s.inband / bsz;
        }
    }
    let mut cdf_gap = vec![0.0; m];
    let mut acc = 0.0;
    for j in 0..m {
        acc += q_mean[j];
        cdf_gap[j] = acc - (j + 1) as f64 / m as f64;
    }
    let variation = cdf_gap.iter().map(|g| g * g).sum::<f64>() / m as f64;

    let loss = LossBreakdown {
        bandwidth,
        sparsity,
        variation,
        total: weights.bandwidth * bandwidth + weights.sparsity * sparsity + weights.variation * variation,
    };
    if !with_grad {
        return Ok((loss, Vec::new()));
    }

    // d variation / d q_mean[j] = (2/m) sum_{i >= j} cdf_gap[i]
    let mut d_q = vec![0.0; m];
    let mut suffix = 0.0;
    for j in (0..m).rev() {
        suffix += cdf_gap[j];
        d_q[j] = 2.0 * suffix / m as f64;
    }

    let grads = samples
        .iter()
        .map(|s| {
            let mut d_power = vec![0.0; s.power.len()];
            let wb = weights.bandwidth / (bsz * s.total);
            for (k, d) in d_power.iter_mut().enumerate() {
                let outside = if k < lo || k > hi { 1.0 } else { 0.0 };
                *d = wb * (outside - s.bandwidth);
            }
            let near_lo = s.peak.saturating_sub(half).max(lo);
            let near_hi = (s.peak + half).min(hi);
            let ws = weights.sparsity / (bsz * s.inband);
            let q_dot: f64 = (0..m).map(|j| d_q[j] * s.power[lo + j] / s.inband).sum();
            let wv = weights.variation / (bsz * s.inband);
            for k in lo..=hi {
                let off_peak = if k < near_lo || k > near_hi { 1.0 } else { 0.0 };
                d_power[k] += ws * (off_peak - s.sparsity) + wv * (d_q[k - lo] - q_dot);
            }
            eng.power_backward(&s.spectrum, &d_power)
        })
        .collect();
    Ok((loss, grads))
}
