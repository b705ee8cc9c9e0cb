//! Physiological waveforms, spatio-temporal maps, self-similarity matrices
//! and the augmentation used to probe spatio-temporal consistency.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Entries of an SSM may exceed [-1, 1] by this much through rounding.
pub const SSM_EPS: f64 = 1e-9;

/// A sampled signal with its sampling rate in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    fs: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "waveform needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::InvalidValue(format!("sampling rate {fs}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite sample".into()));
        }
        Ok(Self { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Multiply every sample by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * c).collect(),
            fs: self.fs,
        }
    }

    /// Circular shift by `k` samples (positive delays the signal).
    pub fn circular_shift(&self, k: isize) -> Self {
        let n = self.samples.len() as isize;
        let samples = (0..n).map(|t| self.samples[(t - k).rem_euclid(n) as usize]).collect();
        Self { samples, fs: self.fs }
    }
}

/// Multi-channel model input with shape (time, rows, channels), stored
/// time-major: `values[(t * rows + s) * channels + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatioTemporalMap {
    shape: [usize; 3],
    fs: f64,
    values: Vec<f64>,
}

impl SpatioTemporalMap {
    pub fn new(time: usize, rows: usize, channels: usize, fs: f64, values: Vec<f64>) -> Result<Self> {
        if time == 0 || rows == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty map {time}x{rows}x{channels}")));
        }
        if values.len() != time * rows * channels {
            return Err(Error::Shape(format!(
                "{} values for shape {time}x{rows}x{channels}",
                values.len()
            )));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::InvalidValue(format!("sampling rate {fs}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite map value".into()));
        }
        Ok(Self {
            shape: [time, rows, channels],
            fs,
            values,
        })
    }

    pub fn zeros(time: usize, rows: usize, channels: usize, fs: f64) -> Result<Self> {
        Self::new(time, rows, channels, fs, vec![0.0; time * rows * channels])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn time(&self) -> usize {
        self.shape[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.shape[2]
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, t: usize, s: usize, c: usize) -> usize {
        (t * self.shape[1] + s) * self.shape[2] + c
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, c: usize) -> f64 {
        self.values[self.index(t, s, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, s: usize, c: usize, v: f64) {
        let i = self.index(t, s, c);
        self.values[i] = v;
    }

    /// The temporal trace of one (row, channel) cell.
    pub fn trace(&self, s: usize, c: usize) -> Vec<f64> {
        (0..self.time()).map(|t| self.get(t, s, c)).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            shape: self.shape,
            fs: self.fs,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Cosine similarities between all pairs of stride-1 windows of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSimilarityMatrix {
    order: usize,
    window: usize,
    entries: Vec<f64>,
}

impl SelfSimilarityMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn window(&self) -> usize {
        self.window
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Window length used when none is configured: 1.5 s of samples.
pub fn default_window(fs: f64) -> usize {
    ((1.5 * fs).round() as usize).max(1)
}

/// All stride-1 windows of length `l`, in temporal order.
pub fn extract_segments(w: &Waveform, l: usize) -> Result<Vec<&[f64]>> {
    if l == 0 || l > w.len() {
        return Err(Error::InvalidWindow {
            window: l,
            len: w.len(),
        });
    }
    Ok(w.samples.windows(l).collect())
}

/// Segments whose squared norm falls below this fraction of the largest one
/// are treated as silent.
const ZERO_NORM_REL: f64 = 1e-24;

/// Re-anchor the sliding dot-product recurrence this often to bound drift.
const REANCHOR: usize = 32;

/// Self-similarity matrix of `w` with window `l` (plain cosine between segments).
pub fn compute_ssm(w: &Waveform, l: usize) -> Result<SelfSimilarityMatrix> {
    compute_ssm_with(w, l, false)
}

/// As [`compute_ssm`], optionally mean-centering each segment first.
pub fn compute_ssm_with(w: &Waveform, l: usize, center: bool) -> Result<SelfSimilarityMatrix> {
    if l == 0 || l > w.len() {
        return Err(Error::InvalidWindow {
            window: l,
            len: w.len(),
        });
    }
    let x = w.samples();
    let n = x.len() - l + 1;
    let lf = l as f64;

    let means: Vec<f64> = if center {
        x.windows(l).map(|u| u.iter().sum::<f64>() / lf).collect()
    } else {
        vec![0.0; n]
    };

    let direct = |i: usize, j: usize| -> f64 { x[i..i + l].iter().zip(&x[j..j + l]).map(|(a, b)| a * b).sum() };

    let mut norm2 = vec![0.0; n];
    for i in 0..n {
        let raw = direct(i, i);
        norm2[i] = if center {
            (raw - lf * means[i] * means[i]).max(0.0)
        } else {
            raw
        };
    }
    let max_norm2 = norm2.iter().cloned().fold(0.0, f64::max);
    if max_norm2 <= 0.0 || !max_norm2.is_finite() {
        return Err(Error::DegenerateSignal("all segments have zero norm".into()));
    }
    let live: Vec<bool> = norm2.iter().map(|&v| v > ZERO_NORM_REL * max_norm2).collect();
    let inv_norm: Vec<f64> = norm2
        .iter()
        .zip(&live)
        .map(|(&v, &ok)| if ok { 1.0 / v.sqrt() } else { 0.0 })
        .collect();

    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        if live[i] {
            entries[i * n + i] = 1.0;
        }
    }
    for lag in 1..n {
        let mut dot = 0.0;
        for i in 0..n - lag {
            let j = i + lag;
            if i % REANCHOR == 0 {
                dot = direct(i, j);
            } else {
                dot += x[i + l - 1] * x[j + l - 1] - x[i - 1] * x[j - 1];
            }
            let v = if live[i] && live[j] {
                let d = if center { dot - lf * means[i] * means[j] } else { dot };
                (d * inv_norm[i] * inv_norm[j]).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            entries[i * n + j] = v;
            entries[j * n + i] = v;
        }
    }
    Ok(SelfSimilarityMatrix {
        order: n,
        window: l,
        entries,
    })
}

/// Frobenius cosine between two SSMs of the same order (one sample's consistency score).
pub fn ssm_similarity(m: &SelfSimilarityMatrix, m_a: &SelfSimilarityMatrix) -> Result<f64> {
    if m.order != m_a.order {
        return Err(Error::Shape(format!("SSM orders differ: {} vs {}", m.order, m_a.order)));
    }
    let (mut dot, mut nm, mut na) = (0.0, 0.0, 0.0);
    for (a, b) in m.entries.iter().zip(&m_a.entries) {
        dot += a * b;
        nm += a * a;
        na += b * b;
    }
    if nm <= 0.0 || na <= 0.0 {
        return Err(Error::DegenerateSignal("zero-norm SSM".into()));
    }
    Ok((dot / (nm.sqrt() * na.sqrt())).clamp(-1.0, 1.0))
}

/// SSM similarity of two waveforms in one call.
pub fn waveform_consistency(w: &Waveform, w_a: &Waveform, l: usize, center: bool) -> Result<f64> {
    let m = compute_ssm_with(w, l, center)?;
    let m_a = compute_ssm_with(w_a, l, center)?;
    ssm_similarity(&m, &m_a)
}

/// Spatio-temporal augmentation policy: a random circular temporal shift of
/// at most `max_shift_s` seconds, an optional random permutation of the
/// spatial rows and optional additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub max_shift_s: f64,
    pub permute_rows: bool,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            max_shift_s: 1.0,
            permute_rows: true,
            noise_sigma: 0.0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            max_shift_s: 0.0,
            permute_rows: false,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_shift_s.is_finite() && self.max_shift_s >= 0.0) {
            return Err(Error::InvalidValue(format!("max_shift_s {}", self.max_shift_s)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidValue(format!("noise_sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// The concrete transformation drawn by [`augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    /// Output time `t` reads input time `t - shift` (circularly).
    pub shift: isize,
    /// Output row `s` reads input row `row_map[s]`.
    pub row_map: Vec<usize>,
}

/// Apply `policy` to `x`. Draw order from `rng`: shift, row permutation, noise.
pub fn augment<R: Rng + ?Sized>(
    x: &SpatioTemporalMap,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<SpatioTemporalMap> {
    augment_with_draw(x, policy, rng).map(|(m, _)| m)
}

pub fn augment_with_draw<R: Rng + ?Sized>(
    x: &SpatioTemporalMap,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(SpatioTemporalMap, AugmentDraw)> {
    policy.validate()?;
    let [time, rows, channels] = x.shape;
    let max_shift = (policy.max_shift_s * x.fs).round() as isize;
    let shift = if max_shift > 0 {
        rng.random_range(-(max_shift as i64)..=max_shift as i64) as isize
    } else {
        0
    };
    let mut row_map: Vec<usize> = (0..rows).collect();
    if policy.permute_rows {
        row_map.shuffle(rng);
    }
    let mut values = vec![0.0; x.values.len()];
    let tt = time as isize;
    for t in 0..time {
        let src_t = (t as isize - shift).rem_euclid(tt) as usize;
        for (s, &src_s) in row_map.iter().enumerate() {
            let dst = (t * rows + s) * channels;
            let src = (src_t * rows + src_s) * channels;
            values[dst..dst + channels].copy_from_slice(&x.values[src..src + channels]);
        }
    }
    if policy.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, policy.noise_sigma).map_err(|e| Error::InvalidValue(e.to_string()))?;
        for v in values.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let out = SpatioTemporalMap {
        shape: x.shape,
        fs: x.fs,
        values,
    };
    Ok((out, AugmentDraw { shift, row_map }))
}
