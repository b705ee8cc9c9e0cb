//! Reference architecture: per-cell spatial pooling followed by a bank of
//! circular FIR filters whose outputs are summed into the predicted signal.
//!
//! Parameter layout in `theta`: the `rows * channels` pooling weights
//! (row-major over `(row, channel)`), then each filter's `taps` coefficients.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::spectrum::FrequencyBand;
use crate::error::{Error, Result};
use crate::signal::{SpatioTemporalMap, Waveform};
use crate::vmf::UnitVector;

/// Shape of the reference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    /// Input and output length `T`.
    pub time: usize,
    pub rows: usize,
    pub channels: usize,
    pub n_filters: usize,
    /// Filter length; odd so the filter has a centre tap.
    pub taps: usize,
}

impl ModelArch {
    /// Eight filters of 31 taps, giving a 16-dimensional feature.
    pub fn reference(time: usize, rows: usize, channels: usize) -> Self {
        Self {
            time,
            rows,
            channels,
            n_filters: 8,
            taps: 31,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.time < 2 || self.rows == 0 || self.channels == 0 || self.n_filters == 0 {
            return Err(Error::Shape(format!("degenerate architecture {self:?}")));
        }
        if self.taps % 2 == 0 || self.taps > self.time {
            return Err(Error::Shape(format!(
                "taps must be odd and at most T (taps = {}, T = {})",
                self.taps, self.time
            )));
        }
        Ok(())
    }

    pub fn n_pool(&self) -> usize {
        self.rows * self.channels
    }

    pub fn n_params(&self) -> usize {
        self.n_pool() + self.n_filters * self.taps
    }

    /// Feature dimension `d`: output and first-difference RMS per filter.
    pub fn feature_dim(&self) -> usize {
        2 * self.n_filters
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.time, self.rows, self.channels]
    }

    fn centre(&self) -> usize {
        self.taps / 2
    }
}

/// Model parameters as a flat vector tied to an architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ModelArch,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ModelArch, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.n_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                arch.n_params(),
                theta.len()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("theta[{i}] = {}", theta[i])));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: ModelArch) -> Result<Self> {
        Self::new(arch, vec![0.0; arch.n_params()])
    }

    /// Mean of channel 0 over rows, passed through filter 0 as a unit impulse.
    pub fn identity(arch: ModelArch) -> Result<Self> {
        let mut theta = vec![0.0; arch.n_params()];
        for s in 0..arch.rows {
            theta[s * arch.channels] = 1.0 / arch.rows as f64;
        }
        theta[arch.n_pool() + arch.centre()] = 1.0;
        Self::new(arch, theta)
    }

    /// Uniform pooling with Hann-tapered cosine filters whose centre
    /// frequencies are spread evenly across `band`.
    pub fn filter_bank(arch: ModelArch, fs: f64, band: &FrequencyBand) -> Result<Self> {
        arch.validate()?;
        band.validate_for(fs)?;
        let mut theta = vec![1.0 / arch.n_pool() as f64; arch.n_pool()];
        let c0 = arch.centre() as f64;
        let f_count = arch.n_filters;
        for f in 0..f_count {
            let frac = if f_count == 1 {
                0.5
            } else {
                f as f64 / (f_count - 1) as f64
            };
            let freq = band.f_lo + frac * (band.f_hi - band.f_lo);
            let mut h: Vec<f64> = (0..arch.taps)
                .map(|k| {
                    let u = k as f64 - c0;
                    let taper = 0.5 + 0.5 * (PI * u / (c0 + 1.0)).cos();
                    taper * (2.0 * PI * freq * u / fs).cos()
                })
                .collect();
            let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            h.iter_mut().for_each(|v| *v /= norm * f_count as f64);
            theta.extend(h);
        }
        Self::new(arch, theta)
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn pool_weights(&self) -> &[f64] {
        &self.theta[..self.arch.n_pool()]
    }

    pub fn filter(&self, f: usize) -> &[f64] {
        let start = self.arch.n_pool() + f * self.arch.taps;
        &self.theta[start..start + self.arch.taps]
    }

    /// Sum of all filters; the predicted signal is this filter applied to
    /// the pooled trace.
    pub fn effective_filter(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.arch.taps];
        for f in 0..self.arch.n_filters {
            for (a, b) in h.iter_mut().zip(self.filter(f)) {
                *a += b;
            }
        }
        h
    }

    /// Rescales pooling to unit L1 norm and the filter bank so the effective
    /// filter has unit L2 norm. Outputs change only by a positive factor.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        let n_pool = self.arch.n_pool();
        let l1: f64 = self.pool_weights().iter().map(|v| v.abs()).sum();
        if l1 > 0.0 {
            out.theta[..n_pool].iter_mut().for_each(|v| *v /= l1);
        }
        let l2 = self.effective_filter().iter().map(|v| v * v).sum::<f64>().sqrt();
        if l2 > 0.0 {
            out.theta[n_pool..].iter_mut().for_each(|v| *v /= l2);
        }
        out
    }

    /// `theta - step * direction`, same architecture.
    pub fn stepped(&self, direction: &[f64], step: f64) -> Result<Self> {
        if direction.len() != self.theta.len() {
            return Err(Error::Shape(format!(
                "gradient length {} vs {} parameters",
                direction.len(),
                self.theta.len()
            )));
        }
        let theta = self.theta.iter().zip(direction).map(|(t, g)| t - step * g).collect();
        Self::new(self.arch, theta)
    }
}

/// Model output for one input map.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedOutput {
    pub signal: Waveform,
    pub feature: UnitVector,
}

fn check_input(arch: &ModelArch, x: &SpatioTemporalMap) -> Result<()> {
    if x.shape() != arch.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match model {:?}",
            x.shape(),
            arch.input_shape()
        )));
    }
    Ok(())
}

/// Pooled trace `p[t] = sum_{s,c} W[s,c] x[t,s,c]`.
pub(crate) fn pool(params: &ModelParams, x: &SpatioTemporalMap) -> Vec<f64> {
    let w = params.pool_weights();
    let cells = w.len();
    x.values()
        .chunks_exact(cells)
        .map(|frame| frame.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

/// Circular filtering `y[t] = sum_k h[k] p[(t + k - c0) mod T]`.
pub(crate) fn filter_circular(h: &[f64], p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let c0 = h.len() / 2;
    let mut y = vec![0.0; n];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        let off = (k + n - c0) % n;
        for (t, yt) in y.iter_mut().enumerate() {
            *yt += hk * p[(t + off) % n];
        }
    }
    y
}

/// Shared forward state kept for the backward pass.
pub(crate) struct ForwardCache {
    pub pooled: Vec<f64>,
    pub signal: Vec<f64>,
}

pub(crate) fn forward_cached(params: &ModelParams, x: &SpatioTemporalMap) -> Result<ForwardCache> {
    check_input(&params.arch, x)?;
    let pooled = pool(params, x);
    let signal = filter_circular(&params.effective_filter(), &pooled);
    Ok(ForwardCache { pooled, signal })
}

/// Predicted signal only, skipping the feature computation.
pub fn forward_signal(params: &ModelParams, x: &SpatioTemporalMap) -> Result<Waveform> {
    let cache = forward_cached(params, x)?;
    Waveform::new(cache.signal, x.fs())
}

/// Predicted signal and unit feature vector for one input map.
pub fn forward(params: &ModelParams, x: &SpatioTemporalMap) -> Result<PredictedOutput> {
    let cache = forward_cached(params, x)?;
    let arch = &params.arch;
    let n = arch.time as f64;
    let mut feat = vec![0.0; arch.feature_dim()];
    for f in 0..arch.n_filters {
        let y = filter_circular(params.filter(f), &cache.pooled);
        let energy: f64 = y.iter().map(|v| v * v).sum::<f64>() / n;
        let diff: f64 = (0..y.len())
            .map(|t| {
                let d = y[t] - y[(t + y.len() - 1) % y.len()];
                d * d
            })
            .sum::<f64>()
            / n;
        feat[f] = energy.sqrt();
        feat[arch.n_filters + f] = diff.sqrt();
    }
    let feature = match UnitVector::normalize(feat) {
        Ok(u) => u,
        Err(_) => {
            log::debug!("zero-energy input; feature falls back to the first basis vector");
            UnitVector::basis(arch.feature_dim(), 0)
        }
    };
    Ok(PredictedOutput {
        signal: Waveform::new(cache.signal, x.fs())?,
        feature,
    })
}

/// Adds `d loss / d theta` to `grad`, given `d loss / d signal` for one input.
pub(crate) fn backward(
    params: &ModelParams,
    x: &SpatioTemporalMap,
    pooled: &[f64],
    d_signal: &[f64],
    grad: &mut [f64],
) {
    let arch = &params.arch;
    let n = arch.time;
    let c0 = arch.centre();
    let h = params.effective_filter();

    // every filter feeds the output identically
    let mut d_h = vec![0.0; arch.taps];
    for (k, dh) in d_h.iter_mut().enumerate() {
        let off = (k + n - c0) % n;
        *dh = d_signal
            .iter()
            .enumerate()
            .map(|(t, g)| g * pooled[(t + off) % n])
            .sum();
    }
    let n_pool = arch.n_pool();
    for f in 0..arch.n_filters {
        let start = n_pool + f * arch.taps;
        for (a, b) in grad[start..start + arch.taps].iter_mut().zip(&d_h) {
            *a += b;
        }
    }

    // d p[u] = sum_k h[k] g[(u - k + c0) mod T]
    let mut d_pooled = vec![0.0; n];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 {
            continue;
        }
        let off = (k + n - c0) % n;
        for (t, g) in d_signal.iter().enumerate() {
            d_pooled[(t + off) % n] += hk * g;
        }
    }
    for (frame, dp) in x.values().chunks_exact(n_pool).zip(&d_pooled) {
        for (gw, v) in grad[..n_pool].iter_mut().zip(frame) {
            *gw += dp * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ModelArch {
        ModelArch {
            time: 64,
            rows: 3,
            channels: 2,
            n_filters: 3,
            taps: 7,
        }
    }

    fn random_map(arch: &ModelArch, rng: &mut ChaCha8Rng) -> SpatioTemporalMap {
        let n = arch.time * arch.rows * arch.channels;
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        SpatioTemporalMap::new(arch.time, arch.rows, arch.channels, 30.0, values).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_signal_and_basis_feature() {
        let arch = ModelArch::reference(128, 4, 3);
        let p = ModelParams::filter_bank(arch, 30.0, &FrequencyBand::default()).unwrap();
        let x = SpatioTemporalMap::zeros(128, 4, 3, 30.0).unwrap();
        let out = forward(&p, &x).unwrap();
        assert!(out.signal.samples().iter().all(|v| *v == 0.0));
        assert_eq!(out.feature, UnitVector::basis(16, 0));
    }

    #[test]
    fn identity_init_outputs_row_mean_of_channel_zero() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&arch, &mut rng);
        let p = ModelParams::identity(arch).unwrap();
        let out = forward(&p, &x).unwrap();
        for t in 0..arch.time {
            let mean = (0..arch.rows).map(|s| x.get(t, s, 0)).sum::<f64>() / arch.rows as f64;
            assert!((out.signal.samples()[t] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn scaling_input_scales_signal_keeps_feature() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(&arch, &mut rng);
        let p = ModelParams::filter_bank(arch, 30.0, &FrequencyBand::default()).unwrap();
        let a = forward(&p, &x).unwrap();
        let b = forward(&p, &x.scaled(3.5)).unwrap();
        for (u, v) in a.signal.samples().iter().zip(b.signal.samples()) {
            assert!((3.5 * u - v).abs() < 1e-12);
        }
        for (u, v) in a.feature.as_slice().iter().zip(b.feature.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_filter_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = filter_circular(&h, &p);
        for t in 0..20 {
            let direct: f64 = (0..5)
                .map(|k| h[k] * p[(t as isize + k as isize - 2).rem_euclid(20) as usize])
                .sum();
            assert!((y[t] - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn summed_output_equals_sum_of_filter_outputs() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_map(&arch, &mut rng);
        let theta = (0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = ModelParams::new(arch, theta).unwrap();
        let pooled = pool(&p, &x);
        let out = forward_signal(&p, &x).unwrap();
        let mut sum = vec![0.0; arch.time];
        for f in 0..arch.n_filters {
            for (a, b) in sum.iter_mut().zip(filter_circular(p.filter(f), &pooled)) {
                *a += b;
            }
        }
        for (a, b) in sum.iter().zip(out.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_dot_product_finite_differences() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_map(&arch, &mut rng);
        let theta: Vec<f64> = (0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..arch.time).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = ModelParams::new(arch, theta.clone()).unwrap();
        let f = |th: &[f64]| -> f64 {
            let q = ModelParams::new(arch, th.to_vec()).unwrap();
            forward_signal(&q, &x)
                .unwrap()
                .samples()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum()
        };
        let cache = forward_cached(&p, &x).unwrap();
        let mut grad = vec![0.0; arch.n_params()];
        backward(&p, &x, &cache.pooled, &g, &mut grad);
        for i in 0..theta.len() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()), "i={i}");
        }
    }

    #[test]
    fn normalized_changes_signal_by_positive_factor() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_map(&arch, &mut rng);
        let p = ModelParams::filter_bank(arch, 30.0, &FrequencyBand::default()).unwrap();
        let mut q = p.clone();
        q.theta.iter_mut().for_each(|v| *v *= 7.0);
        let a = forward(&p, &x).unwrap();
        let b = forward(&q.normalized(), &x).unwrap();
        let ratio = b.signal.samples()[3] / a.signal.samples()[3];
        assert!(ratio > 0.0);
        for (u, v) in a.signal.samples().iter().zip(b.signal.samples()) {
            assert!((ratio * u - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
        for (u, v) in a.feature.as_slice().iter().zip(b.feature.as_slice()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_and_bad_theta() {
        let arch = small_arch();
        let p = ModelParams::identity(arch).unwrap();
        let x = SpatioTemporalMap::zeros(64, 2, 2, 30.0).unwrap();
        assert!(matches!(forward(&p, &x), Err(Error::Shape(_))));
        assert!(ModelParams::new(arch, vec![0.0; 3]).is_err());
        let mut th = vec![0.0; arch.n_params()];
        th[0] = f64::NAN;
        assert!(ModelParams::new(arch, th).is_err());
        let bad = ModelArch { taps: 8, ..arch };
        assert!(bad.validate().is_err());
    }
}
