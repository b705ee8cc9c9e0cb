//! Hann-windowed, zero-padded periodograms and heart-rate estimation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Zero-padding factor applied before the DFT.
pub const PAD_FACTOR: usize = 4;

/// Spectra with total power below this are rejected.
pub const MIN_POWER: f64 = 1e-12;

/// Pulse band in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyBand {
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Default for FrequencyBand {
    /// 0.66–3.0 Hz, roughly 40–180 bpm.
    fn default() -> Self {
        Self { f_lo: 0.66, f_hi: 3.0 }
    }
}

impl FrequencyBand {
    pub fn new(f_lo: f64, f_hi: f64) -> Result<Self> {
        let b = Self { f_lo, f_hi };
        if !(f_lo > 0.0 && f_lo < f_hi && f_hi.is_finite()) {
            return Err(Error::InvalidValue(format!("band [{f_lo}, {f_hi}]")));
        }
        Ok(b)
    }

    /// Checks `0 < f_lo < f_hi < fs / 2`.
    pub fn validate_for(&self, fs: f64) -> Result<()> {
        if !(self.f_lo > 0.0 && self.f_lo < self.f_hi && self.f_hi < 0.5 * fs) {
            return Err(Error::InvalidValue(format!(
                "band [{}, {}] Hz invalid for fs = {fs} Hz",
                self.f_lo, self.f_hi
            )));
        }
        Ok(())
    }

    /// Inclusive range of one-sided bins whose centre lies in the band.
    pub fn bin_range(&self, fs: f64, n_fft: usize) -> (usize, usize) {
        let df = fs / n_fft as f64;
        let lo = (self.f_lo / df).ceil() as usize;
        let hi = ((self.f_hi / df).floor() as usize).min(n_fft / 2);
        (lo, hi.max(lo))
    }
}

/// Cached FFT plans and window for one signal length.
pub(crate) struct Engine {
    pub len: usize,
    pub n_fft: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Engine {
    fn new(len: usize) -> Self {
        let n_fft = len * PAD_FACTOR;
        let mut planner = FftPlanner::new();
        let denom = (len - 1).max(1) as f64;
        let window = (0..len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
            .collect();
        Self {
            len,
            n_fft,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    /// One-sided DFT of the windowed, zero-padded signal (bins 0..=n_fft/2).
    pub fn transform(&self, samples: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(samples.len(), self.len);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (b, (s, w)) in buf.iter_mut().zip(samples.iter().zip(&self.window)) {
            b.re = s * w;
        }
        self.forward.process(&mut buf);
        buf.truncate(self.n_fft / 2 + 1);
        buf
    }

    /// Gradient of a function of the one-sided power spectrum with respect to
    /// the raw samples, given `dL/dP_k` and the transform `X_k`.
    pub fn power_backward(&self, spectrum: &[Complex64], d_power: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for (k, (x, g)) in spectrum.iter().zip(d_power).enumerate() {
            buf[k] = x * *g;
        }
        self.inverse.process(&mut buf);
        (0..self.len).map(|n| 2.0 * self.window[n] * buf[n].re).collect()
    }
}

thread_local! {
    static ENGINES: RefCell<HashMap<usize, Rc<Engine>>> = RefCell::new(HashMap::new());
}

pub(crate) fn engine(len: usize) -> Rc<Engine> {
    ENGINES.with(|cache| {
        cache
            .borrow_mut()
            .entry(len)
            .or_insert_with(|| Rc::new(Engine::new(len)))
            .clone()
    })
}

/// One-sided power spectrum with its frequency grid.
#[derive(Debug, Clone)]
pub struct Periodogram {
    pub fs: f64,
    pub n_fft: usize,
    pub power: Vec<f64>,
}

impl Periodogram {
    pub fn of(w: &Waveform) -> Self {
        let eng = engine(w.len());
        let power = eng.transform(w.samples()).iter().map(|x| x.norm_sqr()).collect();
        Self {
            fs: w.fs(),
            n_fft: eng.n_fft,
            power,
        }
    }

    pub fn bin_width(&self) -> f64 {
        self.fs / self.n_fft as f64
    }

    pub fn frequency(&self, k: usize) -> f64 {
        k as f64 * self.bin_width()
    }

    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    /// Index of the largest bin inside `band`.
    pub fn peak_bin(&self, band: &FrequencyBand) -> usize {
        let (lo, hi) = band.bin_range(self.fs, self.n_fft);
        let mut best = lo;
        for k in lo..=hi {
            if self.power[k] > self.power[best] {
                best = k;
            }
        }
        best
    }
}

/// Heart rate in bpm from the dominant in-band frequency, refined by a
/// parabola through the peak bin and its two neighbours.
pub fn estimate_hr(signal: &Waveform, band: &FrequencyBand) -> Result<f64> {
    band.validate_for(signal.fs())?;
    let pg = Periodogram::of(signal);
    let total = pg.total();
    if !(total >= MIN_POWER) {
        return Err(Error::DegenerateSpectrum(total));
    }
    let k = pg.peak_bin(band);
    let mut offset = 0.0;
    if k > 0 && k + 1 < pg.power.len() {
        let (a, b, c) = (pg.power[k - 1], pg.power[k], pg.power[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            offset = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
        }
    }
    Ok(60.0 * (k as f64 + offset) * pg.bin_width())
}
