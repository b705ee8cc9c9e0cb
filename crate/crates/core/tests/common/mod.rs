//! Reference computations that share no code with the library.

#![allow(dead_code)]

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

/// Composite Simpson rule of `log_f` exponentiated, returned in log space.
fn log_simpson(log_f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let logs: Vec<f64> = (0..=n).map(|i| log_f(a + i as f64 * h)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * (l - max).exp();
    }
    max + (sum * h / 3.0).ln()
}

const NODES: usize = 40_000;

/// `log ∫_0^π exp(κ(cos θ - 1)) sin^{d-2} θ · g(θ) dθ` for positive `g`.
fn log_polar_integral(kappa: f64, d: usize, log_g: impl Fn(f64) -> f64) -> f64 {
    let p = (d - 2) as f64;
    log_simpson(
        |t| {
            let s = t.sin();
            let base = kappa * (t.cos() - 1.0);
            if p == 0.0 {
                base + log_g(t)
            } else if s <= 0.0 {
                f64::NEG_INFINITY
            } else {
                base + p * s.ln() + log_g(t)
            }
        },
        0.0,
        PI,
        NODES,
    )
}

/// Mean resultant length `E[μᵀx]` of vMF(κ) on S^{d-1}, by quadrature over
/// the polar angle.
pub fn mean_resultant(kappa: f64, d: usize) -> f64 {
    // E[cos] = E[cos + 1] - 1 keeps the integrand positive
    let num = log_polar_integral(kappa, d, |t| (1.0 + t.cos()).ln());
    let den = log_polar_integral(kappa, d, |_| 0.0);
    (num - den).exp() - 1.0
}

/// `log C_d(κ)`: minus the log of `∫_{S^{d-1}} exp(κ μᵀx) dx`.
pub fn log_normalizer(kappa: f64, d: usize) -> f64 {
    let half = (d - 1) as f64 / 2.0;
    let log_area = (2.0f64).ln() + half * PI.ln() - ln_gamma(half);
    -(log_area + kappa + log_polar_integral(kappa, d, |_| 0.0))
}

/// κ with `mean_resultant(κ, d) = r`, by bisection.
pub fn invert_mean_resultant(r: f64, d: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    while mean_resultant(hi, d) < r {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mean_resultant(mid, d) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Monte-Carlo KL between vMF(μ_p, κ_p) and vMF(μ_q, κ_q) from samples
/// `t_i = μ_pᵀx_i` of the first distribution.
///
/// Only `E_p[t]` is estimated; the orthogonal part of `x` averages out
/// exactly, and the Stein identity `E[κ(1 - t²) - (d-1)t] = 0` gives a
/// control variate. Normalizers come from quadrature.
pub struct McKl {
    pub value: f64,
    pub std_err: f64,
}

pub fn mc_kl(t: &[f64], kappa_p: f64, kappa_q: f64, cos_angle: f64, d: usize) -> McKl {
    let n = t.len() as f64;
    let h: Vec<f64> = t
        .iter()
        .map(|&t| kappa_p * (1.0 - t * t) - (d as f64 - 1.0) * t)
        .collect();
    let mt = t.iter().sum::<f64>() / n;
    let mh = h.iter().sum::<f64>() / n;
    let cov: f64 = t.iter().zip(&h).map(|(a, b)| (a - mt) * (b - mh)).sum::<f64>() / n;
    let var_h: f64 = h.iter().map(|b| (b - mh).powi(2)).sum::<f64>() / n;
    let beta = if var_h > 0.0 { cov / var_h } else { 0.0 };
    let adj: Vec<f64> = t.iter().zip(&h).map(|(a, b)| a - beta * b).collect();
    let mean = adj.iter().sum::<f64>() / n;
    let var = adj.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let coef = kappa_p - kappa_q * cos_angle;
    McKl {
        value: log_normalizer(kappa_p, d) - log_normalizer(kappa_q, d) + coef * mean,
        std_err: coef.abs() * (var / n).sqrt(),
    }
}

/// Central finite-difference gradient.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + step;
            let fp = f(&xp);
            xp[i] = orig - step;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}
