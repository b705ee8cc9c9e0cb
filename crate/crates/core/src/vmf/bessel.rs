//! Modified Bessel functions of the first kind, evaluated in log space.
//!
//! Three regimes cover `log I_nu(x)`:
//! - `x <= SERIES_MAX_X`: the ascending power series, summed relative to its
//!   leading factor `(x/2)^nu / Gamma(nu + 1)`;
//! - larger `x` with `nu < DEBYE_MIN_NU`: the Hankel large-argument expansion
//!   with `exp(x)` factored out;
//! - larger `x` with `nu >= DEBYE_MIN_NU`: the Debye uniform expansion with
//!   `exp(nu * eta)` factored out.
//!
//! The ratio `I_{nu+1}(x) / I_nu(x)` uses the Gauss continued fraction up to
//! `CF_MAX_X` and the difference of log evaluations beyond it.

use statrs::function::gamma::ln_gamma;

/// Upper argument for the power series.
pub const SERIES_MAX_X: f64 = 50.0;
/// Orders at or above this use the Debye expansion past `SERIES_MAX_X`.
pub const DEBYE_MIN_NU: f64 = 8.0;
/// Upper argument for the continued-fraction ratio.
pub const CF_MAX_X: f64 = 2000.0;

const SERIES_TOL: f64 = 1e-17;
const CF_TOL: f64 = 1e-16;
const CF_MAX_ITER: usize = 200_000;
const TINY: f64 = 1e-300;

/// `ln(sum_k t_k)` where `I_nu(x) = (x/2)^nu / Gamma(nu+1) * sum_k t_k`.
pub(crate) fn log_series_sum(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * (k + nu));
        sum += term;
        if term < SERIES_TOL * sum {
            break;
        }
        k += 1.0;
    }
    sum.ln()
}

fn log_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut prev_abs = f64::INFINITY;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        term *= -(mu - odd * odd) / (k as f64 * 8.0 * x);
        let a = term.abs();
        if a == 0.0 {
            break;
        }
        // asymptotic series: stop before the terms start growing
        if a > prev_abs {
            break;
        }
        sum += term;
        if a < SERIES_TOL * sum.abs() {
            break;
        }
        prev_abs = a;
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// Debye polynomials `u_k(t)`, k = 1..=5.
fn debye_terms(t: f64) -> [f64; 5] {
    let t2 = t * t;
    let u1 = t * (3.0 - 5.0 * t2) / 24.0;
    let u2 = t2 * (81.0 + t2 * (-462.0 + t2 * 385.0)) / 1152.0;
    let u3 = t * t2 * (30375.0 + t2 * (-369603.0 + t2 * (765765.0 - t2 * 425425.0))) / 414720.0;
    let u4 = t2 * t2 * (4465125.0 + t2 * (-94121676.0 + t2 * (349922430.0 + t2 * (-446185740.0 + t2 * 185910725.0))))
        / 39813120.0;
    let u5 = t
        * t2
        * t2
        * (1519035525.0
            + t2 * (-49286948607.0
                + t2 * (284499769554.0 + t2 * (-614135872350.0 + t2 * (566098157625.0 - t2 * 188699385875.0)))))
        / 6688604160.0;
    [u1, u2, u3, u4, u5]
}

fn log_debye(nu: f64, x: f64) -> f64 {
    let root = (nu * nu + x * x).sqrt();
    let t = nu / root;
    // nu * eta = sqrt(nu^2 + x^2) + nu * ln(x / (nu + sqrt(nu^2 + x^2)))
    let nu_eta = root + nu * (x / (nu + root)).ln();
    let terms = debye_terms(t);
    let mut sum = 1.0;
    let mut p = 1.0;
    for u in terms {
        p /= nu;
        sum += u * p;
    }
    // (1 + z^2)^(1/4) = sqrt(root / nu)
    nu_eta - 0.5 * (2.0 * std::f64::consts::PI * nu).ln() - 0.5 * (root / nu).ln() + sum.ln()
}

/// `ln I_nu(x)` for `nu >= 0` and `x >= 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x >= 0.0);
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x <= SERIES_MAX_X {
        nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + log_series_sum(nu, x)
    } else if nu < DEBYE_MIN_NU {
        log_hankel(nu, x)
    } else {
        log_debye(nu, x)
    }
}

/// `I_{nu+1}(x) / I_nu(x)` for `nu >= 0`, `x >= 0`.
pub fn bessel_ratio(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < 1e-150 {
        return x / (2.0 * (nu + 1.0));
    }
    if x > CF_MAX_X {
        return (log_bessel_i(nu + 1.0, x) - log_bessel_i(nu, x)).exp();
    }
    // modified Lentz on 1 / (b1 + 1 / (b2 + ...)), b_j = 2 (nu + j) / x
    let inv_x = 1.0 / x;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for j in 1..=CF_MAX_ITER {
        let b = 2.0 * (nu + j as f64) * inv_x;
        d = b + d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < CF_TOL {
            break;
        }
    }
    f
}
