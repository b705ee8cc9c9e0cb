//! Directional statistics on the unit hypersphere: von Mises–Fisher
//! parameter estimation, the Banerjee concentration approximation, online
//! fusion of batch statistics into a global distribution, the closed-form
//! vMF KL divergence and the sigmoid loss weight derived from it.

pub mod bessel;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
pub use bessel::{bessel_ratio, log_bessel_i};

/// Ceiling applied to mean resultant lengths before inverting for kappa.
pub const R_BAR_MAX: f64 = 1.0 - 1e-9;

const DEGENERATE_NORM: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-6;
const KL_NEG_TOL: f64 = 1e-9;

/// A point on the unit sphere S^{d-1}, d >= 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Accepts components whose norm is already 1 within 1e-6.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::Shape(format!("dimension {} < 2", components.len())));
        }
        let n = norm(&components);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidValue(format!("norm {n} is not 1")));
        }
        Ok(Self(components))
    }

    /// Scales `v` onto the sphere; fails for (near) zero vectors.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Shape(format!("dimension {} < 2", v.len())));
        }
        let n = norm(&v);
        if !(n.is_finite() && n > DEGENERATE_NORM) {
            return Err(Error::DegenerateResultant(n));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    /// The i-th canonical basis vector of R^d.
    pub fn basis(d: usize, i: usize) -> Self {
        assert!(d >= 2 && i < d);
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    /// Angle to `other` in radians, robust near 0 and pi.
    pub fn angle_to(&self, other: &UnitVector) -> f64 {
        let diff: f64 = norm(&self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect::<Vec<_>>());
        let sum: f64 = norm(&self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect::<Vec<_>>());
        2.0 * diff.atan2(sum)
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Self {
        u.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean direction and concentration of a vMF distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub mu: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::InvalidValue(format!("kappa {kappa}")));
        }
        Ok(Self { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// Sufficient statistics of one batch of unit feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mu: UnitVector,
    pub r_bar: f64,
    pub n: u64,
}

impl BatchStats {
    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// vMF parameters of this batch with kappa from the Banerjee approximation.
    pub fn to_vmf(&self) -> Result<VmfParams> {
        let kappa = kappa_from_rbar(self.r_bar, self.dim())?;
        VmfParams::new(self.mu.clone(), kappa)
    }
}

/// Server-side running vMF summary of all client features seen so far.
///
/// Alongside the published `mu`, `kappa` and `r_bar` the state keeps the
/// count-weighted sums the fusion rule is linear in, so sequential fusion
/// equals pooling exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDistState {
    pub mu: Option<UnitVector>,
    pub kappa: f64,
    pub r_bar: f64,
    #[serde(rename = "n")]
    pub n_total: u64,
    #[serde(default)]
    pub weighted_mu_sum: Vec<f64>,
    #[serde(default)]
    pub weighted_r_sum: f64,
}

impl Default for GlobalDistState {
    fn default() -> Self {
        Self::uninitialized()
    }
}

impl GlobalDistState {
    pub fn uninitialized() -> Self {
        Self {
            mu: None,
            kappa: 0.0,
            r_bar: 0.0,
            n_total: 0,
            weighted_mu_sum: Vec::new(),
            weighted_r_sum: 0.0,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.n_total > 0
    }

    /// The global vMF, once at least one batch has been fused.
    pub fn vmf(&self) -> Option<VmfParams> {
        self.mu.as_ref().map(|mu| VmfParams {
            mu: mu.clone(),
            kappa: self.kappa,
        })
    }
}

/// Maximum-likelihood mean direction and mean resultant length of a batch.
pub fn estimate_batch_stats(features: &[UnitVector]) -> Result<BatchStats> {
    let first = features.first().ok_or(Error::EmptyBatch)?;
    let d = first.dim();
    let mut sum = vec![0.0; d];
    for v in features {
        if v.dim() != d {
            return Err(Error::Shape(format!("feature dims {} and {}", d, v.dim())));
        }
        for (s, x) in sum.iter_mut().zip(v.as_slice()) {
            *s += x;
        }
    }
    let len = norm(&sum);
    if len < DEGENERATE_NORM {
        return Err(Error::DegenerateResultant(len));
    }
    let n = features.len();
    let mu = UnitVector(sum.iter().map(|x| x / len).collect());
    Ok(BatchStats {
        mu,
        r_bar: (len / n as f64).min(R_BAR_MAX),
        n: n as u64,
    })
}

/// Banerjee approximation `kappa = R (d - R^2) / (1 - R^2)`.
pub fn kappa_from_rbar(r_bar: f64, d: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&r_bar) {
        return Err(Error::Domain(r_bar));
    }
    if d < 2 {
        return Err(Error::Shape(format!("dimension {d} < 2")));
    }
    let r = r_bar.min(R_BAR_MAX);
    let r2 = r * r;
    Ok(r * (d as f64 - r2) / (1.0 - r2))
}

/// `A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa)`, the mean resultant length
/// of vMF(kappa) on S^{d-1}.
pub fn bessel_ratio_a_d(kappa: f64, d: usize) -> f64 {
    assert!(d >= 2, "dimension {d} < 2");
    assert!(kappa.is_finite() && kappa >= 0.0, "kappa {kappa}");
    bessel_ratio(0.5 * d as f64 - 1.0, kappa)
}

/// `ln C_d(kappa)` with `C_d(kappa) = kappa^{d/2-1} / ((2 pi)^{d/2} I_{d/2-1}(kappa))`.
/// At `kappa = 0` it equals minus the log surface area of S^{d-1}.
pub fn log_c_d(kappa: f64, d: usize) -> f64 {
    assert!(d >= 2, "dimension {d} < 2");
    assert!(kappa.is_finite() && kappa >= 0.0, "kappa {kappa}");
    let nu = 0.5 * d as f64 - 1.0;
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    let base = -(0.5 * d as f64) * log_2pi;
    if kappa <= bessel::SERIES_MAX_X {
        // kappa^nu cancels against the series prefactor (x/2)^nu
        let series = if kappa == 0.0 {
            0.0
        } else {
            bessel::log_series_sum(nu, kappa)
        };
        base + nu * 2f64.ln() + ln_gamma(nu + 1.0) - series
    } else {
        base + nu * kappa.ln() - log_bessel_i(nu, kappa)
    }
}

/// Fold one batch into the global state (size-weighted online update).
pub fn update_global(state: &GlobalDistState, batch: &BatchStats) -> Result<GlobalDistState> {
    let d = batch.dim();
    if batch.n == 0 {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&batch.r_bar) {
        return Err(Error::Domain(batch.r_bar));
    }
    let n = batch.n as f64;
    if !state.is_initialized() {
        return Ok(GlobalDistState {
            mu: Some(batch.mu.clone()),
            kappa: kappa_from_rbar(batch.r_bar, d)?,
            r_bar: batch.r_bar,
            n_total: batch.n,
            weighted_mu_sum: batch.mu.as_slice().iter().map(|x| x * n).collect(),
            weighted_r_sum: batch.r_bar * n,
        });
    }
    if state.weighted_mu_sum.len() != d {
        return Err(Error::Shape(format!(
            "global dim {} vs batch dim {d}",
            state.weighted_mu_sum.len()
        )));
    }
    let mu_sum: Vec<f64> = state
        .weighted_mu_sum
        .iter()
        .zip(batch.mu.as_slice())
        .map(|(s, m)| s + m * n)
        .collect();
    let len = norm(&mu_sum);
    if len < DEGENERATE_NORM {
        return Err(Error::DegenerateFusion(len));
    }
    let n_total = state.n_total + batch.n;
    let r_sum = state.weighted_r_sum + batch.r_bar * n;
    let r_bar = (r_sum / n_total as f64).min(R_BAR_MAX);
    Ok(GlobalDistState {
        mu: Some(UnitVector(mu_sum.iter().map(|x| x / len).collect())),
        kappa: kappa_from_rbar(r_bar, d)?,
        r_bar,
        n_total,
        weighted_mu_sum: mu_sum,
        weighted_r_sum: r_sum,
    })
}

/// `D_KL(local || global)` between two vMF distributions of equal dimension.
pub fn kl_divergence(local: &VmfParams, global: &VmfParams) -> Result<f64> {
    let d = local.dim();
    if global.dim() != d {
        return Err(Error::Shape(format!("vMF dims {} and {}", d, global.dim())));
    }
    let a = bessel_ratio_a_d(local.kappa, d);
    let cos = global.mu.dot(&local.mu);
    let kl = log_c_d(local.kappa, d) - log_c_d(global.kappa, d) + (local.kappa - global.kappa * cos) * a;
    Ok(if kl < 0.0 && kl > -KL_NEG_TOL { 0.0 } else { kl })
}

/// How the KL divergence is squashed into a loss multiplier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VklForm {
    /// `1 + 1 / (1 + exp(-(kl - sigma) / gamma))`, confined to (1, 2).
    #[default]
    Logistic,
    /// `1 + 1 / exp(-(kl - sigma) / gamma)`, an unbounded variant.
    Printed,
}

/// Loss multiplier for a batch with divergence `d_kl` from the global vMF.
pub fn vkl_weight(d_kl: f64, sigma: f64, gamma: f64) -> f64 {
    vkl_weight_with(d_kl, sigma, gamma, VklForm::Logistic)
}

pub fn vkl_weight_with(d_kl: f64, sigma: f64, gamma: f64, form: VklForm) -> f64 {
    assert!(gamma > 0.0, "gamma must be positive");
    let z = (d_kl - sigma) / gamma;
    match form {
        VklForm::Logistic => {
            let s = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            // keep the open interval in floating point at saturation
            (1.0 + s).clamp(1.0 + f64::EPSILON, 2.0 - f64::EPSILON)
        }
        VklForm::Printed => 1.0 + z.exp(),
    }
}

/// Draw `n` samples from vMF(mu, kappa) with Wood's rejection sampler.
pub fn sample_vmf<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Vec<UnitVector> {
    let d = params.dim();
    let kappa = params.kappa;
    let dm1 = (d - 1) as f64;
    // b = (-2k + sqrt(4k^2 + (d-1)^2)) / (d-1), rearranged to avoid cancellation
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(0.5 * dm1, 0.5 * dm1).expect("valid beta parameters");
    let mu = params.mu.as_slice();

    let mut out = Vec::with_capacity(n);
    let mut g = vec![0.0; d];
    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        // uniform direction orthogonal to mu
        let perp = loop {
            for gi in g.iter_mut() {
                *gi = rng.sample(StandardNormal);
            }
            let proj = dot(&g, mu);
            for (gi, m) in g.iter_mut().zip(mu) {
                *gi -= proj * m;
            }
            let len = norm(&g);
            if len > 1e-12 {
                break len;
            }
        };
        let scale = (1.0 - w * w).max(0.0).sqrt() / perp;
        let v: Vec<f64> = mu.iter().zip(&g).map(|(m, gi)| w * m + scale * gi).collect();
        let len = norm(&v);
        out.push(UnitVector(v.into_iter().map(|x| x / len).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn e(d: usize, i: usize) -> UnitVector {
        UnitVector::basis(d, i)
    }

    fn random_unit(seed: u64, d: usize) -> UnitVector {
        let mut r = rng::stream(seed, "unit", 0);
        UnitVector::normalize((0..d).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn unit_vector_validation() {
        assert!(UnitVector::new(vec![1.0]).is_err());
        assert!(UnitVector::new(vec![1.0, 1.0]).is_err());
        assert!(UnitVector::new(vec![0.6, 0.8]).is_ok());
        assert!(UnitVector::normalize(vec![0.0, 0.0]).is_err());
        let json = serde_json::to_string(&e(3, 1)).unwrap();
        assert_eq!(json, "[0.0,1.0,0.0]");
        assert!(serde_json::from_str::<UnitVector>("[2.0,0.0]").is_err());
    }

    #[test]
    fn batch_of_identical_vectors() {
        let v = vec![e(4, 2); 7];
        let s = estimate_batch_stats(&v).unwrap();
        assert_eq!(s.mu, e(4, 2));
        assert_eq!(s.r_bar, R_BAR_MAX);
        assert_eq!(s.n, 7);
    }

    #[test]
    fn batch_errors() {
        assert!(matches!(estimate_batch_stats(&[]), Err(Error::EmptyBatch)));
        let neg = UnitVector::new(vec![-1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            estimate_batch_stats(&[e(3, 0), neg]),
            Err(Error::DegenerateResultant(_))
        ));
        assert!(matches!(
            estimate_batch_stats(&[e(3, 0), e(2, 0)]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn banerjee_values() {
        assert_eq!(kappa_from_rbar(0.0, 8).unwrap(), 0.0);
        assert!((kappa_from_rbar(0.5, 4).unwrap() - 2.5).abs() < 1e-15);
        assert!(matches!(kappa_from_rbar(1.5, 4), Err(Error::Domain(_))));
        assert!(matches!(kappa_from_rbar(-0.1, 4), Err(Error::Domain(_))));
        assert!(kappa_from_rbar(1.0, 4).unwrap().is_finite());
    }

    #[test]
    fn a_d_closed_forms() {
        assert_eq!(bessel_ratio_a_d(0.0, 8), 0.0);
        let a3 = bessel_ratio_a_d(1.0, 3);
        assert!((a3 - (1.0 / 1f64.tanh() - 1.0)).abs() < 1e-14);
        assert!((a3 - 0.3130).abs() < 1e-4);
        let k = 1e4;
        assert!((bessel_ratio_a_d(k, 8) - (1.0 - 7.0 / (2.0 * k))).abs() < 1e-6);
    }

    #[test]
    fn a_d_is_monotone() {
        for d in [2, 3, 8, 16, 64] {
            let mut prev = 0.0;
            for i in 1..400 {
                let k = 0.05 * (i as f64).powf(1.8);
                let a = bessel_ratio_a_d(k, d);
                assert!(a > prev && a < 1.0, "d={d} k={k}");
                prev = a;
            }
        }
    }

    #[test]
    fn log_c_d_values() {
        let four_pi = (4.0 * std::f64::consts::PI).ln();
        assert!((log_c_d(0.0, 3) + four_pi).abs() < 1e-12);
        assert!((log_c_d(1e-12, 3) + four_pi).abs() < 1e-12);
        let k: f64 = 2.0;
        let exact = (k / (4.0 * std::f64::consts::PI * k.sinh())).ln();
        assert!((log_c_d(k, 3) - exact).abs() < 1e-12);
        assert!((log_c_d(k, 3) + 3.126_244).abs() < 1e-6);
        for k in [60.0f64, 1e3, 1e6] {
            // d = 3: ln(k / (4 pi sinh k)) = ln k - ln(2 pi) - k - ln(1 - e^{-2k})
            let exact = k.ln() - (2.0 * std::f64::consts::PI).ln() - k - (-(-2.0 * k).exp()).ln_1p();
            let got = log_c_d(k, 3);
            assert!((got - exact).abs() < 1e-9 * exact.abs(), "k={k}");
        }
        for d in [2, 8, 16, 64] {
            assert!(log_c_d(1e6, d).is_finite());
        }
    }

    #[test]
    fn log_c_d_continuous_at_series_boundary() {
        for d in [2, 3, 8, 16, 64] {
            let lo = log_c_d(bessel::SERIES_MAX_X, d);
            let hi = log_c_d(bessel::SERIES_MAX_X * (1.0 + 1e-12), d);
            assert!((lo - hi).abs() < 1e-9, "d={d} {lo} {hi}");
        }
    }

    #[test]
    fn global_first_installation_and_fixed_point() {
        let b = BatchStats {
            mu: e(8, 0),
            r_bar: 0.5,
            n: 100,
        };
        let g = update_global(&GlobalDistState::uninitialized(), &b).unwrap();
        assert_eq!(g.mu.as_ref().unwrap(), &e(8, 0));
        assert_eq!(g.r_bar, 0.5);
        assert_eq!(g.n_total, 100);
        assert_eq!(g.kappa, kappa_from_rbar(0.5, 8).unwrap());

        let g2 = update_global(&g, &b).unwrap();
        assert_eq!(g2.mu.as_ref().unwrap(), &e(8, 0));
        assert_eq!(g2.r_bar, 0.5);
        assert_eq!(g2.n_total, 200);
    }

    #[test]
    fn opposed_fusion_is_degenerate() {
        let b = BatchStats {
            mu: e(2, 0),
            r_bar: 0.5,
            n: 10,
        };
        let g = update_global(&GlobalDistState::uninitialized(), &b).unwrap();
        let opp = BatchStats {
            mu: UnitVector::new(vec![-1.0, 0.0]).unwrap(),
            r_bar: 0.5,
            n: 10,
        };
        assert!(matches!(update_global(&g, &opp), Err(Error::DegenerateFusion(_))));
    }

    #[test]
    fn global_state_json_round_trip() {
        let b = BatchStats {
            mu: e(3, 1),
            r_bar: 0.25,
            n: 5,
        };
        let g = update_global(&GlobalDistState::uninitialized(), &b).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"mu\"") && s.contains("\"kappa\"") && s.contains("\"r_bar\"") && s.contains("\"n\""));
        let back: GlobalDistState = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let u = serde_json::to_string(&GlobalDistState::uninitialized()).unwrap();
        assert!(u.contains("\"mu\":null"));
    }

    #[test]
    fn kl_identity_and_orthogonal() {
        let p = VmfParams::new(e(8, 0), 4.0).unwrap();
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-9);
        let q = VmfParams::new(e(8, 1), 4.0).unwrap();
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - 4.0 * bessel_ratio_a_d(4.0, 8)).abs() < 1e-12);
        let r = VmfParams::new(e(4, 1), 4.0).unwrap();
        assert!(matches!(kl_divergence(&p, &r), Err(Error::Shape(_))));
    }

    #[test]
    fn vkl_values() {
        assert!((vkl_weight(50.0, 50.0, 0.5) - 1.5).abs() < 1e-15);
        assert!((vkl_weight(0.0, 50.0, 0.5) - 1.0).abs() < 1e-12);
        let expect = 1.0 + 1.0 / (1.0 + (-2f64).exp());
        assert!((vkl_weight(51.0, 50.0, 0.5) - expect).abs() < 1e-15);
        assert!((expect - 1.8808).abs() < 1e-4);
        assert!(vkl_weight(1e9, 50.0, 0.5) < 2.0);
        assert!(vkl_weight(0.0, 1e9, 0.5) > 1.0);
        let printed = vkl_weight_with(51.0, 50.0, 0.5, VklForm::Printed);
        assert!((printed - (1.0 + 2f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn uniform_samples_have_small_resultant() {
        let p = VmfParams::new(e(3, 2), 0.0).unwrap();
        let mut r = rng::stream(11, "vmf", 0);
        let s = sample_vmf(&p, 100_000, &mut r);
        let stats = estimate_batch_stats(&s).unwrap();
        assert!(stats.r_bar < 0.02, "r_bar = {}", stats.r_bar);
    }

    #[test]
    fn concentrated_samples_stay_near_mean() {
        let mu = random_unit(3, 8);
        let p = VmfParams::new(mu.clone(), 1e6).unwrap();
        let mut r = rng::stream(12, "vmf", 0);
        for v in sample_vmf(&p, 2000, &mut r) {
            assert!(v.angle_to(&mu) < 0.01);
        }
    }

    #[test]
    fn sample_resultant_matches_a_d() {
        let mu = random_unit(5, 8);
        let p = VmfParams::new(mu.clone(), 5.0).unwrap();
        let mut r = rng::stream(13, "vmf", 0);
        let s = sample_vmf(&p, 100_000, &mut r);
        let stats = estimate_batch_stats(&s).unwrap();
        assert!((stats.r_bar - bessel_ratio_a_d(5.0, 8)).abs() < 0.01);
    }

    #[test]
    fn estimate_recovers_parameters() {
        let mu = random_unit(7, 8);
        let p = VmfParams::new(mu.clone(), 10.0).unwrap();
        let mut r = rng::stream(14, "vmf", 0);
        let s = sample_vmf(&p, 10_000, &mut r);
        let stats = estimate_batch_stats(&s).unwrap();
        assert!(stats.mu.angle_to(&mu) < 0.05);
        assert!((stats.r_bar - bessel_ratio_a_d(10.0, 8)).abs() < 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn kappa_monotone_in_rbar(a in 0.0f64..0.999, b in 0.0f64..0.999, d in 2usize..70) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-12);
            prop_assert!(kappa_from_rbar(lo, d).unwrap() < kappa_from_rbar(hi, d).unwrap());
        }

        #[test]
        fn batch_stats_order_invariant(seed in 0u64..1000, n in 2usize..50) {
            let v: Vec<UnitVector> = (0..n).map(|i| random_unit(seed * 1000 + i as u64, 6)).collect();
            let mut rev = v.clone();
            rev.reverse();
            let a = estimate_batch_stats(&v);
            let b = estimate_batch_stats(&rev);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!(a.mu.angle_to(&b.mu) < 1e-9);
                prop_assert!((a.r_bar - b.r_bar).abs() < 1e-12);
            }
        }

        #[test]
        fn fusion_is_count_weighted(r1 in 0.0f64..0.99, r2 in 0.0f64..0.99, n1 in 1u64..500, n2 in 1u64..500, seed in 0u64..100) {
            let b1 = BatchStats { mu: random_unit(seed, 5), r_bar: r1, n: n1 };
            let b2 = BatchStats { mu: random_unit(seed + 1, 5), r_bar: r2, n: n2 };
            let g1 = update_global(&GlobalDistState::uninitialized(), &b1).unwrap();
            let g2 = update_global(&g1, &b2).unwrap();
            prop_assert!(g2.n_total > g1.n_total);
            let expect = (r1 * n1 as f64 + r2 * n2 as f64) / (n1 + n2) as f64;
            prop_assert_eq!(g2.r_bar, expect);
        }

        #[test]
        fn vkl_in_open_interval(kl in 0.0f64..1e4, sigma in -100.0f64..100.0, gamma in 0.01f64..10.0) {
            let v = vkl_weight(kl, sigma, gamma);
            prop_assert!(v > 1.0 && v < 2.0);
        }
    }
}
