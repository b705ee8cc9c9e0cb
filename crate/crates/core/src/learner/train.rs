//! Gradients, local updates and supervised pre-training.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{evaluate, LossBreakdown, LossWeights};
use super::model::{backward, forward, forward_cached, ModelParams, PredictedOutput};
use super::spectrum::FrequencyBand;
use crate::error::{Error, Result};
use crate::signal::{SpatioTemporalMap, Waveform};

/// Loss, gradient and model outputs of one batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: LossBreakdown,
    /// Gradient of `scale * loss.total` with respect to theta.
    pub grad: Vec<f64>,
    pub outputs: Vec<PredictedOutput>,
}

/// Forward pass, unsupervised loss and its analytic gradient in one sweep.
pub fn batch_objective(
    params: &ModelParams,
    batch: &[&SpatioTemporalMap],
    band: &FrequencyBand,
    weights: &LossWeights,
    scale: f64,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidValue(format!("gradient scale {scale}")));
    }
    let outputs = batch.iter().map(|x| forward(params, x)).collect::<Result<Vec<_>>>()?;
    let pooled: Vec<Vec<f64>> = batch.iter().map(|x| super::model::pool(params, x)).collect();
    let signals: Vec<&[f64]> = outputs.iter().map(|o| o.signal.samples()).collect();
    let (loss, d_signals) = evaluate(&signals, batch[0].fs(), band, weights, true)?;
    let mut grad = vec![0.0; params.n_params()];
    for ((x, p), g) in batch.iter().zip(&pooled).zip(&d_signals) {
        backward(params, x, p, g, &mut grad);
    }
    if scale != 1.0 {
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(BatchObjective { loss, grad, outputs })
}

/// Gradient of `scale * unsup_loss(forward(params, batch))` with unit weights.
pub fn grad(params: &ModelParams, batch: &[&SpatioTemporalMap], band: &FrequencyBand, scale: f64) -> Result<Vec<f64>> {
    Ok(batch_objective(params, batch, band, &LossWeights::default(), scale)?.grad)
}

/// One gradient step `theta - lr * v_kl * grad`.
pub fn local_update(
    params: &ModelParams,
    batch: &[&SpatioTemporalMap],
    band: &FrequencyBand,
    lr: f64,
    v_kl: f64,
) -> Result<ModelParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidValue(format!("learning rate {lr}")));
    }
    let g = grad(params, batch, band, 1.0)?;
    params.stepped(&g, lr * v_kl)
}

/// Pearson correlation between two equal-length sequences, with its
/// gradient with respect to `a` when requested.
fn pearson(a: &[f64], b: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale_a = 1e-24 * a.iter().map(|v| v * v).sum::<f64>();
    let scale_b = 1e-24 * b.iter().map(|v| v * v).sum::<f64>();
    if !(saa > scale_a && saa > 0.0) || !(sbb > scale_b && sbb > 0.0) {
        return Err(Error::DegenerateSignal("zero-variance input to correlation".into()));
    }
    let na = saa.sqrt();
    let nb = sbb.sqrt();
    let r = (sab / (na * nb)).clamp(-1.0, 1.0);
    let grad = if with_grad {
        a.iter()
            .zip(b)
            .map(|(x, y)| (y - mb) / (na * nb) - r * (x - ma) / saa)
            .collect()
    } else {
        Vec::new()
    };
    Ok((r, grad))
}

/// `1 - pearson(pred, gt)`, in `[0, 2]`.
pub fn supervised_loss(pred: &Waveform, gt: &Waveform) -> Result<f64> {
    Ok(1.0 - pearson(pred.samples(), gt.samples(), false)?.0)
}

/// Mean supervised loss over `(input, target)` pairs and its gradient.
pub fn supervised_objective(
    params: &ModelParams,
    batch: &[(&SpatioTemporalMap, &Waveform)],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.n_params()];
    let mut loss = 0.0;
    for (x, gt) in batch {
        let cache = forward_cached(params, x)?;
        let (r, dr) = pearson(&cache.signal, gt.samples(), true)?;
        loss += (1.0 - r) * inv;
        let d_signal: Vec<f64> = dr.iter().map(|g| -g * inv).collect();
        backward(params, x, &cache.pooled, &d_signal, &mut grad);
    }
    Ok((loss, grad))
}

/// Mean supervised loss without gradient.
pub fn supervised_eval(params: &ModelParams, data: &[(&SpatioTemporalMap, &Waveform)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for (x, gt) in data {
        let cache = forward_cached(params, x)?;
        total += 1.0 - pearson(&cache.signal, gt.samples(), false)?.0;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once the validation loss has not improved by `min_delta` for
    /// this many consecutive epochs.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-2,
            batch_size: 32,
            patience: 5,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    /// Best-validation parameters, rescaled with [`ModelParams::normalized`].
    pub params: ModelParams,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    /// True when training stopped on the plateau rule rather than the epoch cap.
    pub plateaued: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Supervised pre-training with Adam on `1 - pearson`.
///
/// Fails with a convergence error when the validation loss never improves
/// on its initial value by `min_delta`.
pub fn pretrain<R: Rng + ?Sized>(
    init: &ModelParams,
    train: &[(&SpatioTemporalMap, &Waveform)],
    val: &[(&SpatioTemporalMap, &Waveform)],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || cfg.patience == 0 {
        return Err(Error::Config(format!("invalid pre-training settings {cfg:?}")));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut theta = init.theta.clone();
    let mut adam = Adam::new(theta.len());
    let initial_val_loss = supervised_eval(init, val)?;
    let mut best = (initial_val_loss, init.clone());
    let mut stale = 0;
    let mut plateaued = false;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train[i]).collect();
            let params = ModelParams::new(init.arch, theta.clone())?;
            let (loss, g) = supervised_objective(&params, &batch)?;
            train_loss += loss * chunk.len() as f64 / train.len() as f64;
            adam.step(&mut theta, &g, cfg.lr);
        }
        let params = ModelParams::new(init.arch, theta.clone())?;
        let val_loss = supervised_eval(&params, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::info!("pretrain epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if val_loss < best.0 - cfg.min_delta {
            best = (val_loss, params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                plateaued = true;
                break;
            }
        }
    }
    if !(best.0 < initial_val_loss - cfg.min_delta) {
        return Err(Error::Convergence(format!(
            "validation loss did not improve from {initial_val_loss:.6} in {} epochs",
            history.len()
        )));
    }
    Ok(PretrainOutcome {
        params: best.1.normalized(),
        initial_val_loss,
        best_val_loss: best.0,
        history,
        plateaued,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::model::{forward_signal, ModelArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn arch() -> ModelArch {
        ModelArch {
            time: 64,
            rows: 2,
            channels: 2,
            n_filters: 2,
            taps: 7,
        }
    }

    fn random_params(rng: &mut ChaCha8Rng) -> ModelParams {
        let a = arch();
        ModelParams::new(a, (0..a.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng) -> SpatioTemporalMap {
        let a = arch();
        let n = a.time * a.rows * a.channels;
        SpatioTemporalMap::new(
            a.time,
            a.rows,
            a.channels,
            30.0,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn grad_scale_is_exactly_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng);
        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng)).collect();
        let refs: Vec<_> = maps.iter().collect();
        let band = FrequencyBand::default();
        let g1 = grad(&p, &refs, &band, 1.0).unwrap();
        let g2 = grad(&p, &refs, &band, 2.0).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn dead_input_cell_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng);
        let mut maps: Vec<_> = (0..3).map(|_| random_map(&mut rng)).collect();
        for m in maps.iter_mut() {
            for t in 0..64 {
                m.set(t, 1, 0, 0.0);
            }
        }
        let refs: Vec<_> = maps.iter().collect();
        let g = grad(&p, &refs, &FrequencyBand::default(), 1.0).unwrap();
        // cell (row 1, channel 0) is pooling weight index 2
        assert_eq!(g[2], 0.0);
        assert!(g.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn local_update_steps_along_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng);
        let maps: Vec<_> = (0..2).map(|_| random_map(&mut rng)).collect();
        let refs: Vec<_> = maps.iter().collect();
        let band = FrequencyBand::default();
        let g = grad(&p, &refs, &band, 1.0).unwrap();
        let q = local_update(&p, &refs, &band, 0.01, 1.5).unwrap();
        for i in 0..g.len() {
            assert_eq!(q.theta[i], p.theta[i] - 0.015 * g[i]);
        }
        assert_eq!(q.arch, p.arch);
        assert!(local_update(&p, &refs, &band, 0.0, 1.0).is_err());
    }

    #[test]
    fn local_update_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng);
        let maps: Vec<_> = (0..4).map(|_| random_map(&mut rng)).collect();
        let refs: Vec<_> = maps.iter().collect();
        let band = FrequencyBand::default();
        let w = LossWeights::default();
        let before = batch_objective(&p, &refs, &band, &w, 1.0).unwrap();
        let norm2: f64 = before.grad.iter().map(|g| g * g).sum();
        let lr = 1e-3 / norm2.sqrt();
        let q = local_update(&p, &refs, &band, lr, 1.0).unwrap();
        let after = batch_objective(&q, &refs, &band, &w, 1.0).unwrap();
        assert!(after.loss.total < before.loss.total);
    }

    #[test]
    fn supervised_loss_examples() {
        let gt = Waveform::new((0..50).map(|t| (t as f64 * 0.3).sin()).collect(), 30.0).unwrap();
        assert!(supervised_loss(&gt, &gt).unwrap().abs() < 1e-12);
        assert!((supervised_loss(&gt.scaled(-1.0), &gt).unwrap() - 2.0).abs() < 1e-12);
        let shifted = Waveform::new(gt.samples().iter().map(|v| v + 4.0).collect(), 30.0).unwrap();
        assert!(supervised_loss(&shifted, &gt).unwrap().abs() < 1e-12);
        let flat = Waveform::new(vec![2.0; 50], 30.0).unwrap();
        assert!(supervised_loss(&flat, &gt).is_err());
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng);
        let maps: Vec<_> = (0..3).map(|_| random_map(&mut rng)).collect();
        let gts: Vec<Waveform> = (0..3)
            .map(|i| Waveform::new((0..64).map(|t| (0.2 * t as f64 + i as f64).sin()).collect(), 30.0).unwrap())
            .collect();
        let batch: Vec<_> = maps.iter().zip(&gts).collect();
        let (_, g) = supervised_objective(&p, &batch).unwrap();
        for i in 0..p.n_params() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.theta[i] += 1e-6;
            b.theta[i] -= 1e-6;
            let fd = (supervised_objective(&a, &batch).unwrap().0 - supervised_objective(&b, &batch).unwrap().0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()), "i={i}");
        }
    }

    fn labeled(rng: &mut ChaCha8Rng, n: usize) -> Vec<(SpatioTemporalMap, Waveform)> {
        let a = arch();
        (0..n)
            .map(|_| {
                let f = rng.random_range(0.8..2.5);
                let ph = rng.random_range(0.0..2.0 * PI);
                let gt: Vec<f64> = (0..a.time)
                    .map(|t| (2.0 * PI * f * t as f64 / 30.0 + ph).sin())
                    .collect();
                let mut values = Vec::with_capacity(a.time * 4);
                for &g in &gt {
                    values.push(g + rng.random_range(-0.3..0.3));
                    values.push(rng.random_range(-1.0..1.0));
                    values.push(0.5 * g + rng.random_range(-0.3..0.3));
                    values.push(rng.random_range(-1.0..1.0));
                }
                (
                    SpatioTemporalMap::new(a.time, 2, 2, 30.0, values).unwrap(),
                    Waveform::new(gt, 30.0).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn pretrain_improves_and_frozen_training_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let train = labeled(&mut rng, 60);
        let val = labeled(&mut rng, 20);
        let tr: Vec<_> = train.iter().map(|(x, g)| (x, g)).collect();
        let va: Vec<_> = val.iter().map(|(x, g)| (x, g)).collect();
        let init = ModelParams::filter_bank(arch(), 30.0, &FrequencyBand::default()).unwrap();
        let cfg = PretrainConfig {
            epochs: 30,
            ..PretrainConfig::default()
        };
        let out = pretrain(&init, &tr, &va, &cfg, &mut rng).unwrap();
        assert!(out.best_val_loss < 0.5 * out.initial_val_loss, "{out:?}");
        let direct = supervised_eval(&out.params, &va).unwrap();
        assert!((direct - out.best_val_loss).abs() < 1e-9);
        let _ = forward_signal(&out.params, &train[0].0).unwrap();

        let frozen = PretrainConfig { lr: 0.0, ..cfg };
        let err = pretrain(&init, &tr, &va, &frozen, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Convergence(_)));
    }
}
