//! Full-precision training of the detector.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{forward_graph, forward_with, DetectionSet, ModelConfig, Sample};
use crate::objectives::{objective_loss, LossValues, LossWeights, Objective};
use crate::params::ParamSet;

/// Adam without weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Option<GradMap>,
    v: Option<GradMap>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: None,
            v: None,
            t: 0,
        }
    }

    /// One update of `params` (flat order) against `grad`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &GradMap, lr: f64) {
        let m = self.m.get_or_insert_with(|| GradMap(grad.0.iter().map(|g| Tensor::zeros(g.shape())).collect()));
        let v = self.v.get_or_insert_with(|| GradMap(grad.0.iter().map(|g| Tensor::zeros(g.shape())).collect()));
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut update = Vec::with_capacity(grad.0.len());
        for ((gi, mi), vi) in grad.0.iter().zip(&mut m.0).zip(&mut v.0) {
            let mut u = Vec::with_capacity(gi.len());
            for ((&g, m), v) in gi.data().iter().zip(mi.data_mut()).zip(vi.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                u.push((*m / bc1) / ((*v / bc2).sqrt() + self.eps));
            }
            update.push(Tensor::from_vec(gi.shape(), u));
        }
        params.apply_update(&GradMap(update), lr);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine: bool,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            batch_size: 16,
            cosine: false,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return Err(Error::config("lr must be non-negative and batch_size positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.cosine && total > 0 {
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossValues,
    pub lr: f64,
}

/// Graph with `tensors` bound as differentiable leaves.
pub fn bind_params(g: &mut Graph, tensors: &[Tensor]) -> Vec<Var> {
    tensors.iter().map(|t| g.param(t.clone())).collect()
}

/// Objective value and gradient on one image.
pub fn sample_gradient(
    model: &ModelConfig,
    tensors: &[Tensor],
    sample: &Sample,
    objective: &Objective,
    w: &LossWeights,
    precision: Precision,
) -> Result<(f64, GradMap)> {
    let mut g = Graph::with_precision(precision);
    let vars = bind_params(&mut g, tensors);
    let (l, b) = forward_graph(&mut g, model, &vars, &sample.image)?;
    let loss = objective_loss(&mut g, l, b, &sample.objects, objective, w)?;
    let grads = g.gradients(loss, &vars)?;
    Ok((g.item(loss), GradMap(grads)))
}

/// Overall loss breakdown and gradient on one image.
pub fn sample_loss_gradient(
    model: &ModelConfig,
    tensors: &[Tensor],
    sample: &Sample,
    w: &LossWeights,
    precision: Precision,
) -> Result<(LossValues, GradMap)> {
    let mut g = Graph::with_precision(precision);
    let vars = bind_params(&mut g, tensors);
    let (l, b) = forward_graph(&mut g, model, &vars, &sample.image)?;
    let loss = crate::objectives::loss_overall(&mut g, l, b, &sample.objects, w)?;
    let grads = g.gradients(loss.total, &vars)?;
    Ok((loss.values(&g), GradMap(grads)))
}

/// Accumulates `values` into a running mean over `n` items.
pub(crate) fn add_values(acc: &mut LossValues, v: &LossValues, scale: f64) {
    acc.total += v.total * scale;
    acc.class += v.class * scale;
    acc.l1 += v.l1 * scale;
    acc.giou += v.giou * scale;
}

/// Trains on `data` with Adam, calling `on_epoch` after each epoch.
pub fn train_fp(
    model: &ModelConfig,
    mut params: ParamSet,
    data: &[Sample],
    cfg: &TrainConfig,
    w: &LossWeights,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamSet),
) -> Result<(ParamSet, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossValues::default();
        let mut lr = cfg.lr;
        for batch in order.chunks(cfg.batch_size) {
            let tensors = params.tensors();
            let mut grad = GradMap::zeros_like(&tensors);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (v, g) = sample_loss_gradient(model, &tensors, &data[i], w, cfg.precision)?;
                grad.axpy(inv, &g);
                add_values(&mut epoch_loss, &v, 1.0 / data.len() as f64);
            }
            lr = cfg.lr_at(step, total);
            opt.step(&mut params, &grad, lr);
            step += 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss,
            lr,
        };
        on_epoch(&rec, &params);
        log.push(rec);
    }
    Ok((params, log))
}

/// Predictions for every sample.
pub fn predict(model: &ModelConfig, params: &ParamSet, data: &[Sample], precision: Precision) -> Result<Vec<DetectionSet>> {
    data.iter()
        .map(|s| forward_with(model, params, &s.image, precision))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_dataset, init_model, DatasetSpec};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new(vec![crate::params::Layer {
            name: "w".into(),
            weight: Tensor::from_vec(&[2], vec![1.0, -1.0]),
            bias: None,
            exempt: false,
        }])
        .unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &GradMap(vec![Tensor::from_vec(&[2], vec![3.0, -0.5])]), 0.1);
        let w = p.layers()[0].weight.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let spec = DatasetSpec {
            train_images: 8,
            val_images: 0,
            ..Default::default()
        };
        let (train, _) = gen_dataset(&spec).unwrap();
        let model = ModelConfig::default();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            ..Default::default()
        };
        let run = || train_fp(&model, init_model(&model).unwrap(), &train, &cfg, &LossWeights::default(), |_, _| {}).unwrap();
        let (p1, log1) = run();
        let (p2, log2) = run();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert!(log1.last().unwrap().loss.total < log1[0].loss.total);
    }
}
