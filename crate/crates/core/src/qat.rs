//! Quantization-aware training with a Fisher-trace penalty on the critical
//! objective, a linear penalty schedule and optional distillation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_with, hvp_with, GradMap, Graph, HvpMode, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::{par_for_each_ordered, par_map};
use crate::model::{forward_graph, DetectionSet, ModelConfig, Sample};
use crate::objectives::{distill_loss, eval_map, objective_loss, CriticalSpec, LossWeights, Objective};
use crate::params::ParamSet;
use crate::quantizer::{fake_quant, QuantConfig};
use crate::train::{bind_params, predict, Adam};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    /// Hessian-vector products by central differences of gradients.
    #[default]
    FdHvp,
    /// Hessian-vector products by differentiating the backward graph.
    ExactHvp,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QatConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda0: f64,
    pub lambda_t: f64,
    /// Distillation weight; 0 disables the teacher.
    pub beta: f64,
    pub temperature: f64,
    pub regularizer: RegularizerMode,
    /// Step of the finite-difference Hessian-vector product.
    pub fd_delta: f64,
    /// Images per squared-gradient-norm term of the penalty.
    pub microbatch: usize,
    pub batch_size: usize,
    /// Train on L_A + L_F instead of L_A (heuristic baseline).
    pub sum_baseline: bool,
    pub seed: u64,
    pub precision: Precision,
    /// Validation images used for per-epoch metrics (0: all).
    pub eval_images: usize,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            epochs: 50,
            lr: 1e-5,
            lambda0: 1e-3,
            lambda_t: 5e-3,
            beta: 1.0,
            temperature: 1.0,
            regularizer: RegularizerMode::FdHvp,
            fd_delta: 1e-5,
            microbatch: 4,
            batch_size: 16,
            sum_baseline: false,
            seed: 0,
            precision: Precision::F64,
            eval_images: 0,
        }
    }
}

impl QatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("qat lr must be positive"));
        }
        if !(self.lambda0 >= 0.0 && self.lambda0 <= self.lambda_t) {
            return Err(Error::config("need 0 <= lambda0 <= lambda_t"));
        }
        if self.beta < 0.0 || self.temperature <= 0.0 {
            return Err(Error::config("beta must be non-negative and temperature positive"));
        }
        if self.microbatch == 0 || self.batch_size == 0 {
            return Err(Error::config("batch and microbatch sizes must be positive"));
        }
        Ok(())
    }

    /// Warnings that do not stop training.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.regularizer == RegularizerMode::ExactHvp && self.precision == Precision::F32 {
            w.push("exact_hvp at f32 loses second-order precision".into());
        }
        w
    }

    fn hvp_mode(&self) -> Option<HvpMode> {
        match self.regularizer {
            RegularizerMode::FdHvp => Some(HvpMode::FiniteDifference { delta: self.fd_delta }),
            RegularizerMode::ExactHvp => Some(HvpMode::Exact),
            RegularizerMode::Off => None,
        }
    }
}

/// `max(λ₀, λ_T · t / T)`.
pub fn lambda_schedule(t: usize, total: usize, lambda0: f64, lambda_t: f64) -> f64 {
    if total == 0 {
        return lambda_t.max(lambda0);
    }
    lambda0.max(lambda_t * t as f64 / total as f64)
}

/// Master weights, their quantizer and optimizer state.
#[derive(Clone, Debug)]
pub struct QatState {
    pub params: ParamSet,
    pub quant: QuantConfig,
    pub opt: Adam,
    pub step: usize,
}

impl QatState {
    pub fn new(params: ParamSet, quant: QuantConfig, lr: f64) -> Result<Self> {
        quant.validate(&params)?;
        Ok(QatState {
            params,
            quant,
            opt: Adam::new(lr),
            step: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean task loss (L_A, or L_A + L_F for the sum baseline).
    pub task: f64,
    pub distill: f64,
    /// Mean over microbatches of the squared critical-loss gradient norm.
    pub reg: f64,
    pub lambda: f64,
    /// `task + lambda * reg + beta * distill`.
    pub total: f64,
}

/// Static inputs of a QAT run.
pub struct QatContext<'a> {
    pub model: &'a ModelConfig,
    pub spec: &'a CriticalSpec,
    pub weights: &'a LossWeights,
    pub config: &'a QatConfig,
}

impl QatContext<'_> {
    fn task_objective(&self) -> Objective {
        if self.config.sum_baseline {
            Objective::Combined {
                spec: self.spec.clone(),
                alpha: 1.0,
            }
        } else {
            Objective::Overall
        }
    }

    /// Mean critical loss over `batch` as a closure over parameter leaves.
    fn critical_mean<'s>(&'s self, batch: &'s [&'s Sample]) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + 's {
        let obj = Objective::Critical { spec: self.spec.clone() };
        move |g, vars| {
            let mut acc: Option<Var> = None;
            for s in batch {
                let (l, b) = forward_graph(g, self.model, vars, &s.image)?;
                let v = objective_loss(g, l, b, &s.objects, &obj, self.weights)?;
                acc = Some(match acc {
                    None => v,
                    Some(a) => g.add(a, v)?,
                });
            }
            let total = acc.ok_or_else(|| Error::config("empty microbatch"))?;
            Ok(g.scale(total, 1.0 / batch.len() as f64))
        }
    }
}

/// `‖∇f‖²` and its gradient `2 H ∇f`.
pub fn squared_grad_norm_gradient<F>(f: &F, params: &[Tensor], mode: HvpMode, precision: Precision) -> Result<(f64, GradMap)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    match mode {
        HvpMode::Exact => {
            let mut g = Graph::with_precision(precision);
            let vars = bind_params(&mut g, params);
            let root = f(&mut g, &vars)?;
            let grads = g.backward(root, &vars, true)?;
            let mut acc: Option<Var> = None;
            for gi in grads {
                let t = g.inner(gi, gi)?;
                acc = Some(match acc {
                    None => t,
                    Some(a) => g.add(a, t)?,
                });
            }
            let sq = acc.ok_or_else(|| Error::config("no parameters"))?;
            let value = g.item(sq);
            let grad = if g.requires_grad(sq) {
                GradMap(g.gradients(sq, &vars)?)
            } else {
                GradMap::zeros_like(params)
            };
            Ok((value, grad))
        }
        HvpMode::FiniteDifference { .. } => {
            let (_, gr) = gradient_with(f, params, precision)?;
            let (_, _, hv) = hvp_with(f, params, &gr, mode, precision)?;
            Ok((gr.norm_sq(), hv.scale(2.0)))
        }
    }
}

/// One optimizer step on `batch`; gradients are taken at the fake-quantized
/// weights and applied to the master weights.
pub fn qat_step(
    state: &mut QatState,
    batch: &[&Sample],
    teacher: Option<&[&DetectionSet]>,
    ctx: &QatContext,
    lambda: f64,
    lr: f64,
) -> Result<StepMetrics> {
    let cfg = ctx.config;
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let q = fake_quant(&state.params, &state.quant)?;
    let tensors = q.tensors();
    let task_obj = ctx.task_objective();
    let use_distill = cfg.beta > 0.0;
    if use_distill && teacher.map_or(true, |t| t.len() != batch.len()) {
        return Err(Error::config("distillation needs one teacher output per image"));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    let inv = 1.0 / batch.len() as f64;
    let mut grad = GradMap::zeros_like(&tensors);
    let mut m = StepMetrics {
        lambda,
        ..Default::default()
    };
    let mut err = None;
    par_for_each_ordered(
        &idx,
        |&i| -> Result<(f64, f64, GradMap)> {
            let mut g = Graph::with_precision(cfg.precision);
            let vars = bind_params(&mut g, &tensors);
            let (l, b) = forward_graph(&mut g, ctx.model, &vars, &batch[i].image)?;
            let task = objective_loss(&mut g, l, b, &batch[i].objects, &task_obj, ctx.weights)?;
            let (root, d) = if use_distill {
                let t = teacher.expect("checked above")[i];
                let d = distill_loss(&mut g, l, b, t, cfg.temperature)?;
                let bd = g.scale(d, cfg.beta);
                (g.add(task, bd)?, g.item(d))
            } else {
                (task, 0.0)
            };
            let grads = g.gradients(root, &vars)?;
            Ok((g.item(task), d, GradMap(grads)))
        },
        |_, r| match r {
            Ok((t, d, gr)) => {
                m.task += t * inv;
                m.distill += d * inv;
                grad.axpy(inv, &gr);
            }
            Err(e) => {
                err.get_or_insert(e);
            }
        },
    );
    if let Some(e) = err {
        return Err(e);
    }
    if let (Some(mode), true) = (cfg.hvp_mode(), lambda > 0.0) {
        let micro: Vec<&[&Sample]> = batch.chunks(cfg.microbatch).collect();
        let minv = 1.0 / micro.len() as f64;
        let parts = par_map(&micro, |mb| {
            squared_grad_norm_gradient(&ctx.critical_mean(mb), &tensors, mode, cfg.precision)
        });
        for p in parts {
            let (r, gr) = p?;
            m.reg += r * minv;
            grad.axpy(lambda * minv, &gr);
        }
    }
    m.total = m.task + lambda * m.reg + cfg.beta * m.distill;
    state.opt.step(&mut state.params, &grad, lr);
    state.step += 1;
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean per-step objective and penalty during the epoch.
    pub train_total: f64,
    pub train_reg: f64,
    /// Measured at the quantized weights on the evaluation images.
    pub loss_overall: f64,
    pub loss_critical: f64,
    /// Mean per-image squared critical-loss gradient norm.
    pub trace_f: f64,
    pub map_overall: f64,
    pub map_critical: f64,
    /// Mean AP over the critical classes only.
    pub map_critical_only: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub format_version: u32,
    pub records: Vec<EpochMetrics>,
}

impl TrainLog {
    /// Mean of the last `min(5, epochs)` records.
    pub fn summary(&self) -> Option<EpochMetrics> {
        let n = self.records.len().min(5);
        if n == 0 {
            return None;
        }
        let tail = &self.records[self.records.len() - n..];
        let mean = |f: fn(&EpochMetrics) -> f64| tail.iter().map(f).sum::<f64>() / n as f64;
        Some(EpochMetrics {
            epoch: tail[n - 1].epoch,
            lambda: mean(|r| r.lambda),
            train_total: mean(|r| r.train_total),
            train_reg: mean(|r| r.train_reg),
            loss_overall: mean(|r| r.loss_overall),
            loss_critical: mean(|r| r.loss_critical),
            trace_f: mean(|r| r.trace_f),
            map_overall: mean(|r| r.map_overall),
            map_critical: mean(|r| r.map_critical),
            map_critical_only: mean(|r| r.map_critical_only),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,lambda,train_total,train_reg,loss_overall,loss_critical,trace_f,map_overall,map_critical,map_critical_only\n",
        );
        for r in &self.records {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.epoch,
                r.lambda,
                r.train_total,
                r.train_reg,
                r.loss_overall,
                r.loss_critical,
                r.trace_f,
                r.map_overall,
                r.map_critical,
                r.map_critical_only
            ));
        }
        s
    }
}

/// Overall and critical losses, critical Fisher trace and both mAPs of the
/// fake-quantized model on `data`.
pub fn quantized_metrics(
    model: &ModelConfig,
    params: &ParamSet,
    quant: &QuantConfig,
    data: &[Sample],
    spec: &CriticalSpec,
    w: &LossWeights,
    precision: Precision,
) -> Result<(f64, f64, f64, f64, f64, f64)> {
    let q = fake_quant(params, quant)?;
    let tensors = q.tensors();
    let crit = Objective::Critical { spec: spec.clone() };
    let per = par_map(data, |s| -> Result<(f64, f64, f64)> {
        let mut g = Graph::with_precision(precision);
        let vars = bind_params(&mut g, &tensors);
        let (l, b) = forward_graph(&mut g, model, &vars, &s.image)?;
        let la = objective_loss(&mut g, l, b, &s.objects, &Objective::Overall, w)?;
        let lf = objective_loss(&mut g, l, b, &s.objects, &crit, w)?;
        let gr = g.gradients(lf, &vars)?;
        Ok((g.item(la), g.item(lf), GradMap(gr).norm_sq()))
    });
    let (mut la, mut lf, mut tr) = (0.0, 0.0, 0.0);
    let inv = 1.0 / data.len().max(1) as f64;
    for p in per {
        let (a, f, t) = p?;
        la += a * inv;
        lf += f * inv;
        tr += t * inv;
    }
    let preds = predict(model, &q, data, precision)?;
    let gts: Vec<_> = data.iter().map(|s| s.objects.clone()).collect();
    let overall = eval_map(&preds, &gts, None);
    let critical = eval_map(&preds, &gts, Some(spec));
    Ok((la, lf, tr, overall.map, critical.map, critical.map_critical_only))
}

/// Runs `config.epochs` epochs of QAT from `params` under `quant`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &ModelConfig,
    params: ParamSet,
    quant: QuantConfig,
    teacher: Option<&ParamSet>,
    train_data: &[Sample],
    eval_data: &[Sample],
    spec: &CriticalSpec,
    weights: &LossWeights,
    config: &QatConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ParamSet, TrainLog)> {
    config.validate()?;
    model.validate()?;
    if spec.num_classes != model.num_classes {
        return Err(Error::config(format!(
            "critical spec has {} classes, model has {}",
            spec.num_classes, model.num_classes
        )));
    }
    let side = model.image_size;
    if let Some(s) = train_data.iter().chain(eval_data).find(|s| s.image.shape() != [side, side, 3]) {
        return Err(Error::config(format!(
            "dataset image shape {:?} does not match model image size {side}",
            s.image.shape()
        )));
    }
    if train_data.iter().chain(eval_data).any(|s| s.objects.len() > model.queries) {
        return Err(Error::config("dataset has more objects per image than model queries"));
    }
    let mut log = TrainLog {
        format_version: crate::model::io::FORMAT_VERSION,
        records: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok((params, log));
    }
    if train_data.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let eval_data = if config.eval_images > 0 && config.eval_images < eval_data.len() {
        &eval_data[..config.eval_images]
    } else {
        eval_data
    };
    let teacher_out: Option<Vec<DetectionSet>> = match (config.beta > 0.0, teacher) {
        (false, _) => None,
        (true, Some(t)) => Some(predict(model, t, train_data, config.precision)?),
        (true, None) => return Err(Error::config("beta > 0 needs a teacher checkpoint")),
    };
    let ctx = QatContext {
        model,
        spec,
        weights,
        config,
    };
    let mut state = QatState::new(params, quant, config.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..config.epochs {
        let lambda = lambda_schedule(epoch, config.epochs, config.lambda0, config.lambda_t);
        order.shuffle(&mut rng);
        let (mut total, mut reg, mut steps) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_data[i]).collect();
            let t: Option<Vec<&DetectionSet>> = teacher_out.as_ref().map(|o| chunk.iter().map(|&i| &o[i]).collect());
            let m = qat_step(&mut state, &batch, t.as_deref(), &ctx, lambda, config.lr)?;
            total += m.total;
            reg += m.reg;
            steps += 1.0;
        }
        let (la, lf, tr, mo, mc, mco) =
            quantized_metrics(model, &state.params, &state.quant, eval_data, spec, weights, config.precision)?;
        let rec = EpochMetrics {
            epoch: epoch + 1,
            lambda,
            train_total: total / steps,
            train_reg: reg / steps,
            loss_overall: la,
            loss_critical: lf,
            trace_f: tr,
            map_overall: mo,
            map_critical: mc,
            map_critical_only: mco,
        };
        on_epoch(&rec);
        log.records.push(rec);
    }
    Ok((state.params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_dataset, init_model, DatasetSpec};

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda_schedule(0, 50, 1e-3, 5e-3), 1e-3);
        assert_eq!(lambda_schedule(50, 50, 1e-3, 5e-3), 5e-3);
        assert!((lambda_schedule(10, 50, 1e-3, 5e-3) - 1e-3).abs() < 1e-18);
        assert!((lambda_schedule(25, 50, 1e-3, 5e-3) - 2.5e-3).abs() < 1e-18);
    }

    fn setup() -> (ModelConfig, ParamSet, Vec<Sample>, CriticalSpec) {
        let model = ModelConfig {
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 8,
            queries: 4,
            ..Default::default()
        };
        let spec = DatasetSpec {
            train_images: 4,
            val_images: 2,
            ..Default::default()
        };
        let (train, _) = gen_dataset(&spec).unwrap();
        (
            model.clone(),
            init_model(&model).unwrap(),
            train,
            CriticalSpec::new(vec![1, 2], 8).unwrap(),
        )
    }

    #[test]
    fn fd_and_exact_penalty_gradients_agree() {
        let (model, params, data, spec) = setup();
        let w = LossWeights::default();
        let cfg = QatConfig::default();
        let ctx = QatContext {
            model: &model,
            spec: &spec,
            weights: &w,
            config: &cfg,
        };
        let batch: Vec<&Sample> = data.iter().take(2).collect();
        let f = ctx.critical_mean(&batch);
        let t = params.tensors();
        let (ve, ge) = squared_grad_norm_gradient(&f, &t, HvpMode::Exact, Precision::F64).unwrap();
        let (vf, gf) = squared_grad_norm_gradient(&f, &t, HvpMode::finite_difference(), Precision::F64).unwrap();
        assert!((ve - vf).abs() <= 1e-12 * ve);
        let rel = ge.sub(&gf).norm() / ge.norm();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn zero_penalty_and_distill_is_plain_ste() {
        let (model, params, data, spec) = setup();
        let w = LossWeights::default();
        let cfg = QatConfig {
            beta: 0.0,
            ..Default::default()
        };
        let ctx = QatContext {
            model: &model,
            spec: &spec,
            weights: &w,
            config: &cfg,
        };
        let quant = QuantConfig::uniform(&params, 4);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut s = QatState::new(params.clone(), quant.clone(), cfg.lr).unwrap();
        let m = qat_step(&mut s, &batch, None, &ctx, 0.0, cfg.lr).unwrap();
        assert_eq!(m.reg, 0.0);
        assert_eq!(m.total, m.task);

        let q = fake_quant(&params, &quant).unwrap().tensors();
        let mut grad = GradMap::zeros_like(&q);
        for smp in &batch {
            let (_, g) = crate::train::sample_gradient(&model, &q, smp, &Objective::Overall, &w, Precision::F64).unwrap();
            grad.axpy(1.0 / batch.len() as f64, &g);
        }
        let mut expect = params.clone();
        Adam::new(cfg.lr).step(&mut expect, &grad, cfg.lr);
        assert_eq!(s.params, expect);
    }

    #[test]
    fn zero_lr_keeps_weights_and_reports_bookkeeping() {
        let (model, params, data, spec) = setup();
        let w = LossWeights::default();
        let cfg = QatConfig::default();
        let ctx = QatContext {
            model: &model,
            spec: &spec,
            weights: &w,
            config: &cfg,
        };
        let teacher = predict(&model, &params, &data, Precision::F64).unwrap();
        let t: Vec<&DetectionSet> = teacher.iter().collect();
        let batch: Vec<&Sample> = data.iter().collect();
        let mut s = QatState::new(params.clone(), QuantConfig::uniform(&params, 4), cfg.lr).unwrap();
        let m = qat_step(&mut s, &batch, Some(&t), &ctx, 2e-3, 0.0).unwrap();
        assert_eq!(s.params, params);
        assert!(m.reg > 0.0 && m.distill >= 0.0);
        assert_eq!(m.total, m.task + 2e-3 * m.reg + cfg.beta * m.distill);
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_identity() {
        let (model, params, data, spec) = setup();
        let w = LossWeights::default();
        let cfg = QatConfig {
            epochs: 2,
            batch_size: 2,
            microbatch: 1,
            ..Default::default()
        };
        let q = QuantConfig::uniform(&params, 4);
        let run = || train(&model, params.clone(), q.clone(), Some(&params), &data, &data[..2], &spec, &w, &cfg, |_| {}).unwrap();
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert_eq!(l1.records.len(), 2);
        assert!(l1.records.iter().all(|r| r.trace_f >= 0.0 && r.train_reg >= 0.0));
        let zero = QatConfig { epochs: 0, ..cfg };
        let (p0, l0) = train(&model, params.clone(), q, None, &data, &data, &spec, &w, &zero, |_| {}).unwrap();
        assert_eq!(p0, params);
        assert!(l0.records.is_empty());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let (model, params, data, _) = setup();
        let spec = CriticalSpec::new(vec![1], 5).unwrap();
        let r = train(
            &model,
            params.clone(),
            QuantConfig::uniform(&params, 4),
            None,
            &data,
            &data,
            &spec,
            &LossWeights::default(),
            &QatConfig {
                beta: 0.0,
                ..Default::default()
            },
            |_| {},
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn summary_averages_last_five() {
        let log = TrainLog {
            format_version: 1,
            records: (1..=7)
                .map(|e| EpochMetrics {
                    epoch: e,
                    trace_f: e as f64,
                    ..Default::default()
                })
                .collect(),
        };
        assert_eq!(log.summary().unwrap().trace_f, 5.0);
    }
}
