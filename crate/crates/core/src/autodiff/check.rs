//! Gradients, Hessian-vector products and finite-difference checks over
//! closures that build a scalar from a list of parameter leaves.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Precision, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Gradient arrays congruent to a parameter list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradMap(pub Vec<Tensor>);

impl GradMap {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        GradMap(params.iter().map(|p| Tensor::zeros(p.shape())).collect())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn dot(&self, other: &GradMap) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |acc, (a, b)| acc + a.dot(b))
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, c: f64) -> GradMap {
        GradMap(self.0.iter().map(|t| t.scale(c)).collect())
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &GradMap) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.axpy(c, b);
        }
    }

    pub fn sub(&self, other: &GradMap) -> GradMap {
        GradMap(self.0.iter().zip(&other.0).map(|(a, b)| a.sub(b)).collect())
    }

    pub fn numel(&self) -> usize {
        self.0.iter().map(Tensor::len).sum()
    }
}

/// Parameter tensors plus `c * dir`.
pub fn offset(params: &[Tensor], c: f64, dir: &GradMap) -> Vec<Tensor> {
    params
        .iter()
        .zip(&dir.0)
        .map(|(p, d)| {
            let mut q = p.clone();
            q.axpy(c, d);
            q
        })
        .collect()
}

fn l2_norm(ts: &[Tensor]) -> f64 {
    ts.iter().fold(0.0, |acc, t| acc + t.norm_sq()).sqrt()
}

/// Value of the scalar built by `f` at `params`.
pub fn evaluate<F>(f: &F, params: &[Tensor], precision: Precision) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_precision(precision);
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    Ok(g.item(root))
}

/// Scalar value and its exact reverse-mode gradient.
pub fn gradient<F>(f: &F, params: &[Tensor]) -> Result<(f64, GradMap)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_with(f, params, Precision::F64)
}

pub fn gradient_with<F>(f: &F, params: &[Tensor], precision: Precision) -> Result<(f64, GradMap)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_precision(precision);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.gradients(root, &vars)?;
    Ok((g.item(root), GradMap(grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    /// Differentiate `<grad f, v>` through the recorded backward pass.
    Exact,
    /// Central difference of gradients with step `delta (1 + |theta|) / |v|`.
    FiniteDifference { delta: f64 },
}

impl HvpMode {
    pub fn finite_difference() -> Self {
        HvpMode::FiniteDifference { delta: 1e-5 }
    }
}

/// Hessian-vector product `H v` of the scalar built by `f`.
pub fn hvp<F>(f: &F, params: &[Tensor], v: &GradMap, mode: HvpMode) -> Result<GradMap>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    hvp_with(f, params, v, mode, Precision::F64).map(|(_, _, hv)| hv)
}

/// Like [`hvp`], also returning the value and gradient at `params`
/// (the gradient is free in exact mode).
pub fn hvp_with<F>(
    f: &F,
    params: &[Tensor],
    v: &GradMap,
    mode: HvpMode,
    precision: Precision,
) -> Result<(f64, Option<GradMap>, GradMap)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let vnorm = v.norm();
    match mode {
        HvpMode::Exact => {
            let mut g = Graph::with_precision(precision);
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let root = f(&mut g, &vars)?;
            let grads = g.backward(root, &vars, true)?;
            let value = g.item(root);
            let first = GradMap(grads.iter().map(|&x| g.value(x).clone()).collect());
            if vnorm == 0.0 {
                return Ok((value, Some(first), GradMap::zeros_like(params)));
            }
            let mut acc: Option<Var> = None;
            for (&gi, vi) in grads.iter().zip(&v.0) {
                let vc = g.constant(vi.clone());
                let term = g.inner(gi, vc)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            let dot = acc.expect("at least one parameter");
            let hv = if g.requires_grad(dot) {
                GradMap(g.gradients(dot, &vars)?)
            } else {
                GradMap::zeros_like(params)
            };
            Ok((value, Some(first), hv))
        }
        HvpMode::FiniteDifference { delta } => {
            if vnorm == 0.0 {
                let value = evaluate(f, params, precision)?;
                return Ok((value, None, GradMap::zeros_like(params)));
            }
            let eps = delta * (1.0 + l2_norm(params)) / vnorm;
            let (_, gp) = gradient_with(f, &offset(params, eps, v), precision)?;
            let (_, gm) = gradient_with(f, &offset(params, -eps, v), precision)?;
            let hv = gp.sub(&gm).scale(1.0 / (2.0 * eps));
            let value = evaluate(f, params, precision)?;
            Ok((value, None, hv))
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            floor: 1e-6,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// max |a - n| / max(|a|, |n|, floor) over checked elements.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub per_param_max_rel: Vec<f64>,
}

/// Compares reverse-mode gradients with central differences element by element.
pub fn check_gradient<F>(f: &F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = gradient(f, params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        per_param_max_rel: vec![0.0; params.len()],
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let picks: Vec<usize> = match opts.max_per_param {
            Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + opts.step;
            let fp = evaluate(f, &work, Precision::F64)?;
            work[pi].data_mut()[j] = orig - opts.step;
            let fm = evaluate(f, &work, Precision::F64)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.0[pi].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.per_param_max_rel[pi] {
                report.per_param_max_rel[pi] = rel;
            }
            if rel > report.max_rel_error || report.worst.is_none() {
                if rel >= report.max_rel_error {
                    report.worst = Some((pi, j));
                }
                report.max_rel_error = report.max_rel_error.max(rel);
            }
        }
    }
    Ok(report)
}
