//! Empirical Fisher diagonal, Fisher trace, quantization loss-change
//! prediction, sharpness and a Hutchinson Hessian-trace baseline.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate, gradient, hvp, offset, GradMap, Graph, HvpMode, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::{par_for_each_ordered, par_map};
use crate::model::{forward_graph, ModelConfig, Sample};
use crate::objectives::{objective_loss, LossWeights, Objective};
use crate::params::ParamSet;
use crate::quantizer::{quant_error, QuantConfig};
use crate::train::sample_gradient;

pub const FISHER_MAGIC: &[u8; 4] = b"CQFD";

/// Per-parameter mean of squared per-sample gradients, congruent to the
/// flat tensor list of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct FisherDiag {
    pub objective: String,
    pub samples: usize,
    pub seed: u64,
    pub diag: GradMap,
}

/// Everything needed to evaluate a per-sample objective on the detector.
#[derive(Clone, Debug)]
pub struct DetectorObjective<'a> {
    pub model: &'a ModelConfig,
    pub objective: &'a Objective,
    pub weights: &'a LossWeights,
    pub precision: Precision,
}

impl DetectorObjective<'_> {
    /// Objective node of one image on bound parameters.
    pub fn build(&self, g: &mut Graph, vars: &[Var], sample: &Sample) -> Result<Var> {
        let (l, b) = forward_graph(g, self.model, vars, &sample.image)?;
        objective_loss(g, l, b, &sample.objects, self.objective, self.weights)
    }

    pub fn sample_gradient(&self, tensors: &[Tensor], sample: &Sample) -> Result<(f64, GradMap)> {
        sample_gradient(self.model, tensors, sample, self.objective, self.weights, self.precision)
    }

    /// Mean objective over `data` as a closure for the generic tools.
    pub fn mean_over<'s>(&'s self, data: &'s [Sample]) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> + 's {
        move |g, vars| {
            let mut acc: Option<Var> = None;
            for s in data {
                let l = self.build(g, vars, s)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            let total = acc.ok_or_else(|| Error::config("empty data subset"))?;
            Ok(g.scale(total, 1.0 / data.len() as f64))
        }
    }

    /// Mean objective value over `data` at `tensors`.
    pub fn mean_loss(&self, tensors: &[Tensor], data: &[Sample]) -> Result<f64> {
        let vals = par_map(data, |s| {
            let mut g = Graph::with_precision(self.precision);
            let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
            self.build(&mut g, &vars, s).map(|v| g.item(v))
        });
        let mut total = 0.0;
        for v in vals {
            total += v?;
        }
        Ok(total / data.len() as f64)
    }
}

/// Empirical Fisher diagonal over `data`, accumulated in sample order.
pub fn fisher_diag(obj: &DetectorObjective, params: &ParamSet, data: &[Sample], seed: u64) -> Result<FisherDiag> {
    if data.is_empty() {
        return Err(Error::config("Fisher estimation needs at least one sample"));
    }
    let tensors = params.tensors();
    let mut diag = GradMap::zeros_like(&tensors);
    let inv = 1.0 / data.len() as f64;
    let mut err = None;
    par_for_each_ordered(
        data,
        |s| obj.sample_gradient(&tensors, s),
        |_, r| match r {
            Ok((_, g)) => accumulate_squares(&mut diag, &g, inv),
            Err(e) => {
                err.get_or_insert(e);
            }
        },
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(FisherDiag {
        objective: obj.objective.tag(),
        samples: data.len(),
        seed,
        diag,
    })
}

/// `acc += scale * g ⊙ g`.
pub fn accumulate_squares(acc: &mut GradMap, g: &GradMap, scale: f64) {
    for (a, gi) in acc.0.iter_mut().zip(&g.0) {
        for (x, &v) in a.data_mut().iter_mut().zip(gi.data()) {
            *x += scale * v * v;
        }
    }
}

/// Σ F over all tensors, or over one layer's weight and bias.
pub fn fisher_trace(f: &FisherDiag, params: &ParamSet, layer: Option<&str>) -> Result<f64> {
    let slots = params.slots();
    let pick: Vec<usize> = match layer {
        None => (0..f.diag.0.len()).collect(),
        Some(name) => {
            let (w, b) = slots[params.layer_index(name)?];
            std::iter::once(w).chain(b).collect()
        }
    };
    Ok(pick
        .into_iter()
        .fold(0.0, |acc, i| acc + f.diag.0[i].data().iter().fold(0.0, |a, &x| a + x)))
}

/// Σ_j Δ_j² F_j over one layer's weights at `bits`.
pub fn layer_sensitivity(weight: &Tensor, fisher: &Tensor, bits: u32) -> f64 {
    quant_error(weight.data(), bits)
        .iter()
        .zip(fisher.data())
        .fold(0.0, |acc, (d, f)| acc + d * d * f)
}

/// Predicted loss increase Σ_j Δ_j² F_j over every quantized layer.
pub fn predict_loss_change(f: &FisherDiag, params: &ParamSet, config: &QuantConfig) -> Result<f64> {
    config.validate(params)?;
    let slots = params.slots();
    let mut total = 0.0;
    for (layer, (w, _)) in params.layers().iter().zip(slots) {
        if let Some(&bits) = config.bits.get(&layer.name) {
            total += layer_sensitivity(&layer.weight, &f.diag.0[w], bits);
        }
    }
    Ok(total)
}

/// ρ‖g‖₂, the maximum of the linearised loss increase on the ρ-ball.
pub fn sharpness_closed_form(g: &GradMap, rho: f64) -> f64 {
    rho * g.norm()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub rho: f64,
    pub closed_form: f64,
    /// Max over the gradient-aligned and random perturbations.
    pub empirical_max: f64,
    pub gradient_aligned: f64,
    /// Largest increase among the random sphere directions.
    pub random_max: f64,
    pub trials: usize,
    /// tr(I) of the same objective when known.
    pub trace_proxy: Option<f64>,
}

/// Uniform direction on the unit sphere congruent to `like`.
pub fn random_unit(rng: &mut ChaCha8Rng, like: &[Tensor]) -> GradMap {
    let mut v = GradMap(
        like.iter()
            .map(|t| {
                let n = t.len();
                Tensor::from_vec(t.shape(), (0..n).map(|_| standard_normal(rng)).collect())
            })
            .collect(),
    );
    let n = v.norm();
    v = v.scale(1.0 / n);
    v
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Worst loss increase over `ρ g/‖g‖` and `trials` random points of the ρ-sphere.
pub fn sharpness_empirical<F>(f: &F, params: &[Tensor], rho: f64, trials: usize, seed: u64) -> Result<SharpnessReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if trials == 0 {
        return Err(Error::config("sharpness needs at least one trial"));
    }
    let (base, g) = gradient(f, params)?;
    let gn = g.norm();
    let gradient_aligned = if gn > 0.0 {
        evaluate(f, &offset(params, rho / gn, &g), Precision::F64)? - base
    } else {
        f64::NEG_INFINITY
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_max = f64::NEG_INFINITY;
    for _ in 0..trials {
        let d = random_unit(&mut rng, params);
        let v = evaluate(f, &offset(params, rho, &d), Precision::F64)? - base;
        random_max = random_max.max(v);
    }
    Ok(SharpnessReport {
        rho,
        closed_form: rho * gn,
        empirical_max: gradient_aligned.max(random_max),
        gradient_aligned,
        random_max,
        trials,
        trace_proxy: None,
    })
}

/// Rademacher vector congruent to `like`.
pub fn rademacher(rng: &mut ChaCha8Rng, like: &[Tensor]) -> GradMap {
    GradMap(
        like.iter()
            .map(|t| {
                let n = t.len();
                Tensor::from_vec(
                    t.shape(),
                    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
                )
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HutchinsonEstimate {
    pub trace: f64,
    pub probes: usize,
    pub seconds: f64,
}

/// (1/P) Σ vᵀHv with Rademacher probes and exact Hessian-vector products.
pub fn hessian_trace_hutchinson<F>(f: &F, params: &[Tensor], probes: usize, seed: u64) -> Result<HutchinsonEstimate>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if probes == 0 {
        return Err(Error::config("Hutchinson needs at least one probe"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..probes {
        let v = rademacher(&mut rng, params);
        let hv = hvp(f, params, &v, HvpMode::Exact)?;
        total += v.dot(&hv);
    }
    Ok(HutchinsonEstimate {
        trace: total / probes as f64,
        probes,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FisherHeader {
    format_version: u32,
    objective: String,
    samples: usize,
    seed: u64,
    layers: Vec<FisherLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FisherLayer {
    name: String,
    weight_shape: Vec<usize>,
    bias_shape: Option<Vec<usize>>,
    trace: f64,
}

impl FisherDiag {
    /// Container with a JSON manifest followed by each layer's weight then
    /// bias diagonal as f64 LE, in layer order.
    pub fn to_bytes(&self, params: &ParamSet) -> Result<Vec<u8>> {
        let slots = params.slots();
        let mut layers = Vec::new();
        let mut payload = Vec::new();
        for (l, (w, b)) in params.layers().iter().zip(&slots) {
            let trace = fisher_trace(self, params, Some(&l.name))?;
            layers.push(FisherLayer {
                name: l.name.clone(),
                weight_shape: self.diag.0[*w].shape().to_vec(),
                bias_shape: b.map(|b| self.diag.0[b].shape().to_vec()),
                trace,
            });
            for &i in std::iter::once(w).chain(b.iter()) {
                for x in self.diag.0[i].data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&FisherHeader {
            format_version: crate::model::io::FORMAT_VERSION,
            objective: self.objective.clone(),
            samples: self.samples,
            seed: self.seed,
            layers,
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(FISHER_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != FISHER_MAGIC {
            return Err(Error::Format("not a Fisher file".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(8..8 + n).ok_or_else(|| Error::Format("truncated header".into()))?;
        let h: FisherHeader = serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if h.format_version != crate::model::io::FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", h.format_version)));
        }
        let mut rest = &bytes[8 + n..];
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let len: usize = shape.iter().product();
            if rest.len() < len * 8 {
                return Err(Error::Format("truncated payload".into()));
            }
            let (a, b) = rest.split_at(len * 8);
            rest = b;
            Ok(Tensor::from_vec(
                shape,
                a.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ))
        };
        let mut diag = Vec::new();
        for l in &h.layers {
            diag.push(take(&l.weight_shape)?);
            if let Some(s) = &l.bias_shape {
                diag.push(take(s)?);
            }
        }
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(FisherDiag {
            objective: h.objective,
            samples: h.samples,
            seed: h.seed,
            diag: GradMap(diag),
        })
    }

    pub fn save(&self, params: &ParamSet, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(params)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_bytes(&bytes)
    }

    /// Checks the diagonal has the layout of `params`.
    pub fn check_congruent(&self, params: &ParamSet) -> Result<()> {
        let t = params.tensors();
        if t.len() != self.diag.0.len() || t.iter().zip(&self.diag.0).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::config("Fisher diagonal does not match the checkpoint layout"));
        }
        Ok(())
    }
}
