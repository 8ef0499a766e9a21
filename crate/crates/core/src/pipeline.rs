//! Experiment stages shared by the command-line driver and the test suites.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, build_table, BitAssignment, SensitivityTable};
use crate::autodiff::Precision;
use crate::error::{Error, Result};
use crate::model::{init_model, Checkpoint, DatasetSpec, ModelConfig, Sample};
use crate::objectives::{eval_map, CriticalSpec, LossWeights, MapReport, Objective};
use crate::params::ParamSet;
use crate::qat::QatConfig;
use crate::quantizer::{fake_quant, QuantConfig, MAX_BITS};
use crate::sensitivity::{fisher_diag, DetectorObjective, FisherDiag};
use crate::train::{predict, train_fp, EpochRecord, TrainConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Every knob of a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub qat: QatConfig,
    #[serde(default)]
    pub loss: LossWeights,
    /// Extra named critical sets; super-categories are always available by name.
    #[serde(default)]
    pub critical: Vec<CriticalSpec>,
    /// Weight of the overall loss in the combined Fisher objective.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Average bits per quantizable weight.
    #[serde(default = "four")]
    pub budget_bits: f64,
    /// Training images used for Fisher estimation (0: all).
    #[serde(default)]
    pub fisher_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn four() -> f64 {
    4.0
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: RUN_CONFIG_VERSION,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            qat: QatConfig::default(),
            loss: LossWeights::default(),
            critical: Vec::new(),
            alpha: 1.0,
            budget_bits: 4.0,
            fisher_samples: 0,
            seed: 0,
            out: default_out(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::config(format!("config file {} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported run config version {} (expected {RUN_CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.dataset.check_model(&self.model)?;
        self.train.validate()?;
        self.qat.validate()?;
        for c in &self.critical {
            c.validate()?;
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha must be non-negative"));
        }
        if !(self.budget_bits.is_finite() && self.budget_bits > 0.0) {
            return Err(Error::config("budget_bits must be positive"));
        }
        Ok(())
    }

    /// Applies `seed` to model init, FP training and QAT.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.qat.seed = seed;
        self
    }

    /// Named critical set: explicit entries first, then super-categories.
    pub fn critical_spec(&self, name: &str) -> Result<CriticalSpec> {
        if let Some(c) = self.critical.iter().find(|c| c.name.as_deref() == Some(name)) {
            return Ok(c.clone());
        }
        let sc = self
            .dataset
            .super_categories
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::config(format!("unknown critical group `{name}`")))?;
        Ok(CriticalSpec::new(sc.classes.clone(), self.dataset.num_classes)?.named(name))
    }

    pub fn group_specs(&self) -> Result<Vec<CriticalSpec>> {
        self.dataset
            .super_categories
            .iter()
            .map(|s| self.critical_spec(&s.name))
            .collect()
    }

    pub fn fisher_subset<'a>(&self, train: &'a [Sample]) -> &'a [Sample] {
        if self.fisher_samples > 0 && self.fisher_samples < train.len() {
            &train[..self.fisher_samples]
        } else {
            train
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Uniform,
    FisherOverall,
    FisherCritical,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Uniform => "uniform",
            Scheme::FisherOverall => "fisher-overall",
            Scheme::FisherCritical => "fisher-critical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Scheme::Uniform),
            "fisher-overall" => Ok(Scheme::FisherOverall),
            "fisher-critical" => Ok(Scheme::FisherCritical),
            _ => Err(Error::config(format!("unknown scheme `{s}`"))),
        }
    }

    /// Fisher objective for this scheme, if it uses one.
    pub fn objective(self, spec: Option<&CriticalSpec>, alpha: f64) -> Result<Option<Objective>> {
        match self {
            Scheme::Uniform => Ok(None),
            Scheme::FisherOverall => Ok(Some(Objective::Overall)),
            Scheme::FisherCritical => {
                let spec = spec.ok_or_else(|| Error::config("fisher-critical needs --critical"))?;
                Ok(Some(Objective::Combined {
                    spec: spec.clone(),
                    alpha,
                }))
            }
        }
    }
}

/// FP training from the config's initialization.
pub fn train_full_precision(
    cfg: &RunConfig,
    train: &[Sample],
    on_epoch: impl FnMut(&EpochRecord, &ParamSet),
) -> Result<(ParamSet, Vec<EpochRecord>)> {
    let init = init_model(&cfg.model)?;
    train_fp(&cfg.model, init, train, &cfg.train, &cfg.loss, on_epoch)
}

pub fn fisher_for(cfg: &RunConfig, params: &ParamSet, train: &[Sample], objective: &Objective) -> Result<FisherDiag> {
    let obj = DetectorObjective {
        model: &cfg.model,
        objective,
        weights: &cfg.loss,
        precision: cfg.train.precision,
    };
    fisher_diag(&obj, params, cfg.fisher_subset(train), cfg.seed)
}

/// Uniform bits at `floor(budget)`, capped at the widest choice.
pub fn uniform_assignment(params: &ParamSet, budget_bits: f64) -> QuantConfig {
    QuantConfig::uniform(params, (budget_bits.floor() as u32).min(MAX_BITS))
}

/// Table and optimal assignment at an average-bits budget.
pub fn fisher_assignment(params: &ParamSet, fisher: &FisherDiag, budget_bits: f64) -> Result<(SensitivityTable, BitAssignment)> {
    let table = build_table(params, fisher)?;
    let a = allocate(&table, table.budget_for_average(budget_bits))?;
    Ok((table, a))
}

/// Overall report plus one critical report per super-category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub checkpoint: String,
    pub average_bits: Option<f64>,
    pub overall: MapReport,
    pub critical: BTreeMap<String, MapReport>,
}

impl EvalReport {
    /// Critical mAP of `group` over its own classes.
    pub fn critical_map(&self, group: &str) -> Option<f64> {
        self.critical.get(group).map(|r| r.map_critical_only)
    }
}

pub fn evaluate(
    name: &str,
    model: &ModelConfig,
    params: &ParamSet,
    quant: Option<&QuantConfig>,
    val: &[Sample],
    groups: &[CriticalSpec],
    precision: Precision,
) -> Result<EvalReport> {
    let p = match quant {
        Some(q) => fake_quant(params, q)?,
        None => params.clone(),
    };
    let preds = predict(model, &p, val, precision)?;
    let gts: Vec<_> = val.iter().map(|s| s.objects.clone()).collect();
    let mut critical = BTreeMap::new();
    for g in groups {
        let name = g.name.clone().unwrap_or_else(|| format!("{:?}", g.critical));
        critical.insert(name, eval_map(&preds, &gts, Some(g)));
    }
    Ok(EvalReport {
        format_version: crate::model::io::FORMAT_VERSION,
        checkpoint: name.to_string(),
        average_bits: quant.map(|q| q.average_bits(params)),
        overall: eval_map(&preds, &gts, None),
        critical,
    })
}

pub fn evaluate_checkpoint(name: &str, ck: &Checkpoint, val: &[Sample], groups: &[CriticalSpec]) -> Result<EvalReport> {
    evaluate(name, &ck.model, &ck.params, ck.quant.as_ref(), val, groups, Precision::F64)
}

/// Writes `bytes` only when the file is absent or differs.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    if fs::read(path).ok().as_deref() == Some(bytes) {
        return Ok(());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value)?;
    s.push(b'\n');
    write_artifact(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
