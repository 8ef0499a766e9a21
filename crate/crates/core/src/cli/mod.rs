//! Command-line pipeline driver.
//!
//! Artifacts of one run live in a single directory:
//!
//! | stage     | writes                                              |
//! |-----------|-----------------------------------------------------|
//! | gen-data  | `dataset.cqds`                                      |
//! | train-fp  | `fp.cqck`, `fp_train.csv`                           |
//! | sens      | `fisher_<tag>.cqfd`, `sensitivity_<tag>.csv`        |
//! | allocate  | `alloc_<tag>.json`, `alloc_<tag>.csv`               |
//! | ptq       | `ptq_<tag>.cqck`                                    |
//! | qat       | `qat_<group>_<tag>_<variant>.cqck`, `_log.{csv,json}` |
//! | eval      | `eval_<checkpoint>.json`                            |
//! | report    | `report.json`, `report.csv`, `*.svg`                |

mod report;
mod selfcheck;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::allocator::BitAssignment;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Checkpoint, Dataset};
use crate::objectives::CriticalSpec;
use crate::pipeline::{
    evaluate_checkpoint, fisher_assignment, fisher_for, read_json, train_full_precision, uniform_assignment,
    write_artifact, write_json, RunConfig, Scheme,
};
use crate::qat::{self, RegularizerMode};
use crate::quantizer::MIN_BITS;
use crate::sensitivity::FisherDiag;

pub use report::{build_report, Report};
pub use selfcheck::{run_selfcheck, CheckResult};

pub const OUT_ENV: &str = "CRITQUANT_OUT";

#[derive(Parser, Debug)]
#[command(name = "critquant", version, about = "Critical-category-aware quantization pipeline")]
struct Cli {
    /// Worker threads (also `CRITQUANT_THREADS`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (also `CRITQUANT_OUT`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SchemeArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    scheme: SchemeArg,
    /// Critical super-category or named critical set.
    #[arg(long)]
    critical: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Average bits per quantizable weight.
    #[arg(long)]
    budget_bits: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Uniform,
    FisherOverall,
    FisherCritical,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Uniform => Scheme::Uniform,
            SchemeArg::FisherOverall => Scheme::FisherOverall,
            SchemeArg::FisherCritical => Scheme::FisherCritical,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Variant {
    /// Fisher-trace penalty on.
    Reg,
    /// Penalty off.
    Noreg,
    /// Train on L_A + L_F without the penalty.
    Sum,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Train the full-precision detector.
    TrainFp(Common),
    /// Estimate the Fisher diagonal and the per-layer sensitivity table.
    Sens {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Solve the bit allocation at a budget.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Post-training quantization of the FP checkpoint.
    Ptq {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Quantization-aware training from a PTQ checkpoint.
    Qat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scheme: SchemeArgs,
        #[arg(long, value_enum, default_value = "reg")]
        variant: Variant,
        /// Override the number of QAT epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint of the run directory on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint name without extension, e.g. `fp` or `ptq_uniform-4`.
        #[arg(long, default_value = "fp")]
        checkpoint: String,
    },
    /// Aggregate run directories into tables and plots.
    Report {
        /// Output directory of the report.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the built-in oracle suite.
    Selfcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Runs the driver and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.to_string());
            return 2;
        }
    };
    if let Some(n) = cli.threads {
        exec::set_threads(n);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            report_error(error_kind(&e), &e.to_string());
            e.exit_code()
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Json(_) => "config",
        Error::Infeasible { .. } => "infeasible",
        Error::Missing(_) => "missing",
        Error::UnknownLayer(_) => "unknown-layer",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Shape { .. } | Error::NonScalarTarget(_) => "internal",
    }
}

/// One line: `error kind=<kind> message=<json string>`.
fn report_error(kind: &str, msg: &str) {
    let one_line = msg.trim().replace('\n', " ");
    eprintln!(
        "error kind={kind} message={}",
        serde_json::to_string(&one_line).unwrap_or_default()
    );
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg = cfg.with_seed(s);
        }
        let out = c
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.out.clone());
        Ok(Ctx { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self) -> Result<Dataset> {
        let d = Dataset::load(&self.path("dataset.cqds"))?;
        if d.spec != self.cfg.dataset {
            return Err(Error::config("dataset.cqds was generated from a different dataset spec"));
        }
        Ok(d)
    }

    fn checkpoint(&self, name: &str) -> Result<Checkpoint> {
        let ck = Checkpoint::load(&self.path(&format!("{name}.cqck")))?;
        if ck.model.num_classes != self.cfg.dataset.num_classes || ck.model.image_size != self.cfg.dataset.image_size {
            return Err(Error::config(format!("checkpoint `{name}` does not match the dataset")));
        }
        Ok(ck)
    }
}

struct Resolved {
    scheme: Scheme,
    spec: Option<CriticalSpec>,
    alpha: f64,
    budget: f64,
}

impl Resolved {
    fn new(ctx: &Ctx, a: &SchemeArgs) -> Result<Self> {
        let scheme: Scheme = a.scheme.into();
        let spec = a.critical.as_deref().map(|n| ctx.cfg.critical_spec(n)).transpose()?;
        let budget = a.budget_bits.unwrap_or(ctx.cfg.budget_bits);
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::config("--budget-bits must be positive"));
        }
        let alpha = a.alpha.unwrap_or(ctx.cfg.alpha);
        if !(alpha >= 0.0) {
            return Err(Error::config("--alpha must be non-negative"));
        }
        if scheme == Scheme::FisherCritical && spec.is_none() {
            return Err(Error::config("--scheme fisher-critical needs --critical"));
        }
        Ok(Resolved {
            scheme,
            spec,
            alpha,
            budget,
        })
    }

    /// Fisher artifact tag, independent of the budget.
    fn fisher_tag(&self) -> String {
        match (&self.scheme, &self.spec) {
            (Scheme::FisherCritical, Some(s)) => {
                format!("fisher-critical-{}-a{}", spec_name(s), self.alpha)
            }
            (s, _) => s.name().to_string(),
        }
    }

    fn tag(&self) -> String {
        format!("{}-{}", self.fisher_tag(), self.budget)
    }
}

fn spec_name(s: &CriticalSpec) -> String {
    s.name.clone().unwrap_or_else(|| {
        s.critical
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("_")
    })
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(c) => {
            let ctx = Ctx::new(&c)?;
            let d = Dataset::generate(&ctx.cfg.dataset)?;
            ctx.cfg.dataset.check_model(&ctx.cfg.model)?;
            write_artifact(&ctx.path("dataset.cqds"), &d.to_bytes()?)?;
            println!("wrote {}", ctx.path("dataset.cqds").display());
        }
        Command::TrainFp(c) => {
            let ctx = Ctx::new(&c)?;
            let d = ctx.dataset()?;
            let (params, log) = train_full_precision(&ctx.cfg, &d.train, |r, _| {
                eprintln!("epoch {} loss {:.5} lr {:.2e}", r.epoch, r.loss.total, r.lr)
            })?;
            let mut csv = String::from("epoch,lr,loss,class,l1,giou\n");
            for r in &log {
                csv.push_str(&format!(
                    "{},{:e},{:e},{:e},{:e},{:e}\n",
                    r.epoch, r.lr, r.loss.total, r.loss.class, r.loss.l1, r.loss.giou
                ));
            }
            let ck = Checkpoint {
                model: ctx.cfg.model.clone(),
                params,
                quant: None,
            };
            write_artifact(&ctx.path("fp.cqck"), &ck.to_bytes()?)?;
            write_artifact(&ctx.path("fp_train.csv"), csv.as_bytes())?;
            println!("wrote {}", ctx.path("fp.cqck").display());
        }
        Command::Sens { common, scheme } => {
            let ctx = Ctx::new(&common)?;
            let r = Resolved::new(&ctx, &scheme)?;
            let obj = r
                .scheme
                .objective(r.spec.as_ref(), r.alpha)?
                .ok_or_else(|| Error::config("sens needs a fisher-* scheme"))?;
            let d = ctx.dataset()?;
            let fp = ctx.checkpoint("fp")?;
            let f = fisher_for(&ctx.cfg, &fp.params, &d.train, &obj)?;
            let table = crate::allocator::build_table(&fp.params, &f)?;
            let tag = r.fisher_tag();
            write_artifact(&ctx.path(&format!("fisher_{tag}.cqfd")), &f.to_bytes(&fp.params)?)?;
            write_artifact(&ctx.path(&format!("sensitivity_{tag}.csv")), table.to_csv().as_bytes())?;
            println!(
                "fisher trace {:e} over {} samples",
                crate::sensitivity::fisher_trace(&f, &fp.params, None)?,
                f.samples
            );
        }
        Command::Allocate { common, scheme } => {
            let ctx = Ctx::new(&common)?;
            let r = Resolved::new(&ctx, &scheme)?;
            let a = allocation(&ctx, &r)?;
            println!("average bits {:.4}, objective {:e}", a.average_bits, a.objective);
        }
        Command::Ptq { common, scheme } => {
            let ctx = Ctx::new(&common)?;
            let r = Resolved::new(&ctx, &scheme)?;
            let fp = ctx.checkpoint("fp")?;
            let quant = match r.scheme {
                Scheme::Uniform => allocation(&ctx, &r)?.quant_config(),
                _ => read_json::<BitAssignment>(&ctx.path(&format!("alloc_{}.json", r.tag())))?.quant_config(),
            };
            quant.validate(&fp.params)?;
            let ck = Checkpoint {
                quant: Some(quant),
                ..fp
            };
            let name = format!("ptq_{}", r.tag());
            write_artifact(&ctx.path(&format!("{name}.cqck")), &ck.to_bytes()?)?;
            println!("wrote {name}.cqck");
        }
        Command::Qat {
            common,
            scheme,
            variant,
            epochs,
        } => {
            let ctx = Ctx::new(&common)?;
            let r = Resolved::new(&ctx, &scheme)?;
            let spec = r.spec.clone().ok_or_else(|| Error::config("qat needs --critical"))?;
            let d = ctx.dataset()?;
            let init = ctx.checkpoint(&format!("ptq_{}", r.tag()))?;
            let teacher = ctx.checkpoint("fp")?;
            let mut qc = ctx.cfg.qat.clone();
            if let Some(e) = epochs {
                qc.epochs = e;
            }
            match variant {
                Variant::Reg if qc.regularizer == RegularizerMode::Off => qc.regularizer = RegularizerMode::FdHvp,
                Variant::Reg => {}
                Variant::Noreg => qc.regularizer = RegularizerMode::Off,
                Variant::Sum => {
                    qc.regularizer = RegularizerMode::Off;
                    qc.sum_baseline = true;
                }
            }
            for w in qc.warnings() {
                eprintln!("warning: {w}");
            }
            let quant = init
                .quant
                .clone()
                .ok_or_else(|| Error::config("qat needs a checkpoint with a quantization config"))?;
            let (params, log) = qat::train(
                &init.model,
                init.params.clone(),
                quant.clone(),
                Some(&teacher.params),
                &d.train,
                &d.val,
                &spec,
                &ctx.cfg.loss,
                &qc,
                |m| {
                    eprintln!(
                        "epoch {} lambda {:.2e} loss {:.5} trace {:.4e} map {:.4} crit {:.4}",
                        m.epoch, m.lambda, m.loss_overall, m.trace_f, m.map_overall, m.map_critical_only
                    )
                },
            )?;
            let v = match variant {
                Variant::Reg => "reg",
                Variant::Noreg => "noreg",
                Variant::Sum => "sum",
            };
            let name = format!("qat_{}_{}_{v}", spec_name(&spec), r.tag());
            let ck = Checkpoint {
                model: init.model,
                params,
                quant: Some(quant),
            };
            write_artifact(&ctx.path(&format!("{name}.cqck")), &ck.to_bytes()?)?;
            write_artifact(&ctx.path(&format!("{name}_log.csv")), log.to_csv().as_bytes())?;
            write_json(&ctx.path(&format!("{name}_log.json")), &log)?;
            println!("wrote {name}.cqck");
        }
        Command::Eval { common, checkpoint } => {
            let ctx = Ctx::new(&common)?;
            let d = ctx.dataset()?;
            let ck = ctx.checkpoint(&checkpoint)?;
            let groups = ctx.cfg.group_specs()?;
            let rep = evaluate_checkpoint(&checkpoint, &ck, &d.val, &groups)?;
            write_json(&ctx.path(&format!("eval_{checkpoint}.json")), &rep)?;
            println!("overall mAP {:.4}", rep.overall.map);
            for (g, r) in &rep.critical {
                println!("critical[{g}] mAP {:.4} (critical-only {:.4})", r.map, r.map_critical_only);
            }
        }
        Command::Report { out, runs } => {
            let rep = build_report(&runs)?;
            rep.write(&out)?;
            println!("wrote report to {}", out.display());
        }
        Command::Selfcheck { seed } => {
            let results = run_selfcheck(seed.unwrap_or(0));
            let mut failed = 0;
            for r in &results {
                println!("{} {} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            println!("{} passed, {} failed", results.len() - failed, failed);
            return Ok(i32::from(failed > 0));
        }
    }
    Ok(0)
}

/// Writes the allocation artifacts of `r` and returns the assignment.
fn allocation(ctx: &Ctx, r: &Resolved) -> Result<BitAssignment> {
    let fp = ctx.checkpoint("fp")?;
    let (a, csv) = match r.scheme {
        Scheme::Uniform => {
            let total: u64 = fp.params.quantizable().map(|l| l.element_count() as u64).sum();
            if r.budget < MIN_BITS as f64 {
                return Err(Error::Infeasible {
                    budget: (r.budget * total as f64).floor() as u64,
                    minimum: MIN_BITS as u64 * total,
                });
            }
            let q = uniform_assignment(&fp.params, r.budget);
            let bits: Vec<(String, u32)> = fp
                .params
                .quantizable()
                .map(|l| (l.name.clone(), q.bits[&l.name]))
                .collect();
            let size: u64 = fp
                .params
                .quantizable()
                .map(|l| l.element_count() as u64 * q.bits[&l.name] as u64)
                .sum();
            let budget = (r.budget * total as f64).floor() as u64;
            let a = BitAssignment {
                format_version: crate::model::io::FORMAT_VERSION,
                objective_tag: "uniform".into(),
                bits,
                objective: 0.0,
                size_bits: size,
                budget_bits: budget,
                average_bits: size as f64 / total as f64,
                budget_note: "exempt layers excluded from budget and size".into(),
            };
            let mut csv = String::from("layer,sensitivity,bits,fisher_trace\n");
            for (n, b) in &a.bits {
                csv.push_str(&format!("{n},,{b},\n"));
            }
            (a, csv)
        }
        _ => {
            let f = FisherDiag::load(&ctx.path(&format!("fisher_{}.cqfd", r.fisher_tag())))?;
            f.check_congruent(&fp.params)?;
            let (table, a) = fisher_assignment(&fp.params, &f, r.budget)?;
            let csv = a.to_csv(&table);
            (a, csv)
        }
    };
    let tag = r.tag();
    write_json(&ctx.path(&format!("alloc_{tag}.json")), &a)?;
    write_artifact(&ctx.path(&format!("alloc_{tag}.csv")), csv.as_bytes())?;
    Ok(a)
}

/// Convenience for tests: run with string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("critquant").chain(args.iter().copied()))
}
