//! Command-line parsing and the subcommands.
//!
//! Configuration comes from `--config FILE` (or, for commands that read a
//! checkpoint, from the configuration embedded in it), then the shorthand
//! flags (`--share`, `--transform`, `--epochs`, `--seed`), then any
//! `--section.field VALUE` or `--set section.field=VALUE` overrides.
//! Commands that work on a trained or compressed model take its
//! architecture from the checkpoint; a configuration that contradicts it is
//! an error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use minivit::diagnostics::norm_spread;
use minivit::distill::TrainEvent;
use minivit::multiplex::{make_sharing_plan, param_report};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, SharingConfig, TransformsConfig};
use crate::output::{gradnorm_csv, json_bytes, metrics_csv, similarity_csv, Outputs};
use crate::pipeline::{self, Model};

#[derive(Debug, Parser)]
#[command(name = "minivit", version, about = "Compress vision transformers by weight multiplexing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the unshared baseline on labels.
    TrainTeacher(TrainTeacherArgs),
    /// Build a shared, transformed student from a teacher checkpoint.
    Compress(CompressArgs),
    /// Distill a compressed student from its teacher.
    Distill(DistillArgs),
    /// Top-1 accuracy on the held-out split.
    Eval(EvalArgs),
    /// Per-layer CKA between two models.
    DiagnoseCka(CkaArgs),
    /// Per-group and per-layer gradient norms over the first steps of distillation.
    DiagnoseGradnorm(GradnormArgs),
    /// Parameter accounting of the configured compact model.
    ReportParams(ReportArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sharing mode: none, all, every-K or K.
    #[arg(long)]
    share: Option<String>,
    /// Transformations: none, all, msa or mlp.
    #[arg(long)]
    transform: Option<String>,
    /// Training epochs (`optim.epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization, shuffling and stochastic depth (`optim.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Override any field, e.g. `--set optim.lr=0.01`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to write [default: <output.dir>/teacher.mvc].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV [default: <output.dir>/teacher_metrics.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompressArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// [default: <output.dir>/teacher.mvc]
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint to write [default: <output.dir>/student_init.mvc].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parameter report JSON [default: <output.dir>/param_report.json].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// [default: <output.dir>/teacher.mvc]
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Initial student [default: <output.dir>/student_init.mvc].
    #[arg(long)]
    student: Option<PathBuf>,
    /// Trained student to write [default: <output.dir>/student.mvc].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV [default: <output.dir>/distill_metrics.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct CkaArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// [default: <output.dir>/teacher.mvc]
    #[arg(long)]
    reference: Option<PathBuf>,
    /// [default: <output.dir>/student.mvc]
    #[arg(long)]
    model: Option<PathBuf>,
    /// [default: <output.dir>/cka.csv]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradnormArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Student to probe [default: <output.dir>/student_init.mvc].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Needed unless the objective is label-only [default: <output.dir>/teacher.mvc].
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// [default: <output.dir>/gradnorm.csv]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Pulls `--a.b VALUE` and `--a.b=VALUE` out of the argument list, since
/// their names are not known to the parser.
fn split_dotted(args: Vec<OsString>) -> anyhow::Result<(Vec<OsString>, Vec<String>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|a| a.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (name, value) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .with_context(|| format!("--{name} needs a value"))?,
        };
        overrides.push(format!("{name}={value}"));
    }
    Ok((rest, overrides))
}

struct Resolver {
    dotted: Vec<String>,
}

/// Where a command's configuration starts from when it reads a checkpoint.
#[derive(Clone, Copy)]
enum Source<'a> {
    Default,
    /// The embedded configuration, unless a file is given.
    Inherit(&'a RunConfig),
    /// As `Inherit`, but a file never replaces the architecture (model,
    /// sharing, transforms), which the checkpoint fixes.
    Pinned(&'a RunConfig),
}

impl Resolver {
    fn resolve(&self, args: &ConfigArgs, source: Source<'_>) -> anyhow::Result<RunConfig> {
        let cfg = self.assemble(args, source)?;
        cfg.validate_architecture()?;
        Ok(cfg)
    }

    fn assemble(&self, args: &ConfigArgs, source: Source<'_>) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&args.config, source) {
            (Some(path), Source::Pinned(run)) => RunConfig {
                model: run.model.clone(),
                sharing: run.sharing,
                transforms: run.transforms,
                ..RunConfig::load(path)?
            },
            (Some(path), _) => RunConfig::load(path)?,
            (None, Source::Inherit(run) | Source::Pinned(run)) => run.clone(),
            (None, Source::Default) => RunConfig::default(),
        };
        if let Some(s) = &args.share {
            cfg.sharing = SharingConfig::parse(s)?;
        }
        if let Some(t) = &args.transform {
            cfg.transforms = TransformsConfig::parse(t, cfg.transforms.k_conv)?;
        }
        if let Some(e) = args.epochs {
            cfg.optim.epochs = e;
        }
        if let Some(s) = args.seed {
            cfg.optim.seed = s;
        }
        let overrides: Vec<&String> = self.dotted.iter().chain(&args.set).collect();
        cfg.with_overrides(&overrides)
    }
}

fn or_default(path: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| cfg.output.dir.join(name))
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Fails unless `model` is exactly the architecture `cfg` describes.
fn ensure_describes(cfg: &RunConfig, model: &Model, what: &str) -> anyhow::Result<()> {
    let same = &cfg.model == model.config()
        && &cfg.transforms.to_transform_config() == model.transforms()
        && &make_sharing_plan(&cfg.model, cfg.sharing.share_mode())? == model.plan();
    if !same {
        bail!("the configuration describes a different model than the {what} checkpoint");
    }
    Ok(())
}

fn progress(event: TrainEvent<'_>) {
    if let TrainEvent::Epoch(e) = event {
        match e.test_acc {
            Some(acc) => eprintln!("epoch {}: mean loss {:.5}, test accuracy {:.4}", e.epoch, e.mean_loss, acc),
            None => eprintln!("epoch {}: mean loss {:.5}", e.epoch, e.mean_loss),
        }
    }
}

/// Runs the command line `args` (program name first), writing reports to
/// `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (rest, dotted) = split_dotted(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(rest)?;
    let resolver = Resolver { dotted };
    match cli.command {
        Command::TrainTeacher(a) => train_teacher(&resolver, a),
        Command::Compress(a) => compress(&resolver, a, stdout),
        Command::Distill(a) => distill(&resolver, a),
        Command::Eval(a) => eval(&resolver, a, stdout),
        Command::DiagnoseCka(a) => diagnose_cka(&resolver, a, stdout),
        Command::DiagnoseGradnorm(a) => diagnose_gradnorm(&resolver, a, stdout),
        Command::ReportParams(a) => report_params(&resolver, a, stdout),
    }
}

fn train_teacher(r: &Resolver, a: TrainTeacherArgs) -> anyhow::Result<()> {
    let cfg = r.resolve(&a.config, Source::Default)?;
    let out = or_default(&a.out, &cfg, "teacher.mvc");
    let metrics = or_default(&a.metrics, &cfg, "teacher_metrics.csv");
    let (model, log) = pipeline::train_teacher(&cfg, &mut progress)?;
    let mut outputs = Outputs::new();
    outputs.stage(&out, &checkpoint::encode(&model, &pipeline::teacher_run(&cfg))?)?;
    outputs.stage(&metrics, &metrics_csv(&log)?)?;
    outputs.commit()?;
    Ok(())
}

fn compress(r: &Resolver, a: CompressArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let base = r.assemble(&a.config, Source::Default)?;
    let teacher_path = or_default(&a.teacher, &base, "teacher.mvc");
    let teacher = load(&teacher_path)?;
    let cfg = r.resolve(&a.config, Source::Inherit(&teacher.run))?;
    let student = pipeline::compress(&teacher.model, &cfg)?;
    let report = json_bytes(&student.param_report())?;
    let mut outputs = Outputs::new();
    outputs.stage(&or_default(&a.out, &cfg, "student_init.mvc"), &checkpoint::encode(&student, &cfg)?)?;
    outputs.stage(&or_default(&a.report, &cfg, "param_report.json"), &report)?;
    outputs.commit()?;
    stdout.write_all(&report)?;
    Ok(())
}

fn distill(r: &Resolver, a: DistillArgs) -> anyhow::Result<()> {
    let base = r.assemble(&a.config, Source::Default)?;
    let init = load(&or_default(&a.student, &base, "student_init.mvc"))?;
    let cfg = r.resolve(&a.config, Source::Pinned(&init.run))?;
    ensure_describes(&cfg, &init.model, "student")?;
    let teacher = if cfg.distill.weights().needs_teacher() {
        let t = load(&or_default(&a.teacher, &cfg, "teacher.mvc"))?;
        if t.model.config() != &cfg.model {
            bail!("teacher and student checkpoints have different architectures");
        }
        Some(t.model)
    } else {
        None
    };
    let mut student = init.model;
    let log = pipeline::distill(&mut student, teacher.as_ref(), &cfg, &mut progress)?;
    // The student keeps the description it was created with.
    let mut outputs = Outputs::new();
    outputs.stage(&or_default(&a.out, &cfg, "student.mvc"), &checkpoint::encode(&student, &init.run)?)?;
    outputs.stage(&or_default(&a.metrics, &cfg, "distill_metrics.csv"), &metrics_csv(&log)?)?;
    outputs.commit()?;
    Ok(())
}

#[derive(Serialize)]
struct Top1 {
    top1: f64,
}

fn eval(r: &Resolver, a: EvalArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let cfg = r.resolve(&a.config, Source::Pinned(&ckpt.run))?;
    let top1 = pipeline::top1(&ckpt.model, &cfg)?;
    stdout.write_all(&json_bytes(&Top1 { top1 })?)?;
    Ok(())
}

fn diagnose_cka(r: &Resolver, a: CkaArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let base = r.assemble(&a.config, Source::Default)?;
    let model = load(&or_default(&a.model, &base, "student.mvc"))?;
    let cfg = r.resolve(&a.config, Source::Pinned(&model.run))?;
    let reference = load(&or_default(&a.reference, &cfg, "teacher.mvc"))?;
    let curve = pipeline::similarity(&reference.model, &model.model, &cfg)?;
    let mut outputs = Outputs::new();
    outputs.stage(&or_default(&a.out, &cfg, "cka.csv"), &similarity_csv(&curve)?)?;
    outputs.commit()?;
    stdout.write_all(&json_bytes(&curve)?)?;
    Ok(())
}

#[derive(Serialize)]
struct GradnormSummary {
    steps: usize,
    /// Mean over steps of max/min gradient norm across share groups.
    group_spread: f64,
    /// The same across individual layers.
    layer_spread: f64,
}

fn diagnose_gradnorm(r: &Resolver, a: GradnormArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    if a.steps == 0 {
        bail!("--steps must be positive");
    }
    let base = r.assemble(&a.config, Source::Default)?;
    let student = load(&or_default(&a.model, &base, "student_init.mvc"))?;
    let cfg = r.resolve(&a.config, Source::Pinned(&student.run))?;
    ensure_describes(&cfg, &student.model, "student")?;
    let teacher = if cfg.distill.weights().needs_teacher() {
        Some(load(&or_default(&a.teacher, &cfg, "teacher.mvc"))?.model)
    } else {
        None
    };
    let traces = pipeline::gradnorm_probe(&student.model, teacher.as_ref(), &cfg, a.steps)?;
    let mean = |f: &dyn Fn(&minivit::diagnostics::GradNormTrace) -> f64| {
        traces.iter().map(f).sum::<f64>() / traces.len() as f64
    };
    let summary = GradnormSummary {
        steps: traces.len(),
        group_spread: mean(&|t| norm_spread(&t.groups)),
        layer_spread: mean(&|t| norm_spread(&t.layers)),
    };
    let mut outputs = Outputs::new();
    outputs.stage(&or_default(&a.out, &cfg, "gradnorm.csv"), &gradnorm_csv(&traces)?)?;
    outputs.commit()?;
    stdout.write_all(&json_bytes(&summary)?)?;
    Ok(())
}

fn report_params(r: &Resolver, a: ReportArgs, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = r.resolve(&a.config, Source::Default)?;
    let plan = make_sharing_plan(&cfg.model, cfg.sharing.share_mode())?;
    let report = json_bytes(&param_report(&cfg.model, &plan, &cfg.transforms.to_transform_config())?)?;
    if let Some(path) = &a.out {
        let mut outputs = Outputs::new();
        outputs.stage(path, &report)?;
        outputs.commit()?;
    }
    stdout.write_all(&report)?;
    Ok(())
}
