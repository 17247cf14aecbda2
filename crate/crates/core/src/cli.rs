//! Command-line front end: `generate`, `train`, `eval` and `visualize`.
//!
//! Every command prints its resolved settings before doing any work and
//! reports failures through the returned error (the binary maps it to a
//! nonzero exit code).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::boundary::boundary_from_labels;
use crate::checkpoint::Checkpoint;
use crate::config::{Overrides, Preset, RunConfig};
use crate::data::{
    generate_synthetic_dataset, load_segmentation_dataset, make_splits, write_dataset, Dataset,
    DatasetKind, DatasetSpec, SyntheticConfig,
};
use crate::error::{Error, IoContext, Result};
use crate::eval::IouReport;
use crate::maps::{argmax_labels, SegSample};
use crate::model::{SegModel, SmallSegNet};
use crate::training::{evaluate, ModelPair, Trainer};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "confseg", version, about = "Semi-supervised segmentation with confidence-weighted pseudo-labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset.
    Generate(GenerateArgs),
    /// Run both training stages.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export prediction figures and training curves.
    Visualize(VisualizeArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    /// Image size as HxW, e.g. 64x64.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub max_shapes: Option<usize>,
    #[arg(long)]
    pub color_jitter: Option<f32>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub show_config: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Student,
    Teacher,
}

#[derive(Debug, clap::Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub kind: KindArg,
    /// Expected class count; defaults to the checkpoint's.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Synthetic,
    VocLayout,
    CityscapesLayout,
}

impl From<KindArg> for DatasetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Synthetic => DatasetKind::Synthetic,
            KindArg::VocLayout => DatasetKind::VocLayout,
            KindArg::CityscapesLayout => DatasetKind::CityscapesLayout,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Restrict evaluation to the ids listed in this file.
    #[arg(long)]
    pub ids_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "student")]
    pub model: Which,
    /// Run directory for the report; defaults to the checkpoint's run.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "synthetic")]
    pub kind: KindArg,
    /// Comma-separated sample ids; defaults to the first four.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long, value_enum, default_value = "student")]
    pub model: Which,
    /// Metrics stream to plot.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok((p(h)?, p(w)?))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Visualize(a) => cmd_visualize(&a),
    }
}

fn print_section(title: &str, body: &str) {
    println!("# {title}\n{}", body.trim_end());
    println!();
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).at(p)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = SyntheticConfig::new(a.n, a.size, a.classes, a.seed);
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.max_shapes {
        cfg.max_shapes = v;
    }
    if let Some(v) = a.color_jitter {
        cfg.color_jitter = v;
    }
    print_section("synthetic dataset", &toml::to_string_pretty(&cfg).expect("serializable"));
    let ds = generate_synthetic_dataset(&cfg)?;
    write_dataset(&ds, &a.out)?;
    println!("# manifest ({} samples in {})", ds.len(), a.out.display());
    for id in ds.ids() {
        println!("{id}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    kind: &'static str,
    checkpoint: String,
    model: Which,
    dataset: String,
    samples: usize,
    per_class: &'a [Option<f64>],
    mean: f64,
}

fn write_report(path: &Path, record: &EvalRecord) -> Result<String> {
    let line = serde_json::to_string(record)?;
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, format!("{line}\n")).at(path)?;
    Ok(line)
}

fn load_run_data(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.dataset.root.exists() && cfg.dataset.kind == DatasetKind::Synthetic {
        return Err(Error::Load(format!(
            "dataset root {} does not exist (create one with `confseg generate --out {}`)",
            cfg.dataset.root.display(),
            cfg.dataset.root.display()
        )));
    }
    load_segmentation_dataset(&cfg.dataset)
}

fn write_lines(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).at(path)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.config.as_deref(), a.preset, &a.overrides)?;
    let resolved = cfg.to_toml();
    print_section("resolved configuration", &resolved);
    if a.show_config {
        return Ok(());
    }
    let data = load_run_data(&cfg)?;
    let (labeled_ids, unlabeled_ids) = make_splits(&data.ids(), &cfg.split)?;
    let held_out = cfg.eval_dataset.as_ref().map(load_segmentation_dataset).transpose()?;
    for d in [cfg.out_dir.clone(), cfg.checkpoints_dir(), cfg.reports_dir(), cfg.figures_dir()] {
        create_dir(&d)?;
    }
    let resolved_path = cfg.out_dir.join("config.resolved");
    fs::write(&resolved_path, &resolved).at(&resolved_path)?;
    write_lines(&cfg.reports_dir().join("split_labeled.txt"), &labeled_ids)?;
    write_lines(&cfg.reports_dir().join("split_unlabeled.txt"), &unlabeled_ids)?;
    log::info!("{} labeled, {} unlabeled samples", labeled_ids.len(), unlabeled_ids.len());
    let labeled = data.subset(&labeled_ids);
    let unlabeled = data.subset(&unlabeled_ids);
    let channels = labeled.first().map(|s| s.image.channels).unwrap_or(3);
    let net = SmallSegNet::new(channels, data.num_classes, cfg.train.model, cfg.seed)?;

    let eval_samples: Vec<SegSample> = match held_out {
        Some(d) => d.samples,
        None => unlabeled.clone(),
    };

    let (mut trainer, append) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.snapshot.config != cfg.train {
                log::warn!("resuming with the checkpoint's training config; the resolved one differs");
            }
            (ck.into_trainer(net, labeled, unlabeled)?, true)
        }
        None => (Trainer::new(cfg.train.clone(), ModelPair::new(net.clone(), net)?, labeled, unlabeled)?, false),
    };

    let metrics_path = cfg.metrics_path();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .at(&metrics_path)?;
    let mut metrics = BufWriter::new(file);
    let ck_dir = cfg.checkpoints_dir();
    let mut epoch_total = (0.0, 0u64);
    let mut last = None;
    while !trainer.is_finished() {
        let out = match trainer.step() {
            Ok(o) => o,
            Err(e) => {
                metrics.flush().at(&metrics_path)?;
                dump_failure(&cfg, &trainer, &e, last.as_ref())?;
                return Err(e);
            }
        };
        serde_json::to_writer(&mut metrics, &out.metrics)?;
        metrics.write_all(b"\n").at(&metrics_path)?;
        epoch_total.0 += out.metrics.total;
        epoch_total.1 += 1;
        let m = &out.metrics;
        if trainer.cursor().epoch != m.epoch {
            metrics.flush().at(&metrics_path)?;
            log::info!(
                "epoch {} (stage {}): mean loss {:.4}, threshold {:.3}, retention {:.3}{}",
                m.epoch + 1,
                m.stage,
                epoch_total.0 / epoch_total.1 as f64,
                m.threshold,
                m.retention_fraction,
                if out.teacher_updated { ", teacher updated" } else { "" }
            );
            epoch_total = (0.0, 0);
            let done = m.epoch + 1;
            let every = cfg.checkpoint_every_epochs;
            if done == cfg.train.stage1_epochs {
                Checkpoint::capture(&trainer).save(&ck_dir.join("stage1.ck"))?;
            }
            if every > 0 && done % every == 0 {
                Checkpoint::capture(&trainer).save(&ck_dir.join(format!("epoch{done:04}.ck")))?;
            }
        }
        last = Some(out.metrics);
    }
    metrics.flush().at(&metrics_path)?;
    let final_ck = ck_dir.join("final.ck");
    Checkpoint::capture(&trainer).save(&final_ck)?;

    let student = &trainer.models().student;
    let report = evaluate(student, &eval_samples)?.miou()?;
    let line = write_report(
        &cfg.reports_dir().join("final_eval.json"),
        &eval_record(&final_ck, Which::Student, eval_label(&cfg), eval_samples.len(), &report),
    )?;
    println!("{line}");
    Ok(())
}

fn eval_label(cfg: &RunConfig) -> String {
    match &cfg.eval_dataset {
        Some(s) => s.root.display().to_string(),
        None => format!("{} (unlabeled split)", cfg.dataset.root.display()),
    }
}

fn eval_record<'a>(ck: &Path, model: Which, dataset: String, samples: usize, r: &'a IouReport) -> EvalRecord<'a> {
    EvalRecord {
        kind: "eval",
        checkpoint: ck.display().to_string(),
        model,
        dataset,
        samples,
        per_class: &r.per_class,
        mean: r.mean,
    }
}

#[derive(Serialize)]
struct FailureDump<'a> {
    error: String,
    step: Option<u64>,
    batch_ids: Vec<String>,
    last_metrics: Option<&'a crate::training::MetricsRecord>,
    checkpoint: String,
}

fn dump_failure<M: SegModel>(
    cfg: &RunConfig,
    trainer: &Trainer<M>,
    err: &Error,
    last: Option<&crate::training::MetricsRecord>,
) -> Result<()> {
    let (step, ids) = match err {
        Error::NonFiniteLoss { step, ids } => (Some(*step), ids.clone()),
        _ => (None, Vec::new()),
    };
    let ck = cfg.checkpoints_dir().join("abort.ck");
    Checkpoint::capture(trainer).save(&ck)?;
    let dump = FailureDump {
        error: err.to_string(),
        step,
        batch_ids: ids,
        last_metrics: last,
        checkpoint: ck.display().to_string(),
    };
    let path = cfg.reports_dir().join("failure.json");
    fs::write(&path, serde_json::to_string_pretty(&dump)?).at(&path)?;
    eprintln!("diagnostics written to {}", path.display());
    Ok(())
}

/// Rebuilds the requested network from a checkpoint.
fn model_from_checkpoint(ck: &Checkpoint, which: Which) -> Result<SmallSegNet> {
    let snap = &ck.header.snapshot;
    let mut net = SmallSegNet::new(ck.header.in_channels, snap.num_classes, snap.config.model, 0)?;
    let params = match which {
        Which::Student => &ck.student,
        Which::Teacher => &ck.teacher,
    };
    Checkpoint::load_params(&mut net, params)?;
    Ok(net)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

fn default_run_dir(ck: &Path) -> PathBuf {
    let parent = ck.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

fn dataset_spec(root: &Path, kind: KindArg, classes: usize) -> DatasetSpec {
    DatasetSpec {
        kind: kind.into(),
        root: root.to_path_buf(),
        num_classes: classes,
        ignore_index: crate::maps::IGNORE_INDEX,
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let k = ck.header.snapshot.num_classes;
    let classes = a.data.classes.unwrap_or(k);
    if classes != k {
        return Err(Error::Config(format!("--classes {classes} but the checkpoint was trained with {k}")));
    }
    let spec = dataset_spec(&a.data.data_root, a.data.kind, classes);
    let out_dir = a.out.clone().unwrap_or_else(|| default_run_dir(&a.checkpoint));
    let report_path = out_dir.join("reports").join(match a.model {
        Which::Student => "eval_student.json",
        Which::Teacher => "eval_teacher.json",
    });
    print_section(
        "evaluation",
        &format!(
            "checkpoint = {:?}\nmodel = {:?}\nreport = {:?}\n{}",
            a.checkpoint.display().to_string(),
            format!("{:?}", a.model).to_lowercase(),
            report_path.display().to_string(),
            toml::to_string_pretty(&spec).expect("serializable")
        ),
    );
    let net = model_from_checkpoint(&ck, a.model)?;
    let data = load_segmentation_dataset(&spec)?;
    let samples = match &a.ids_file {
        Some(p) => {
            let text = fs::read_to_string(p).at(p)?;
            let ids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if let Some(bad) = ids.iter().find(|id| data.get(id).is_none()) {
                return Err(Error::UnknownSample(bad.clone()));
            }
            data.subset(&ids)
        }
        None => data.samples,
    };
    let report = evaluate(&net, &samples)?.miou()?;
    let line = write_report(
        &report_path,
        &eval_record(&a.checkpoint, a.model, spec.root.display().to_string(), samples.len(), &report),
    )?;
    println!("{line}");
    Ok(())
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    if a.checkpoint.is_none() && a.metrics.is_none() {
        return Err(Error::Config("visualize needs --checkpoint or --metrics".into()));
    }
    let figures = a.out.join("figures");
    print_section(
        "visualize",
        &format!(
            "checkpoint = {:?}\nmetrics = {:?}\nfigures = {:?}\nids = {:?}",
            a.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            a.metrics.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            figures.display().to_string(),
            a.ids
        ),
    );
    // read inputs before creating anything so failures leave no partial output
    let records = a.metrics.as_deref().map(viz::read_metrics).transpose()?;
    let ck = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    create_dir(&figures)?;

    if let Some(records) = records {
        viz::write_curves_csv(&records, &figures.join("curves.csv"))?;
        viz::plot_curves(&records).save(figures.join("curves.png"))?;
        println!("wrote curves for {} steps", records.len());
    }
    if let Some(ck) = ck {
        let root = a
            .data_root
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint requires --data-root".into()))?;
        let net = model_from_checkpoint(&ck, a.model)?;
        let data = load_segmentation_dataset(&dataset_spec(root, a.kind, net.num_classes()))?;
        let ids = if a.ids.is_empty() { data.ids().into_iter().take(4).collect() } else { a.ids.clone() };
        for id in &ids {
            let s = data.get(id).ok_or_else(|| Error::UnknownSample(id.clone()))?;
            let pred = argmax_labels(&net.forward(&s.image)?);
            viz::triptych(&s.image, s.label.as_ref(), &pred).save(figures.join(format!("{id}_triptych.png")))?;
            let mask = boundary_from_labels(&pred)?;
            let (overlay, drawn) = viz::boundary_overlay(&s.image, &mask);
            overlay.save(figures.join(format!("{id}_boundary.png")))?;
            viz::mask_to_gray(&mask).save(figures.join(format!("{id}_boundary_mask.png")))?;
            println!("{id}: {drawn} boundary pixels");
        }
    }
    Ok(())
}
