//! `erasure-lab`: init, capture, edit, probe, eval and sweep on the toy
//! engine.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors. Errors
//! are also written to stderr as one JSON object.

mod anchors;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use erasure_core::capture::{capture_set, AnchorRole, AnchorSet};
use erasure_core::editor::{run_edit, EditMode};
use erasure_core::engine::{init_model, Category, Concept, ModelCheckpoint, Vocabulary};
use erasure_core::eval::run_benchmark;
use erasure_core::io::{dump_activations, load_checkpoint, load_config, save_checkpoint, write_json, RunConfig};
use erasure_core::pipeline::{default_retain, forget_anchors, save_sweep_csv, sweep, SweepAxis};
use erasure_core::probe::probe_experiment;
use erasure_core::{Error, Result};

/// Overrides `engine.seed` of the run config.
const SEED_ENV: &str = "ERASURE_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "erasure-lab", version, about = "Closed-form concept erasure on a miniature diffusion engine")]
struct Cli {
    /// Worker threads [default: logical cores]
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the seeded toy checkpoint
    Init(InitArgs),
    /// Dump per-layer activation matrices of an anchor set
    Capture(CaptureArgs),
    /// Erase a concept from a checkpoint
    Edit(EditArgs),
    /// Compare text and activation probes for a concept
    Probe(ProbeArgs),
    /// Measure target, retention and quality of an edited checkpoint
    Eval(EvalArgs),
    /// Run an ablation sweep and write a CSV table
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Template {
    Style,
    Ip,
    Celeb,
}

impl From<Template> for Category {
    fn from(t: Template) -> Self {
        match t {
            Template::Style => Category::Style,
            Template::Ip => Category::Ip,
            Template::Celeb => Category::Celebrity,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Activation,
    Text,
}

impl From<Mode> for EditMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Activation => EditMode::Activation,
            Mode::Text => EditMode::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Role {
    Forget,
    Retain,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Forget,
    Retain,
    Steps,
    Latents,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Forget => SweepAxis::Forget,
            Axis::Retain => SweepAxis::Retain,
            Axis::Steps => SweepAxis::Steps,
            Axis::Latents => SweepAxis::Latents,
        }
    }
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run config; defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CaptureArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input checkpoint
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Anchor file, one prompt per line
    #[arg(long, value_name = "FILE", conflicts_with = "template")]
    anchors: Option<PathBuf>,
    /// Use the category templates filled with the concept instead of a file
    #[arg(long, value_enum)]
    template: Option<Template>,
    /// Concept for --template [default: config concept]
    #[arg(long, value_name = "NAME")]
    concept: Option<String>,
    /// Seed schedule of the anchor set
    #[arg(long, value_enum, default_value = "forget")]
    role: Role,
    /// Output activation dump
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input checkpoint
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Forget anchor file [default: templates of the concept]
    #[arg(long, value_name = "FILE")]
    forget: Option<PathBuf>,
    /// Retain anchor file [default: templates of the nine peer concepts]
    #[arg(long, value_name = "FILE", conflicts_with = "no_retain")]
    retain: Option<PathBuf>,
    /// Edit with an empty retain set
    #[arg(long)]
    no_retain: bool,
    /// Template category for default anchors [default: the concept's]
    #[arg(long, value_enum)]
    template: Option<Template>,
    /// Concept to erase [default: config concept]
    #[arg(long, value_name = "NAME")]
    concept: Option<String>,
    /// Edit basis [default: config edit.mode]
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Edit report (JSON)
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input checkpoint
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Concept to probe [default: config concept]
    #[arg(long, value_name = "NAME")]
    concept: Option<String>,
    /// Template category of the probe anchors [default: the concept's]
    #[arg(long, value_enum)]
    template: Option<Template>,
    /// Probe report (JSON)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Unedited checkpoint; detectors are calibrated on it
    #[arg(long, value_name = "FILE")]
    baseline: PathBuf,
    /// Edited checkpoint
    #[arg(long, value_name = "FILE")]
    edited: PathBuf,
    /// Erased concept [default: config concept]
    #[arg(long, value_name = "NAME")]
    concept: Option<String>,
    /// Metric report (JSON)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input checkpoint [default: built from the config]
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Swept quantity
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values [default: forget 6,15,30,50; retain 0,36,54,120,180; steps and latents 1,10]
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    values: Vec<usize>,
    /// Comma-separated edit modes
    #[arg(long, value_enum, value_delimiter = ',', default_value = "activation,text")]
    modes: Vec<Mode>,
    /// Erased concept [default: config concept]
    #[arg(long, value_name = "NAME")]
    concept: Option<String>,
    /// Output table (CSV)
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn run_config(arg: &ConfigArg) -> Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.engine.seed = raw.trim().parse().map_err(|_| Error::ValidationError {
            key: SEED_ENV.into(),
            reason: format!("`{raw}` is not an unsigned 64-bit integer"),
        })?;
    }
    Ok(cfg)
}

fn concept(vocab: &Vocabulary, cfg: &RunConfig, flag: Option<&str>) -> Result<Concept> {
    vocab.concept(flag.unwrap_or(&cfg.concept))
}

fn template_category(t: Option<Template>, c: Concept) -> Category {
    t.map(Category::from).unwrap_or(c.category)
}

fn cmd_init(a: &InitArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.config)?;
    let ckpt = init_model(&cfg.engine)?;
    save_checkpoint(&ckpt, &a.out)?;
    Ok(json!({ "checkpoint": a.out, "seed": cfg.engine.seed }))
}

fn cmd_capture(a: &CaptureArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.config)?;
    let vocab = Vocabulary::builtin();
    let ckpt = load_checkpoint(&a.ckpt)?;
    let role = match a.role {
        Role::Forget => AnchorRole::Forget,
        Role::Retain => AnchorRole::Retain,
    };
    let set = match (&a.anchors, a.template) {
        (Some(path), _) => anchors::load_anchor_file(&vocab, path, role)?,
        (None, None) if a.concept.is_none() => {
            return Err(Error::ValidationError {
                key: "anchors".into(),
                reason: "pass --anchors FILE or --template CATEGORY".into(),
            })
        }
        (None, t) => {
            let c = concept(&vocab, &cfg, a.concept.as_deref())?;
            AnchorSet::new("anchors", role, vocab.template_prompts(c, template_category(t, c)))?
        }
    };
    let mats = capture_set(&ckpt, &set, &cfg.capture)?;
    let name = match role {
        AnchorRole::Forget => "forget",
        AnchorRole::Retain => "retain",
    };
    dump_activations(&a.out, &[(name, &mats)])?;
    Ok(json!({ "activations": a.out, "anchors": set.len(), "rows": mats[0].rows() }))
}

fn cmd_edit(a: &EditArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.config)?;
    let vocab = Vocabulary::builtin();
    let ckpt = load_checkpoint(&a.ckpt)?;
    let c = concept(&vocab, &cfg, a.concept.as_deref())?;
    let cat = template_category(a.template, c);
    let a_f = match &a.forget {
        Some(path) => anchors::load_anchor_file(&vocab, path, AnchorRole::Forget)?,
        None => forget_anchors(&vocab, c, cat)?,
    };
    let a_r = match &a.retain {
        Some(path) => anchors::load_anchor_file(&vocab, path, AnchorRole::Retain)?,
        None if a.no_retain => AnchorSet::retain("retain", vec![]),
        None => default_retain(&vocab, c, cat),
    };
    let mut edit = cfg.edit_config();
    if let Some(m) = a.mode {
        edit.mode = m.into();
    }
    let (edited, report) = run_edit(&ckpt, &a_f, &a_r, &edit)?;
    save_checkpoint(&edited, &a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(json!({
        "checkpoint": a.out,
        "mode": report.mode,
        "forget_anchors": report.forget_anchors,
        "retain_anchors": report.retain_anchors,
    }))
}

fn cmd_probe(a: &ProbeArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.config)?;
    let vocab = Vocabulary::builtin();
    let ckpt = load_checkpoint(&a.ckpt)?;
    let c = concept(&vocab, &cfg, a.concept.as_deref())?;
    let report = probe_experiment(
        &ckpt,
        &vocab,
        c,
        template_category(a.template, c),
        &cfg.probe,
        &cfg.capture,
        &cfg.probe_eval,
    )?;
    write_json(&a.out, &report)?;
    Ok(json!({
        "report": a.out,
        "recall_text": report.recall_text,
        "recall_activation": report.recall_activation,
    }))
}

fn cmd_eval(a: &EvalArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.config)?;
    let vocab = Vocabulary::builtin();
    let baseline = load_checkpoint(&a.baseline)?;
    let edited = load_checkpoint(&a.edited)?;
    let c = concept(&vocab, &cfg, a.concept.as_deref())?;
    let report = run_benchmark(&baseline, &edited, &vocab, c, &cfg.suite)?;
    write_json(&a.out, &report)?;
    Ok(json!({
        "report": a.out,
        "baseline_target": report.baseline.target,
        "edited_target": report.edited.target,
        "edited_retention": report.edited.retention,
    }))
}

fn cmd_sweep(a: &SweepArgs) -> Result<serde_json::Value> {
    let cfg = run_config(&a.config)?;
    let vocab = Vocabulary::builtin();
    let ckpt: ModelCheckpoint = match &a.ckpt {
        Some(path) => load_checkpoint(path)?,
        None => init_model(&cfg.engine)?,
    };
    let c = concept(&vocab, &cfg, a.concept.as_deref())?;
    let axis = SweepAxis::from(a.axis);
    let values = if a.values.is_empty() {
        axis.default_values()
    } else {
        a.values.clone()
    };
    let modes: Vec<EditMode> = a.modes.iter().map(|m| EditMode::from(*m)).collect();
    let rows = sweep(&ckpt, &vocab, c, axis, &values, &modes, &cfg.edit_config(), &cfg.suite)?;
    save_sweep_csv(&a.out, &rows)?;
    Ok(json!({ "table": a.out, "rows": rows.len() }))
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::ValidationError {
                key: "jobs".into(),
                reason: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::ValidationError {
                key: "jobs".into(),
                reason: e.to_string(),
            })?;
    }
    match &cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Capture(a) => cmd_capture(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", error_json("UsageError", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::from(1)
        }
    }
}

