//! Command-line front end: `gen-data`, `train`, `eval`, `count-params`,
//! `grad-check`, `similarity` and `report`.
//!
//! Any `--table.key value` (or `--table.key=value`) argument overrides the
//! matching key of the run configuration file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{self, human, ParamAudit};
use crate::config::{output_root, ResolvedConfig, RunConfigFile};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, CHECKPOINT_MANIFEST};
use crate::petl::{Method, PetlConfig};
use crate::train::{self, evaluate, fmt_sig9, gen_synthetic, DatasetBundle, RunReport};
use crate::verify::{self, GRAD_TOLERANCE};

pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "hpt", version, about = "Parameter-efficient tuning of a frozen transformer encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/val/test splits.
    GenData(GenDataArgs),
    /// Train a model and write report, loss curve and best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Audit trainable parameters, optionally against a published row.
    CountParams(CountParamsArgs),
    /// Finite-difference gradient check of every layer family.
    GradCheck(GradCheckArgs),
    /// Per-block linear CKA between two checkpoints.
    Similarity(SimilarityArgs),
    /// Mean and standard deviation of test accuracy over finished runs.
    Report(ReportArgs),
}

/// Configuration sources shared by the run-style commands.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (defaults under $HPT_OUTPUT_ROOT, or `runs`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted overrides collected from `--table.key value` arguments.
    #[arg(skip)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MethodArgs {
    /// full, probe, adapter, hpt, lora or ssf.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub rate: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// parallel_mhsa, parallel_ffn or both.
    #[arg(long)]
    pub placement: Option<String>,
    /// Comma-separated SSF sites.
    #[arg(long, value_delimiter = ',')]
    pub insertions: Option<Vec<String>>,
    /// One module instance shared by every block.
    #[arg(long, conflicts_with = "non_shared")]
    pub shared: bool,
    /// One module instance per block.
    #[arg(long)]
    pub non_shared: bool,
    /// Run seed (module and head initialization, shuffling).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl MethodArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(m) = &self.method {
            push("method.kind", format!("{m:?}"));
        }
        if let Some(b) = self.bins {
            push("method.bins", b.to_string());
        }
        if let Some(r) = self.rate {
            push("method.rate", r.to_string());
        }
        if let Some(r) = self.rank {
            push("method.rank", r.to_string());
        }
        if let Some(p) = &self.placement {
            push("method.placement", format!("{p:?}"));
        }
        if let Some(sites) = &self.insertions {
            let quoted: Vec<_> = sites.iter().map(|s| format!("{s:?}")).collect();
            push("method.insertions", format!("[{}]", quoted.join(", ")));
        }
        if self.shared {
            push("method.shared", "true".into());
        }
        if self.non_shared {
            push("method.shared", "false".into());
        }
        if let Some(s) = self.seed {
            push("train.seed", s.to_string());
        }
        out
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Dataset directory written by `gen-data`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Suppress per-epoch lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Dataset directory; defaults to the data the checkpoint was trained on.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CountParamsArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Published table row, e.g. `table1-hpt16`.
    #[arg(long)]
    pub preset: Option<String>,
    /// List the available presets.
    #[arg(long)]
    pub list_presets: bool,
    /// Count every parameter instead of the trainable ones.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupts one backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    pub fault: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimilarityArgs {
    /// Candidate checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub a: PathBuf,
    /// Reference checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub b: PathBuf,
    /// Probe dataset directory; defaults to the data of checkpoint `a`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Use at most this many probe samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories or `report.json` files; directories are searched
    /// recursively.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Directory for `summary.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Splits `--table.key value` and `--table.key=value` pairs out of `args`.
pub fn extract_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|body| body.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(body) => {
                if let Some((k, v)) = body.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("override --{body} needs a value")))?;
                    overrides.push((body.to_string(), v.clone()));
                }
            }
            None => rest.push(arg.clone()),
        }
    }
    Ok((rest, overrides))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 validation error, 2 I/O or
/// compatibility error.
pub fn main_with(args: &[String]) -> i32 {
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let mut cli = match Cli::try_parse_from(&rest) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match &mut cli.command {
        Command::GenData(a) => a.cfg.overrides = overrides,
        Command::Train(a) => a.cfg.overrides = overrides,
        Command::CountParams(a) => a.cfg.overrides = overrides,
        Command::GradCheck(a) => a.cfg.overrides = overrides,
        _ if !overrides.is_empty() => {
            eprintln!("error: this command takes no --table.key overrides");
            return 1;
        }
        _ => {}
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| 0),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Eval(a) => cmd_eval(a).map(|_| 0),
        Command::CountParams(a) => cmd_count_params(a).map(|_| 0),
        Command::GradCheck(a) => cmd_grad_check(a).map(|ok| if ok { 0 } else { 1 }),
        Command::Similarity(a) => cmd_similarity(a).map(|_| 0),
        Command::Report(a) => cmd_report(a).map(|_| 0),
    }
}

/// Config file, then convenience flags, then dotted overrides.
fn load_config(cfg: &ConfigArgs, extra: &[(String, String)]) -> Result<RunConfigFile> {
    let base = match &cfg.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let mut all = extra.to_vec();
    all.extend(cfg.overrides.iter().cloned());
    base.with_overrides(&all)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Short directory name for a method, e.g. `hpt8-shared`.
pub fn run_tag(petl: &PetlConfig) -> String {
    let m = match &petl.method {
        Method::FullFinetune => "full".to_string(),
        Method::LinearProbe => "probe".to_string(),
        Method::Adapter { rate } => format!("adapter{rate}"),
        Method::Hpt { bins, .. } => format!("hpt{bins}"),
        Method::Lora { rank } => format!("lora{rank}"),
        Method::Ssf { insertions } => format!("ssf{}", insertions.len()),
    };
    match petl.method {
        Method::FullFinetune | Method::LinearProbe => m,
        _ if petl.shared => format!("{m}-shared"),
        _ => format!("{m}-nonshared"),
    }
}

/// Loads `data.dir`, or generates the splits in memory.
fn load_data(file: &RunConfigFile) -> Result<DatasetBundle> {
    match &file.data.dir {
        Some(dir) => DatasetBundle::read_dir(dir),
        None => gen_synthetic(&file.data.generator),
    }
}

fn check_data(model: &crate::model::ModelConfig, data: &DatasetBundle) -> Result<()> {
    let m = &data.manifest;
    if m.classes != model.classes || m.features != model.features || m.seq_len > model.max_len {
        return Err(Error::Config(format!(
            "data (C={}, N={}, F={}) does not fit the model (C={}, N_max={}, F={})",
            m.classes, m.seq_len, m.features, model.classes, model.max_len, model.features
        )));
    }
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<PathBuf> {
    let mut extra = Vec::new();
    if let Some(s) = args.seed {
        extra.push(("data.generator.seed".to_string(), s.to_string()));
    }
    let file = load_config(&args.cfg, &extra)?;
    let resolved = file.resolve()?;
    let out = args
        .cfg
        .out
        .clone()
        .or_else(|| file.data.dir.clone())
        .unwrap_or_else(|| output_root().join("data"));
    let bundle = gen_synthetic(&file.data.generator)?;
    bundle.write_dir(&out)?;
    resolved.write_manifest(&out)?;
    let sizes = bundle.manifest.split_sizes;
    println!(
        "wrote {} (train {}, val {}, test {})",
        out.display(),
        sizes[0],
        sizes[1],
        sizes[2]
    );
    Ok(out)
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub report: RunReport,
    pub resolved: ResolvedConfig,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let mut extra = args.method.overrides();
    if let Some(d) = &args.data {
        extra.push(("data.dir".into(), format!("{:?}", d.display().to_string())));
    }
    let mut file = load_config(&args.cfg, &extra)?;
    let probe = file.resolve()?;
    let dir = args
        .cfg
        .out
        .clone()
        .or_else(|| file.output.dir.clone())
        .unwrap_or_else(|| output_root().join(format!("{}-seed{}", run_tag(&probe.petl), probe.train.seed)));
    file.output.dir = Some(dir.clone());
    let resolved = file.resolve()?;

    let data = load_data(&resolved.file)?;
    check_data(&resolved.file.model, &data)?;
    let mut model = EncoderModel::build(
        resolved.file.model.clone(),
        resolved.petl.clone(),
        resolved.backbone_seed,
        resolved.train.seed,
    )?;
    resolved.write_manifest(&dir)?;
    println!(
        "training {} ({} trainable parameters) -> {}",
        resolved.petl.method,
        model.store.count(true),
        dir.display()
    );
    let quiet = args.quiet;
    let report = train::train_with(&mut model, &data, &resolved.train, |e| {
        if !quiet {
            println!(
                "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
                e.epoch, e.train_loss, e.val_loss, e.val_acc
            );
        }
    })?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    write_text(&dir.join(LOSS_FILE), &report.loss_csv())?;
    let run = serde_json::json!({ "config": resolved.file.to_toml()? });
    model.save_checkpoint(&dir.join(CHECKPOINT_DIR), Some(run))?;
    println!(
        "best epoch {} of {}, test_loss {:.6}, test_accuracy {:.4}",
        report.best_epoch, report.stop_epoch, report.test_loss, report.test_accuracy
    );
    Ok(TrainOutput { dir, report, resolved })
}

/// The run configuration stored alongside a checkpoint.
fn checkpoint_config(dir: &Path) -> Result<(EncoderModel, RunConfigFile)> {
    let (model, manifest) = EncoderModel::load_checkpoint(dir)?;
    let text = manifest
        .run
        .as_ref()
        .and_then(|r| r.get("config"))
        .and_then(|c| c.as_str())
        .ok_or_else(|| {
            Error::Format(format!(
                "{} carries no run configuration",
                dir.join(CHECKPOINT_MANIFEST).display()
            ))
        })?;
    let file = RunConfigFile::from_toml(text)?;
    if file.model != model.config {
        return Err(Error::Architecture(format!(
            "{}: stored configuration disagrees with the checkpoint",
            dir.display()
        )));
    }
    Ok((model, file))
}

fn checkpoint_data(file: &RunConfigFile, data: Option<&PathBuf>) -> Result<DatasetBundle> {
    let mut file = file.clone();
    if let Some(d) = data {
        file.data.dir = Some(d.clone());
    }
    load_data(&file)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub split: String,
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalMetrics> {
    let (model, mut file) = checkpoint_config(&args.checkpoint)?;
    if let Some(d) = &args.data {
        file.data.dir = Some(d.clone());
    }
    let data = load_data(&file)?;
    check_data(&model.config, &data)?;
    let split = data.split(args.split.as_str())?;
    let (loss, accuracy) = evaluate(&model, split)?;
    let metrics = EvalMetrics {
        split: args.split.as_str().into(),
        samples: split.len(),
        loss,
        accuracy,
    };
    println!("{} loss {:.6} accuracy {:.4} ({} samples)", metrics.split, loss, accuracy, metrics.samples);
    if let Some(out) = &args.out {
        let resolved = file.resolve()?;
        resolved.write_manifest(out)?;
        write_json(&out.join(format!("eval-{}.json", metrics.split)), &metrics)?;
    }
    Ok(metrics)
}

pub fn cmd_count_params(args: &CountParamsArgs) -> Result<Vec<ParamAudit>> {
    if args.list_presets {
        for p in analysis::presets() {
            println!("{:<22} {} / {}", p.name, p.table, p.row);
        }
        return Ok(Vec::new());
    }
    let file = load_config(&args.cfg, &args.method.overrides())?;
    let resolved = file.resolve()?;
    let audits = match &args.preset {
        Some(name) => {
            let preset = analysis::preset(name)?;
            println!("{} ({} / {}) at full scale", preset.name, preset.table, preset.row);
            analysis::audit_preset(&preset)?
        }
        None => {
            let mut model = EncoderModel::new(resolved.file.model.clone(), resolved.petl.clone())?;
            model.freeze_base();
            vec![analysis::count_params(&model, !args.all)?]
        }
    };
    for audit in &audits {
        print!("{}", audit.table());
    }
    if let Some(out) = &args.cfg.out {
        resolved.write_manifest(out)?;
        for audit in &audits {
            let name = match &audit.published {
                Some(p) => format!("audit-{}.csv", p.dataset.replace('/', "-")),
                None => "audit.csv".into(),
            };
            write_text(&out.join(name), &audit.csv())?;
        }
    }
    Ok(audits)
}

/// Returns whether every family passed.
pub fn cmd_grad_check(args: &GradCheckArgs) -> Result<bool> {
    let file = load_config(&args.cfg, &[])?;
    let resolved = file.resolve()?;
    let checks = verify::grad_check_families(args.seed, args.fault)?;
    let rows: Vec<(String, String)> = checks
        .iter()
        .map(|c| {
            let verdict = if c.pass { "ok" } else { "FAIL" };
            (c.family.clone(), format!("{:.3e} {verdict}", c.max_rel_error))
        })
        .collect();
    print!("{}", analysis::aligned(&["family", "max_rel_error"], &rows));
    let pass = checks.iter().all(|c| c.pass);
    println!(
        "{} (tolerance {GRAD_TOLERANCE:e})",
        if pass { "all families pass" } else { "gradient check FAILED" }
    );
    if let Some(out) = &args.cfg.out {
        resolved.write_manifest(out)?;
        let mut csv = String::from("family,max_rel_error,coordinates,pass\n");
        for c in &checks {
            let _ = writeln!(csv, "{},{},{},{}", c.family, fmt_sig9(c.max_rel_error), c.coordinates, c.pass);
        }
        write_text(&out.join("grad_check.csv"), &csv)?;
    }
    Ok(pass)
}

pub fn cmd_similarity(args: &SimilarityArgs) -> Result<analysis::SimilarityReport> {
    let (a, file) = checkpoint_config(&args.a)?;
    let (b, _) = checkpoint_config(&args.b)?;
    let data = checkpoint_data(&file, args.data.as_ref())?;
    check_data(&a.config, &data)?;
    let split = data.split(args.split.as_str())?;
    let m = args.limit.unwrap_or(split.len()).min(split.len());
    let report = analysis::similarity_report(&a, &b, &split.frames[..m])?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        let mut file = file;
        if let Some(d) = &args.data {
            file.data.dir = Some(d.clone());
        }
        file.resolve()?.write_manifest(out)?;
        write_text(&out.join("similarity.csv"), &report.csv())?;
    }
    Ok(report)
}

/// Aggregate over the runs of one method.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub shared: bool,
    pub runs: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_accuracy: f64,
    pub trainable_params: usize,
}

fn collect_reports(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(reports: &[RunReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, bool), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.method.clone(), r.shared)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, shared), runs)| {
            let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            SummaryRow {
                method,
                shared,
                runs: runs.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                trainable_params: runs[0].trainable_params,
            }
        })
        .collect()
}

/// Quotes a CSV field when it holds a comma or quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_report(args: &ReportArgs) -> Result<Vec<SummaryRow>> {
    let mut paths = Vec::new();
    for input in &args.inputs {
        collect_reports(input, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(Error::Config(format!("no {REPORT_FILE} found under the given paths")));
    }
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<RunReport>(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize(&reports);
    let mut csv = String::from("method,shared,runs,mean_accuracy,std_accuracy,trainable_params\n");
    println!(
        "{:<28} {:>6} {:>4} {:>9} {:>8} {:>8}",
        "method", "shared", "runs", "mean_acc", "std", "params"
    );
    for r in &rows {
        println!(
            "{:<28} {:>6} {:>4} {:>9.4} {:>8.4} {:>8}",
            r.method,
            r.shared,
            r.runs,
            r.mean_accuracy,
            r.std_accuracy,
            human(r.trainable_params as f64)
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            csv_field(&r.method),
            r.shared,
            r.runs,
            fmt_sig9(r.mean_accuracy),
            fmt_sig9(r.std_accuracy),
            r.trainable_params
        );
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_text(&out.join("summary.csv"), &csv)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) = extract_overrides(&s(&[
            "hpt",
            "train",
            "--train.lr",
            "1e-3",
            "--out",
            "a.b",
            "--method.bins=4",
            "--seed",
            "2",
        ]))
        .unwrap();
        assert_eq!(rest, s(&["hpt", "train", "--out", "a.b", "--seed", "2"]));
        assert_eq!(
            ov,
            vec![("train.lr".into(), "1e-3".into()), ("method.bins".into(), "4".into())]
        );
        assert!(extract_overrides(&s(&["hpt", "train", "--train.lr"])).is_err());
    }

    #[test]
    fn convenience_flags_map_to_table_keys() {
        let cli = Cli::try_parse_from(s(&[
            "hpt",
            "train",
            "--method",
            "ssf",
            "--insertions",
            "ln1,qkv",
            "--non-shared",
            "--seed",
            "3",
        ]))
        .unwrap();
        let Command::Train(a) = cli.command else { panic!("train expected") };
        let file = RunConfigFile::default().with_overrides(&a.method.overrides()).unwrap();
        let r = file.resolve().unwrap();
        assert_eq!(run_tag(&r.petl), "ssf2-nonshared");
        assert_eq!(r.train.seed, 3);
    }

    #[test]
    fn shared_flags_conflict_and_splits_are_closed() {
        assert!(Cli::try_parse_from(s(&["hpt", "train", "--shared", "--non-shared"])).is_err());
        assert!(Cli::try_parse_from(s(&["hpt", "eval", "--checkpoint", "x", "--split", "dev"])).is_err());
        for split in ["train", "val", "test"] {
            assert!(Cli::try_parse_from(s(&["hpt", "eval", "--checkpoint", "x", "--split", split])).is_ok());
        }
    }

    #[test]
    fn csv_fields_are_quoted_when_needed() {
        assert_eq!(csv_field("probe"), "probe");
        assert_eq!(csv_field("hpt(8, ParallelMhsa)"), "\"hpt(8, ParallelMhsa)\"");
        assert_eq!(csv_field("a\"b,"), "\"a\"\"b,\"");
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, sd) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(sd, 1.0);
    }

    #[test]
    fn summary_groups_by_method_and_sharing() {
        let report = |method: &str, shared, acc| RunReport {
            method: method.into(),
            shared,
            seed: 0,
            epochs: Vec::new(),
            stop_epoch: 1,
            best_epoch: 1,
            best_val_loss: 0.0,
            test_loss: 0.0,
            test_accuracy: acc,
            trainable_params: 10,
            wall_seconds: 0.0,
        };
        let rows = summarize(&[
            report("hpt(8, ParallelMhsa)", true, 0.8),
            report("hpt(8, ParallelMhsa)", true, 0.9),
            report("hpt(8, ParallelMhsa)", false, 0.7),
        ]);
        assert_eq!(rows.len(), 2);
        let shared = rows.iter().find(|r| r.shared).unwrap();
        assert_eq!(shared.runs, 2);
        assert!((shared.mean_accuracy - 0.85).abs() < 1e-15);
    }
}
