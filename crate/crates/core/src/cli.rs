//! Command-line front end: `gen`, `train` and `report`.
//!
//! The binary is a thin wrapper over [`main_with_args`]. Exit codes are
//! stable for scripting: 0 on success, 1 on runtime failures such as I/O,
//! corrupt files or an aborted run, and 2 on configuration errors.
//!
//! # Config files
//!
//! `--config` takes a JSON object with two optional members, `synthetic`
//! (generator parameters) and `run` (training parameters). Any omitted
//! field keeps its default and unknown keys are rejected:
//!
//! ```json
//! { "synthetic": { "seed": 3, "images_per_task": 96 }, "run": { "lr": 1.0 } }
//! ```
//!
//! # Run directories
//!
//! `train --out DIR` writes `summary.json`, `metrics.csv` (one IoU row per
//! task and class), `diagnostics.csv` (one row per incoming batch) and
//! `checkpoint.ssck` (the final training state). Two runs with the same
//! dataset, config and seed produce byte-identical summaries and metrics.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_checkpoint;
use crate::data::{dataset_hash, generate, load_dataset, write_dataset, SyntheticSpec};
use crate::engine::{run_stream, EStepAudit, Method, RunConfig, StepDiagnostics, TaskMetrics, Toggles};
use crate::error::Error;
use crate::label::LabelId;

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ssck";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub synthetic: SyntheticSpec,
    pub run: RunConfig,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) | Error::Spec(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "emseg",
    version,
    about = "Online class-incremental segmentation on synthetic feature maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ours,
    Er,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::Er => Method::Er,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark directory and print its hash.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a dataset once and write the run artifacts.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Components to switch off, comma separated.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate run directories, grouped by configuration.
    Report {
        /// Run directories, or directories holding run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout and stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen { config, seed, out } => {
            let hash = cmd_gen(config.as_deref(), seed, &out)?;
            println!("{hash}");
            Ok(())
        }
        Command::Train {
            data,
            method,
            seed,
            ablate,
            config,
            out,
        } => {
            let cfg = CliConfig::load(config.as_deref())?;
            let opts = TrainOptions {
                method: method.map(Method::from),
                seed,
                ablate,
            };
            let summary = cmd_train(&data, &cfg.run, &opts, &out)?;
            println!(
                "{}: imIoU {:.4} over {} tasks, artifacts in {}",
                summary.run_id,
                summary.imiou.unwrap_or(f64::NAN),
                summary.per_task_miou.len(),
                out.display()
            );
            Ok(())
        }
        Command::Report { runs, out } => {
            let report = cmd_report(&runs, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if report.runs.is_empty() {
                println!("no runs found");
            } else {
                print!("{}", report.table());
            }
            Ok(())
        }
    }
}

/// Generates the benchmark described by the config (seed optionally
/// overridden) into `out` and returns the dataset hash.
pub fn cmd_gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<String, CliError> {
    let mut spec = CliConfig::load(config)?.synthetic;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let bench = generate(&spec)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    Ok(write_dataset(out, &bench, Some(&spec))?)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub ablate: Vec<String>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub run_id: String,
    /// Identifies the configuration apart from the seed; runs sharing it
    /// are pooled by `report`.
    pub group: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub config: RunConfig,
    pub ablated: Vec<String>,
    pub per_task_miou: Vec<f64>,
    pub imiou: Option<f64>,
    /// Classes left out of each task's mean for a zero IoU denominator.
    pub undefined_classes: Vec<Vec<LabelId>>,
    pub sgd_steps: u64,
    pub incoming_batches: u64,
    pub estep_audit: EStepAudit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

fn group_label(cfg: &RunConfig, ablated: &[String]) -> String {
    match cfg.method {
        Method::Er => "er".into(),
        Method::Ours if ablated.is_empty() => "ours".into(),
        Method::Ours => format!("ours-no-{}", ablated.join("-no-")),
    }
}

/// Resolves flags against the config: `--method er` switches every
/// component off, `--ablate` switches off the listed ones.
pub fn resolve_config(base: &RunConfig, opts: &TrainOptions) -> Result<(RunConfig, Vec<String>), CliError> {
    let mut cfg = base.clone();
    if let Some(m) = opts.method {
        cfg.method = m;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    for name in &opts.ablate {
        cfg.toggles.disable(name.trim())?;
    }
    if cfg.method == Method::Er {
        cfg.toggles = Toggles::none();
    }
    cfg.validate()?;
    let t = cfg.toggles;
    let ablated = Toggles::NAMES
        .iter()
        .zip([t.cbes, t.relabel_composite, t.cosine_norm, t.dynamic_sampling])
        .filter(|(_, on)| !on)
        .map(|(n, _)| n.to_string())
        .collect();
    Ok((cfg, ablated))
}

/// Trains on the dataset at `data` and writes the run directory `out`.
/// A failed run still writes its summary (status `failed`), the metrics of
/// the tasks it finished and its diagnostics, then returns an error.
pub fn cmd_train(data: &Path, base: &RunConfig, opts: &TrainOptions, out: &Path) -> Result<RunSummary, CliError> {
    let (cfg, ablated) = resolve_config(base, opts)?;
    let bench = load_dataset(data)?;
    let hash = dataset_hash(data)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    let group = if cfg.method == Method::Er {
        group_label(&cfg, &[])
    } else {
        group_label(&cfg, &ablated)
    };
    let run_id = format!("{group}-seed{}", cfg.seed);
    let classes: Vec<LabelId> = bench
        .schedule
        .label_space
        .classes_with_background(bench.schedule.label_space.num_tasks())?
        .into_iter()
        .collect();

    let (tasks, diagnostics, outcome) = match run_stream(&bench, &cfg) {
        Ok(r) => (r.tasks.clone(), r.diagnostics.clone(), Ok(r)),
        Err(f) => (f.tasks, f.diagnostics, Err(f.error)),
    };
    let mut summary = RunSummary {
        status: RunStatus::Complete,
        error: None,
        run_id: run_id.clone(),
        group,
        seed: cfg.seed,
        dataset_hash: hash,
        config: cfg.clone(),
        ablated,
        per_task_miou: tasks.iter().map(|t| t.miou).collect(),
        imiou: None,
        undefined_classes: tasks.iter().map(|t| t.undefined_classes.clone()).collect(),
        sgd_steps: 0,
        incoming_batches: 0,
        estep_audit: EStepAudit::default(),
    };
    match &outcome {
        Ok(r) => {
            summary.imiou = Some(r.imiou);
            summary.sgd_steps = r.state.sgd_steps;
            summary.incoming_batches = r.incoming_batches;
            summary.estep_audit = r.audit;
        }
        Err(e) => {
            summary.status = RunStatus::Failed;
            summary.error = Some(e.to_string());
        }
    }

    write_metrics(&out.join(METRICS_FILE), &run_id, &tasks)?;
    write_diagnostics(&out.join(DIAGNOSTICS_FILE), &classes, &diagnostics)?;
    let path = out.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| io_err(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;

    match outcome {
        Ok(r) => {
            write_checkpoint(&out.join(CHECKPOINT_FILE), &r.state)?;
            Ok(summary)
        }
        Err(e) => Err(CliError::Runtime(format!(
            "run {run_id} aborted, partial artifacts in {}: {e}",
            out.display()
        ))),
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| io_err(path, e)
}

fn write_metrics(path: &Path, run_id: &str, tasks: &[TaskMetrics]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["run_id", "task", "class_id", "iou"])
        .map_err(csv_err(path))?;
    for t in tasks {
        for (class, iou) in &t.per_class {
            w.write_record([
                run_id.to_string(),
                t.task.to_string(),
                class.0.to_string(),
                iou.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One row per incoming batch. Per-class columns cover every class of the
/// stream and stay empty while a class is not yet active.
fn write_diagnostics(path: &Path, classes: &[LabelId], rows: &[StepDiagnostics]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header: Vec<String> = [
        "task",
        "batch",
        "loss",
        "incoming",
        "replayed",
        "memory_size",
        "rejected",
        "warning",
    ]
    .map(String::from)
    .to_vec();
    for prefix in ["p_s", "confidence", "pseudo_labels"] {
        header.extend(classes.iter().map(|c| format!("{prefix}_{c}")));
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for d in rows {
        let mut rec = vec![
            d.task.to_string(),
            d.batch.to_string(),
            d.loss.to_string(),
            d.incoming.to_string(),
            d.replayed.to_string(),
            d.memory_size.to_string(),
            d.rejected.to_string(),
            d.warning.clone().unwrap_or_default(),
        ];
        let cell = |m: &BTreeMap<LabelId, f64>, c: &LabelId| m.get(c).map(f64::to_string).unwrap_or_default();
        rec.extend(classes.iter().map(|c| cell(&d.sampling, c)));
        rec.extend(classes.iter().map(|c| cell(&d.confidence, c)));
        rec.extend(
            classes
                .iter()
                .map(|c| d.pseudo_labels.get(c).copied().unwrap_or(0).to_string()),
        );
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub group: String,
    pub runs: usize,
    /// Mean and standard deviation per task, over the runs that reached it.
    pub per_task: Vec<(f64, f64)>,
    pub imiou: (f64, f64),
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupStats>,
    pub warnings: Vec<String>,
}

impl Report {
    fn from_runs(mut runs: Vec<RunSummary>, warnings: Vec<String>) -> Self {
        runs.sort_by(|a, b| (&a.group, a.seed, &a.run_id).cmp(&(&b.group, b.seed, &b.run_id)));
        let mut by_group: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
        for r in runs.iter().filter(|r| r.imiou.is_some()) {
            by_group.entry(&r.group).or_default().push(r);
        }
        let groups = by_group
            .into_iter()
            .map(|(group, members)| {
                let tasks = members.iter().map(|r| r.per_task_miou.len()).max().unwrap_or(0);
                let per_task = (0..tasks)
                    .map(|t| {
                        let v: Vec<f64> = members.iter().filter_map(|r| r.per_task_miou.get(t).copied()).collect();
                        mean_std(&v)
                    })
                    .collect();
                let im: Vec<f64> = members.iter().filter_map(|r| r.imiou).collect();
                GroupStats {
                    group: group.to_string(),
                    runs: members.len(),
                    per_task,
                    imiou: mean_std(&im),
                }
            })
            .collect();
        Self { runs, groups, warnings }
    }

    fn task_count(&self) -> usize {
        self.runs.iter().map(|r| r.per_task_miou.len()).max().unwrap_or(0)
    }

    /// Rows of the report CSV. Run rows carry values in the mean columns
    /// and leave the std columns empty.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let tasks = self.task_count();
        let mut header = vec!["kind".to_string(), "name".into(), "group".into(), "runs".into()];
        for t in 0..tasks {
            header.push(format!("miou_t{t}"));
            header.push(format!("miou_t{t}_std"));
        }
        header.push("imiou".into());
        header.push("imiou_std".into());
        let mut rows = vec![header];
        for r in &self.runs {
            let mut row = vec!["run".to_string(), r.run_id.clone(), r.group.clone(), "1".into()];
            for t in 0..tasks {
                row.push(r.per_task_miou.get(t).map(f64::to_string).unwrap_or_default());
                row.push(String::new());
            }
            row.push(r.imiou.map(|v| v.to_string()).unwrap_or_default());
            row.push(String::new());
            rows.push(row);
        }
        for g in &self.groups {
            let mut row = vec![
                "group".to_string(),
                g.group.clone(),
                g.group.clone(),
                g.runs.to_string(),
            ];
            for t in 0..tasks {
                match g.per_task.get(t) {
                    Some((m, s)) => {
                        row.push(m.to_string());
                        row.push(s.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row.push(g.imiou.0.to_string());
            row.push(g.imiou.1.to_string());
            rows.push(row);
        }
        rows
    }

    /// Human-readable table, values in IoU points.
    pub fn table(&self) -> String {
        let tasks = self.task_count();
        let mut s = format!("{:<40} {:>5}", "run / group", "n");
        for t in 0..tasks {
            s += &format!(" {:>14}", format!("task {t}"));
        }
        s += &format!(" {:>14}\n", "imIoU");
        let pts = |v: f64| format!("{:.2}", 100.0 * v);
        for r in &self.runs {
            s += &format!("{:<40} {:>5}", r.run_id, 1);
            for t in 0..tasks {
                s += &format!(" {:>14}", r.per_task_miou.get(t).map(|v| pts(*v)).unwrap_or("-".into()));
            }
            s += &format!(" {:>14}\n", r.imiou.map(pts).unwrap_or("failed".into()));
        }
        for g in &self.groups {
            s += &format!("{:<40} {:>5}", format!("[{}]", g.group), g.runs);
            for (m, sd) in &g.per_task {
                s += &format!(" {:>14}", format!("{}±{}", pts(*m), pts(*sd)));
            }
            for _ in g.per_task.len()..tasks {
                s += &format!(" {:>14}", "-");
            }
            s += &format!(" {:>14}\n", format!("{}±{}", pts(g.imiou.0), pts(g.imiou.1)));
        }
        s
    }
}

fn read_summary(dir: &Path) -> Result<RunSummary, String> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Collects run summaries from `paths` and writes the report CSV to `out`.
/// A path is either a run directory or a directory of run directories;
/// unreadable or missing summaries are skipped with a warning. When no run
/// is found nothing is written.
pub fn cmd_report(paths: &[PathBuf], out: &Path) -> Result<Report, CliError> {
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        if !p.is_dir() {
            warnings.push(format!("{} is not a directory, skipped", p.display()));
            continue;
        }
        if p.join(SUMMARY_FILE).exists() {
            match read_summary(p) {
                Ok(s) => runs.push(s),
                Err(e) => warnings.push(format!("{e}, skipped")),
            }
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| io_err(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.is_dir())
            .collect();
        children.sort();
        for c in children {
            match read_summary(&c) {
                Ok(s) => runs.push(s),
                Err(e) => warnings.push(format!("{e}, skipped")),
            }
        }
    }
    let report = Report::from_runs(runs, warnings);
    if !report.runs.is_empty() {
        let mut w = csv::Writer::from_path(out).map_err(csv_err(out))?;
        for row in report.csv_rows() {
            w.write_record(&row).map_err(csv_err(out))?;
        }
        w.flush().map_err(|e| io_err(out, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_the_key() {
        let err = CliConfig::from_json(r#"{"run": {"gama": 0.5}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("gama"), "{err}");
        let err = CliConfig::from_json(r#"{"model": {}}"#).unwrap_err();
        assert!(err.to_string().contains("model"));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = CliConfig::from_json(r#"{"run": {"lr": 0.5}}"#).unwrap();
        assert_eq!(c.run.lr, 0.5);
        assert_eq!(c.run.delta, 0.8);
        assert_eq!(c.run.gamma, 0.5);
        assert_eq!(c.run.eta, 1.0);
        assert_eq!(c.run.mu, 0.9);
        assert_eq!(c.run.temperature, 12.0);
        assert_eq!(CliConfig::default().run.lr, 1e-3);
        assert_eq!(c.synthetic, SyntheticSpec::default());
    }

    #[test]
    fn er_alias_clears_toggles() {
        let opts = TrainOptions {
            method: Some(Method::Er),
            ..Default::default()
        };
        let (cfg, ablated) = resolve_config(&RunConfig::default(), &opts).unwrap();
        assert_eq!(cfg.toggles, Toggles::none());
        assert_eq!(ablated.len(), 4);
        assert_eq!(group_label(&cfg, &[]), "er");
    }

    #[test]
    fn ablate_one_component() {
        let opts = TrainOptions {
            ablate: vec!["dynamic_sampling".into()],
            ..Default::default()
        };
        let (cfg, ablated) = resolve_config(&RunConfig::default(), &opts).unwrap();
        assert!(cfg.toggles.cbes && cfg.toggles.relabel_composite && cfg.toggles.cosine_norm);
        assert!(!cfg.toggles.dynamic_sampling);
        assert_eq!(ablated, vec!["dynamic_sampling".to_string()]);
        let bad = TrainOptions {
            ablate: vec!["dropout".into()],
            ..Default::default()
        };
        assert_eq!(resolve_config(&RunConfig::default(), &bad).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn mean_std_arithmetic() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
