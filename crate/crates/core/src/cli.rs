//! `mdknet` command line: `gen`, `train`, `eval`, `compare`.
//!
//! Exit codes: 0 success, 2 configuration error (bad recipe, flags, missing
//! dataset, unsupported checkpoint version), 3 runtime abort (non-finite
//! loss, I/O failure, corrupt artifacts).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::synth::{self, BenchmarkSpec, Split};
use crate::trainer::run::{read_metrics_csv, MetricRow, METRICS_CSV};
use crate::trainer::{evaluate, run_experiment, Checkpoint, RunOptions, TensorData, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// An experiment recipe: benchmark, training configuration, where to write
/// runs and which variants to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecipe {
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

impl ExperimentRecipe {
    /// The default benchmark with default training settings.
    pub fn default_recipe(seed: u64, dataset: &Path, output_dir: &Path) -> Self {
        ExperimentRecipe {
            benchmark: BenchmarkSpec::default_recipe(seed),
            train: TrainConfig {
                seed,
                dataset_path: dataset.to_path_buf(),
                ..TrainConfig::default()
            },
            output_dir: output_dir.to_path_buf(),
            variants: all_variants(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.validate()?;
        self.train.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("recipe lists no variants".into()));
        }
        Ok(())
    }

    /// Reads and validates a recipe. Relative paths inside it resolve
    /// against the recipe's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read recipe {}: {e}", path.display())))?;
        let mut r: ExperimentRecipe = serde_json::from_str(&text).map_err(|e| Error::json(path.display(), e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        r.output_dir = resolve(&r.output_dir);
        r.train.dataset_path = resolve(&r.train.dataset_path);
        r.train.checkpoint_path = r.train.checkpoint_path.as_deref().map(resolve);
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Parser)]
#[command(name = "mdknet", version, about = "Multidomain density regression with instance-specific BN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark described by a recipe.
    Gen {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the recipe's benchmark seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing benchmark.
        #[arg(long)]
        force: bool,
    },
    /// Train one or all variants.
    Train {
        #[arg(long)]
        recipe: PathBuf,
        /// base, gcl, vcl or all (default: the recipe's list).
        #[arg(long)]
        variant: Option<String>,
        /// Continue from a checkpoint (single variant only).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a benchmark's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Join the final metrics of several runs into one table.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (including the program name), runs the command, writes
/// its report to `out` and diagnostics to `err`, and returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command) {
        Ok(report) => {
            let _ = out.write_all(report.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Gen { recipe, out, seed, force } => cmd_gen(&recipe, &out, seed, force),
        Command::Train { recipe, variant, resume, quiet } => cmd_train(&recipe, variant.as_deref(), resume.as_deref(), !quiet),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Compare { runs } => cmd_compare(&runs),
    }
}

pub fn cmd_gen(recipe: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<String> {
    let r = ExperimentRecipe::load(recipe)?;
    let mut spec = r.benchmark;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for sub in ["train", "test", "manifest.json"] {
            let p = out.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            } else if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let summary = synth::build_benchmark(&spec, out)?;
    let mut s = format!("benchmark written to {} (seed {})\n", out.display(), spec.seed);
    let _ = writeln!(s, "{:<8} {:>6} {:>6}", "domain", "train", "test");
    for (m, (tr, te)) in summary.counts.iter().enumerate() {
        let _ = writeln!(s, "{m:<8} {tr:>6} {te:>6}");
    }
    Ok(s)
}

fn parse_variants(arg: Option<&str>, recipe: &ExperimentRecipe) -> Result<Vec<Variant>> {
    match arg {
        None => Ok(recipe.variants.clone()),
        Some("all") => Ok(all_variants()),
        Some(v) => Ok(vec![v.parse()?]),
    }
}

pub fn cmd_train(recipe: &Path, variant: Option<&str>, resume: Option<&Path>, verbose: bool) -> Result<String> {
    let r = ExperimentRecipe::load(recipe)?;
    let variants = parse_variants(variant, &r)?;
    if resume.is_some() && variants.len() != 1 {
        return Err(Error::Config("--resume needs exactly one --variant".into()));
    }
    if !r.train.dataset_path.join("manifest.json").exists() {
        return Err(Error::MissingDataset(r.train.dataset_path.clone()));
    }
    let mut report = String::new();
    for v in variants {
        let cfg = TrainConfig {
            variant: v,
            ..r.train.clone()
        };
        let dir = r.output_dir.join(v.as_str());
        let opts = RunOptions {
            resume: resume.map(Path::to_path_buf),
            stop_after: None,
            verbose,
        };
        let res = run_experiment(&cfg, &dir, &opts)?;
        let _ = writeln!(report, "{v}: {} epochs -> {}", res.completed_epochs, dir.display());
        for row in res.final_metrics() {
            let _ = writeln!(report, "  domain {}  MAE {}  RMSE {}", row.domain, row.mae, row.rmse);
        }
    }
    Ok(report)
}

pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let test = TensorData::from_dataset(&synth::load_split(data, Split::Test)?)?;
    if test.num_domains != ck.state.model.config.num_domains {
        return Err(Error::Config(format!(
            "checkpoint has {} domains but {} has {}",
            ck.state.model.config.num_domains,
            data.display(),
            test.num_domains
        )));
    }
    let ev = evaluate(&ck.state.model, &test)?;
    let mut s = format!(
        "checkpoint {} ({} after {} epochs)\n",
        checkpoint.display(),
        ck.config.variant,
        ck.state.next_epoch
    );
    let _ = writeln!(s, "domain,scenes,MAE,RMSE");
    for d in &ev.domains {
        let _ = writeln!(s, "{},{},{},{}", d.domain, d.scenes, d.mae, d.rmse);
    }
    Ok(s)
}

/// Final-epoch rows of one run's metrics CSV.
pub fn final_rows(run: &Path) -> Result<Vec<MetricRow>> {
    let path = run.join(METRICS_CSV);
    if !path.exists() {
        return Err(Error::Config(format!("no {METRICS_CSV} in {}", run.display())));
    }
    let rows = read_metrics_csv(&path)?;
    let last = rows
        .iter()
        .map(|r| r.epoch)
        .max()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no rows", path.display())))?;
    Ok(rows.into_iter().filter(|r| r.epoch == last).collect())
}

/// A joined comparison: one row per run, MAE and RMSE columns per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub runs: Vec<(String, Vec<Option<f64>>)>,
}

impl Comparison {
    /// Index of the best (lowest) run per column.
    pub fn best(&self) -> Vec<Option<usize>> {
        (0..self.columns.len())
            .map(|c| {
                let mut best: Option<(usize, f64)> = None;
                for (i, (_, vals)) in self.runs.iter().enumerate() {
                    if let Some(v) = vals[c] {
                        if best.is_none_or(|(_, b)| v < b) {
                            best = Some((i, v));
                        }
                    }
                }
                best.map(|(i, _)| i)
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let best = self.best();
        let name_w = self.runs.iter().map(|(n, _)| n.len()).max().unwrap_or(3).max(3);
        let mut s = format!("{:<name_w$}", "run");
        for c in &self.columns {
            let _ = write!(s, "  {c:>12}");
        }
        s.push('\n');
        for (i, (name, vals)) in self.runs.iter().enumerate() {
            let _ = write!(s, "{name:<name_w$}");
            for (c, v) in vals.iter().enumerate() {
                let cell = match v {
                    Some(v) if best[c] == Some(i) => format!("*{v:.4}"),
                    Some(v) => format!("{v:.4}"),
                    None => "-".into(),
                };
                let _ = write!(s, "  {cell:>12}");
            }
            s.push('\n');
        }
        s.push_str("* lowest value in the column\n");
        s
    }
}

pub fn compare(runs: &[PathBuf]) -> Result<Comparison> {
    let mut per_run = Vec::new();
    let mut domains = 0;
    for run in runs {
        let rows = final_rows(run)?;
        domains = domains.max(rows.iter().map(|r| r.domain + 1).max().unwrap_or(0));
        let label = match rows.first() {
            Some(r) => format!("{} ({})", run.display(), r.variant),
            None => run.display().to_string(),
        };
        per_run.push((label, rows));
    }
    let mut columns = Vec::new();
    for d in 0..domains {
        columns.push(format!("d{d} MAE"));
        columns.push(format!("d{d} RMSE"));
    }
    let runs = per_run
        .into_iter()
        .map(|(label, rows)| {
            let mut vals = vec![None; 2 * domains];
            for r in rows {
                vals[2 * r.domain] = Some(r.mae);
                vals[2 * r.domain + 1] = Some(r.rmse);
            }
            (label, vals)
        })
        .collect();
    Ok(Comparison { columns, runs })
}

pub fn cmd_compare(runs: &[PathBuf]) -> Result<String> {
    Ok(compare(runs)?.render())
}
