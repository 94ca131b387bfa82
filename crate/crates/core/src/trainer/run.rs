use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::synth::{self, Split};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::train::{evaluate, train_epoch, EpochReport, Evaluation, TensorData, TrainerState};

pub const METRICS_CSV: &str = "metrics.csv";
pub const GAMMA_CSV: &str = "gamma.csv";
pub const LABELS_CSV: &str = "labels.csv";
pub const LOSSES_CSV: &str = "losses.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint.json";

/// One line of the metrics CSV: test-split metrics for one domain after
/// `epoch`, alongside that epoch's mean training losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub epoch: usize,
    pub variant: Variant,
    pub domain: usize,
    #[serde(rename = "MAE")]
    pub mae: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    pub l_den: f64,
    pub l_cls: f64,
    pub alpha: f64,
}

pub const METRICS_HEADER: [&str; 8] = ["epoch", "variant", "domain", "MAE", "RMSE", "l_den", "l_cls", "alpha"];

impl MetricRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.variant.to_string(),
            self.domain.to_string(),
            self.mae.to_string(),
            self.rmse.to_string(),
            self.l_den.to_string(),
            self.l_cls.to_string(),
            self.alpha.to_string(),
        ]
    }
}

pub fn metric_rows(epoch: usize, variant: Variant, report_losses: (f64, f64, f64), eval: &Evaluation) -> Vec<MetricRow> {
    let (l_den, l_cls, alpha) = report_losses;
    eval.domains
        .iter()
        .map(|d| MetricRow {
            epoch,
            variant,
            domain: d.domain,
            mae: d.mae,
            rmse: d.rmse,
            l_den,
            l_cls,
            alpha,
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: malformed CSV: {other:?}", path.display())),
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(path, &header, rows.iter().map(MetricRow::fields))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn label_header(v: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "image_id".to_string()];
    h.extend((0..v).map(|c| format!("target_{c}")));
    h.extend((0..v).map(|c| format!("raw_{c}")));
    h
}

pub fn gamma_header(c: usize) -> Vec<String> {
    let mut h = vec!["image_id".to_string(), "domain_id".to_string()];
    h.extend((0..c).map(|i| format!("gamma_{i}")));
    h
}

pub const LOSSES_HEADER: [&str; 5] = ["epoch", "batch", "l_den", "l_cls", "total"];

/// Drops rows whose leading `epoch` field is `>= keep_before`, so a resumed
/// run appends onto exactly the history the checkpoint describes.
fn truncate_epoch_csv(path: &Path, keep_before: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::with_capacity(text.len());
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .is_some_and(|e| e < keep_before);
        if keep {
            kept.push_str(line);
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub out_dir: PathBuf,
    pub history: Vec<MetricRow>,
    pub completed_epochs: usize,
    pub last_eval: Option<Evaluation>,
    pub state: TrainerState,
}

impl RunResult {
    /// Metric rows of the most recent evaluation.
    pub fn final_metrics(&self) -> Vec<&MetricRow> {
        let last = self.history.last().map(|r| r.epoch);
        self.history.iter().filter(|r| Some(r.epoch) == last).collect()
    }
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig {
        dataset_path: PathBuf::new(),
        checkpoint_path: None,
        ..c.clone()
    };
    strip(a) == strip(b)
}

pub fn checkpoint_dir(cfg: &TrainConfig, out_dir: &Path) -> PathBuf {
    cfg.checkpoint_path.clone().unwrap_or_else(|| out_dir.join("checkpoints"))
}

/// Trains `cfg.variant` on the dataset at `cfg.dataset_path`, writing the
/// metrics, loss, label-trace and γ CSVs plus checkpoints under `out_dir`.
pub fn run_experiment(cfg: &TrainConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunResult> {
    cfg.validate()?;
    let train = TensorData::from_dataset(&synth::load_split(&cfg.dataset_path, Split::Train)?)?;
    let test = TensorData::from_dataset(&synth::load_split(&cfg.dataset_path, Split::Test)?)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = checkpoint_dir(cfg, out_dir);

    let labels_path = out_dir.join(LABELS_CSV);
    let losses_path = out_dir.join(LOSSES_CSV);
    let metrics_path = out_dir.join(METRICS_CSV);

    let (mut state, mut history) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if !same_run(&ck.config, cfg) {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different training configuration",
                    path.display()
                )));
            }
            if ck.state.model.config.num_domains != train.num_domains
                || (!ck.state.labels.is_empty() && ck.state.labels.len() != train.len())
            {
                return Err(Error::Config(format!("checkpoint {} does not match the dataset", path.display())));
            }
            truncate_epoch_csv(&labels_path, ck.state.next_epoch)?;
            truncate_epoch_csv(&losses_path, ck.state.next_epoch)?;
            (ck.state, ck.history)
        }
        None => {
            for p in [&labels_path, &losses_path, &metrics_path, &out_dir.join(GAMMA_CSV)] {
                if p.exists() {
                    fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            (TrainerState::new(cfg, &train)?, Vec::new())
        }
    };
    write_metrics_csv(&metrics_path, &history)?;

    let v = crate::dvc::num_classes(train.num_domains);
    let mut last_eval = None;
    while state.next_epoch < cfg.epochs {
        if opts.stop_after.is_some_and(|s| state.next_epoch >= s) {
            break;
        }
        let report = train_epoch(&mut state, &train, cfg)?;
        append_epoch_logs(&report, &labels_path, &losses_path, v)?;
        let e = report.epoch;
        let stopping = opts.stop_after.is_some_and(|s| state.next_epoch >= s);
        if cfg.is_eval_epoch(e) {
            let eval = evaluate(&state.model, &test)?;
            history.extend(metric_rows(e, cfg.variant, (report.l_den, report.l_cls, report.alpha), &eval));
            write_metrics_csv(&metrics_path, &history)?;
            write_gamma_csv(&out_dir.join(GAMMA_CSV), &test, &eval)?;
            if opts.verbose {
                let cells: Vec<String> = eval.domains.iter().map(|d| format!("d{} MAE {:.3}", d.domain, d.mae)).collect();
                eprintln!("[{}] epoch {:>4}  l_den {:.5}  l_cls {:.5}  {}", cfg.variant, e, report.l_den, report.l_cls, cells.join("  "));
            }
            last_eval = Some(eval);
        }
        if cfg.is_eval_epoch(e) || stopping {
            let ck = Checkpoint {
                config: cfg.clone(),
                state: state.clone(),
                history: history.clone(),
            };
            ck.save(&ckpt_dir.join(format!("epoch_{:04}.json", state.next_epoch)))?;
            ck.save(&out_dir.join(LATEST_CHECKPOINT))?;
        }
    }

    Ok(RunResult {
        out_dir: out_dir.to_path_buf(),
        completed_epochs: state.next_epoch,
        history,
        last_eval,
        state,
    })
}

fn append_epoch_logs(report: &EpochReport, labels: &Path, losses: &Path, v: usize) -> Result<()> {
    let header: Vec<String> = LOSSES_HEADER.iter().map(|s| s.to_string()).collect();
    append_csv(
        losses,
        &header,
        report.batch_losses.iter().enumerate().map(|(b, l)| {
            vec![report.epoch.to_string(), b.to_string(), l.l_den.to_string(), l.l_cls.to_string(), l.total.to_string()]
        }),
    )?;
    if !report.label_rows.is_empty() {
        append_csv(
            labels,
            &label_header(v),
            report.label_rows.iter().map(|r| {
                let mut f = vec![r.epoch.to_string(), r.image_id.to_string()];
                f.extend(r.target.iter().map(f64::to_string));
                f.extend(r.raw.iter().map(f64::to_string));
                f
            }),
        )?;
    }
    Ok(())
}

pub fn write_gamma_csv(path: &Path, data: &TensorData, eval: &Evaluation) -> Result<()> {
    let c = eval.gamma.first().map_or(0, Vec::len);
    write_csv(
        path,
        &gamma_header(c),
        eval.gamma.iter().enumerate().map(|(r, g)| {
            let mut f = vec![data.image_ids[r].to_string(), data.domains[r].to_string()];
            f.extend(g.iter().map(f64::to_string));
            f
        }),
    )
}

/// Parsed γ CSV: `(image_id, domain_id, γ)` rows.
pub fn read_gamma_csv(path: &Path) -> Result<Vec<(u64, usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |f: &str| Error::InvalidArgument(format!("{}: bad field `{f}`", path.display()));
        let id = rec.get(0).and_then(|f| f.parse().ok()).ok_or_else(|| bad("image_id"))?;
        let dom = rec.get(1).and_then(|f| f.parse().ok()).ok_or_else(|| bad("domain_id"))?;
        let g = rec.iter().skip(2).map(|f| f.parse::<f64>().map_err(|_| bad(f))).collect::<Result<Vec<_>>>()?;
        out.push((id, dom, g));
    }
    Ok(out)
}
