use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dvc::{self, LabelState, VirtualLabel};
use crate::error::{Error, Result};
use crate::isbn::{Mode, DEFAULT_MOMENTUM};
use crate::losses::{self, LossBreakdown, Variant};
use crate::numerics::{Matrix, Tensor4};
use crate::parameterizer;
use crate::synth::{self, derive_seed, Dataset};

use super::adam::{optimizer_step, AdamState};
use super::config::TrainConfig;
use super::model::{ForwardTrace, Model, ModelConfig};

/// Seed-path tags. Every random stream is `derive_seed(seed, [tag, ...])`.
pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;

pub const EVAL_BATCH: usize = 64;

/// A dataset flattened into stacked tensors, in `image_id` order.
#[derive(Debug, Clone)]
pub struct TensorData {
    pub inputs: Tensor4,
    pub targets: Tensor4,
    pub domains: Vec<usize>,
    pub image_ids: Vec<u64>,
    pub gt_counts: Vec<f64>,
    pub num_domains: usize,
}

impl TensorData {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let n = data.scenes.len();
        if n == 0 {
            return Err(Error::InvalidArgument("dataset has no scenes".into()));
        }
        let (h, w) = (data.geometry.height, data.geometry.width);
        let mut inputs = Vec::with_capacity(n * h * w);
        let mut targets = Vec::with_capacity(n * h * w);
        for s in &data.scenes {
            inputs.extend_from_slice(s.input_grid.data());
            targets.extend_from_slice(s.gt_density.data());
        }
        Ok(TensorData {
            inputs: Tensor4::from_vec([n, 1, h, w], inputs)?,
            targets: Tensor4::from_vec([n, 1, h, w], targets)?,
            domains: data.scenes.iter().map(|s| s.domain_id).collect(),
            image_ids: data.scenes.iter().map(|s| s.image_id).collect(),
            gt_counts: data.scenes.iter().map(|s| s.gt_count as f64).collect(),
            num_domains: data.num_domains,
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Shuffled mini-batches of row indices for `epoch`: `max(1, ⌊n/bs⌋)`
/// batches whose sizes differ by at most one, so no batch is smaller than
/// `bs` (a ragged tail would otherwise feed a handful of scenes into the
/// batch and running statistics).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE, epoch as u64]));
    order.shuffle(&mut rng);
    let k = (n / batch_size.max(1)).max(1);
    let (base, extra) = (n / k, n % k);
    let mut batches = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        batches.push(order[at..at + len].to_vec());
        at += len;
    }
    batches
}

/// Classification supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub enum ClassTargets<'a> {
    None,
    Domains(&'a [usize]),
    Virtual(&'a [VirtualLabel]),
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grad_output: Tensor4,
    pub grad_logits: Option<Matrix>,
}

/// Loss and upstream gradients for a forward trace. The logits gradient is
/// already scaled by λ.
pub fn batch_loss(trace: &ForwardTrace, targets: &Tensor4, cls: ClassTargets<'_>, variant: Variant, lambda: f64) -> Result<BatchLoss> {
    let (l_den, grad_output) = losses::density_loss(&trace.output, targets)?;
    let cls_part = match (variant, cls) {
        (Variant::Base, _) => None,
        (Variant::Gcl, ClassTargets::Domains(d)) => Some(losses::gt_class_loss(&trace.logits, d)?),
        (Variant::Vcl, ClassTargets::Virtual(v)) => Some(losses::virtual_class_loss(&trace.logits, v)?),
        (v, _) => return Err(Error::InvalidArgument(format!("classification targets do not match variant {v}"))),
    };
    let breakdown = losses::combined_loss(variant, l_den, cls_part.as_ref().map(|c| c.0), lambda)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (l_den={}, l_cls={})",
            breakdown.l_den, breakdown.l_cls
        )));
    }
    Ok(BatchLoss {
        breakdown,
        grad_output,
        grad_logits: cls_part.map(|(_, g)| g.scale(lambda)),
    })
}

/// Mutable training state: everything a checkpoint must capture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub model: Model,
    pub adam: AdamState,
    /// One per training image, in `image_id` order; empty unless vcl.
    pub labels: Vec<LabelState>,
    /// First epoch not yet trained.
    pub next_epoch: usize,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig, data: &TensorData) -> Result<Self> {
        let config = ModelConfig {
            channels: cfg.channels,
            latent: cfg.latent,
            num_domains: data.num_domains,
            variant: cfg.variant,
        };
        let model = Model::init(config, derive_seed(cfg.seed, &[TAG_INIT]))?;
        let adam = AdamState::new(&model.params.slots);
        let labels = match cfg.variant {
            Variant::Vcl => data
                .image_ids
                .iter()
                .zip(&data.domains)
                .map(|(&id, &d)| LabelState::new(id, d, data.num_domains))
                .collect::<Result<Vec<_>>>()?,
            Variant::Base | Variant::Gcl => Vec::new(),
        };
        Ok(TrainerState { model, adam, labels, next_epoch: 0 })
    }
}

/// One row of the label trace: the target in force during `epoch` and the
/// raw sigmoid prediction for the image from that epoch's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub epoch: usize,
    pub image_id: u64,
    pub target: Vec<f64>,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub l_den: f64,
    pub l_cls: f64,
    pub total: f64,
    pub alpha: f64,
    pub batch_losses: Vec<LossBreakdown>,
    /// Sorted by `image_id`; vcl only.
    pub label_rows: Vec<LabelRow>,
    /// Whether a label window closed at the end of this epoch.
    pub window_closed: bool,
}

pub fn train_epoch(state: &mut TrainerState, data: &TensorData, cfg: &TrainConfig) -> Result<EpochReport> {
    let epoch = state.next_epoch;
    let sched = cfg.schedule()?;
    let variant = cfg.variant;
    let m = data.num_domains;
    let mut raw: Vec<Option<VirtualLabel>> = vec![None; if variant == Variant::Vcl { data.len() } else { 0 }];
    let targets_in_force: Vec<VirtualLabel> = state
        .labels
        .iter()
        .map(|s| s.label_for_epoch(epoch, &sched).clone())
        .collect();

    let (mut sum_den, mut sum_cls, mut sum_total, mut seen) = (0.0, 0.0, 0.0, 0usize);
    let mut batch_losses = Vec::new();
    for rows in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
        let x = data.inputs.select(&rows);
        let y = data.targets.select(&rows);
        let domains: Vec<usize> = rows.iter().map(|&r| data.domains[r]).collect();
        let vt: Vec<VirtualLabel> = match variant {
            Variant::Vcl => rows.iter().map(|&r| targets_in_force[r].clone()).collect(),
            _ => Vec::new(),
        };
        let cls = match variant {
            Variant::Base => ClassTargets::None,
            Variant::Gcl => ClassTargets::Domains(&domains),
            Variant::Vcl => ClassTargets::Virtual(&vt),
        };

        state.model.params.zero_grad();
        let trace = state.model.forward(&x, Mode::Train)?;
        let loss = batch_loss(&trace, &y, cls, variant, cfg.lambda)?;
        state.model.backward(&trace, &loss.grad_output, loss.grad_logits.as_ref())?;
        state.model.update_running(&trace, DEFAULT_MOMENTUM)?;
        optimizer_step(&mut state.model.params.slots, cfg.learning_rate, &mut state.adam)?;

        if variant == Variant::Vcl {
            let preds = parameterizer::predict_virtual(&trace.logits);
            for (&r, pred) in rows.iter().zip(preds) {
                if epoch >= sched.kappa {
                    let corrected = dvc::correct_prediction(&pred, data.domains[r], m)?;
                    state.labels[r].observe(&corrected)?;
                }
                raw[r] = Some(pred);
            }
        }

        let b = rows.len();
        let lb = loss.breakdown;
        sum_den += lb.l_den * b as f64;
        sum_cls += lb.l_cls * b as f64;
        sum_total += lb.total * b as f64;
        seen += b;
        batch_losses.push(lb);
    }

    let alpha = if variant == Variant::Vcl { dvc::alpha_schedule(epoch, &sched) } else { 0.0 };
    let window_closed = variant == Variant::Vcl && dvc::is_window_end(epoch, &sched);
    if window_closed {
        for s in &mut state.labels {
            s.finalize_window(alpha);
        }
    }

    let label_rows = raw
        .into_iter()
        .zip(targets_in_force)
        .enumerate()
        .map(|(r, (pred, target))| {
            let pred = pred.ok_or_else(|| Error::InvalidArgument(format!("image row {r} was not visited")))?;
            Ok(LabelRow {
                epoch,
                image_id: data.image_ids[r],
                target: target.0,
                raw: pred.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    state.next_epoch += 1;
    let n = seen as f64;
    Ok(EpochReport {
        epoch,
        l_den: sum_den / n,
        l_cls: sum_cls / n,
        total: sum_total / n,
        alpha,
        batch_losses,
        label_rows,
        window_closed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainMetrics {
    pub domain: usize,
    pub scenes: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub domains: Vec<DomainMetrics>,
    /// Predicted counts in dataset row order.
    pub predicted: Vec<f64>,
    /// Eval-time γ rows in dataset row order.
    pub gamma: Vec<Vec<f64>>,
}

/// Per-domain MAE/RMSE using running statistics. Batching does not affect
/// the result in eval mode.
pub fn evaluate(model: &Model, data: &TensorData) -> Result<Evaluation> {
    let mut predicted = Vec::with_capacity(data.len());
    let mut gamma = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for rows in all.chunks(EVAL_BATCH) {
        let trace = model.forward(&data.inputs.select(rows), Mode::Eval)?;
        predicted.extend(trace.predicted_counts());
        for b in 0..rows.len() {
            gamma.push(trace.affine.gamma.row(b).to_vec());
        }
    }
    let domains = domain_metrics(&predicted, data)?;
    Ok(Evaluation { domains, predicted, gamma })
}

pub fn domain_metrics(predicted: &[f64], data: &TensorData) -> Result<Vec<DomainMetrics>> {
    let mut out = Vec::new();
    for d in 0..data.num_domains {
        let (p, g): (Vec<f64>, Vec<f64>) = (0..data.len())
            .filter(|&r| data.domains[r] == d)
            .map(|r| (predicted[r], data.gt_counts[r]))
            .unzip();
        if p.is_empty() {
            continue;
        }
        let (mae, rmse) = synth::mae_rmse(&p, &g)?;
        out.push(DomainMetrics { domain: d, scenes: p.len(), mae, rmse });
    }
    Ok(out)
}
