//! Domain-guided virtual classification labels.
//!
//! A label over `M` collections has `V = M + M(M−1)/2` entries: the `M` core
//! classes first, then one entry per unordered pair `(s, t)`, `s < t`, in
//! lexicographic order. Per-image targets start one-hot on the image's
//! collection and, once fusion starts at epoch `κ`, are rebuilt at the end of
//! every `τ`-epoch window from the averaged corrected predictions:
//!
//! ```text
//! z = (1 − α)·v₀ + α·mean(v̂*)      target = softmax(z)
//! ```
//!
//! Epochs are 0-indexed. Window `k` covers the half-open epoch range
//! `[(k−1)τ + κ, kτ + κ)`, i.e. exactly `τ` epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax;

/// Number of core plus virtual classes for `m` collections.
pub fn num_classes(m: usize) -> usize {
    m + m * m.saturating_sub(1) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualLabel(pub Vec<f64>);

impl VirtualLabel {
    pub fn zeros(v: usize) -> Self {
        VirtualLabel(vec![0.0; v])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Flat index of the virtual class shared by collections `s` and `t`.
pub fn pair_index(s: usize, t: usize, m: usize) -> Result<usize> {
    for v in [s, t] {
        if v >= m {
            return Err(Error::OutOfRange {
                what: "collection id",
                value: v,
                limit: m,
            });
        }
    }
    if s == t {
        return Err(Error::InvalidPair(s));
    }
    let (lo, hi) = if s < t { (s, t) } else { (t, s) };
    // pairs (i, j) with i < lo come first: Σ_{i<lo} (m − 1 − i)
    let before = lo * (2 * m - lo - 1) / 2;
    Ok(m + before + (hi - lo - 1))
}

pub fn init_virtual_label(domain: usize, m: usize) -> Result<VirtualLabel> {
    if domain >= m {
        return Err(Error::OutOfRange {
            what: "collection id",
            value: domain,
            limit: m,
        });
    }
    let mut v = VirtualLabel::zeros(num_classes(m));
    v.0[domain] = 1.0;
    Ok(v)
}

/// Moves the confidence of misclassifying an image from collection `t` as
/// collection `s` into the `(s, t)` virtual entry:
/// `v̂*[s↔t] = v̂[s↔t] + v̂[s]` for every `s ≠ t`. Everything else is copied.
pub fn correct_prediction(pred: &VirtualLabel, t: usize, m: usize) -> Result<VirtualLabel> {
    if t >= m {
        return Err(Error::OutOfRange {
            what: "collection id",
            value: t,
            limit: m,
        });
    }
    if pred.len() != num_classes(m) {
        return Err(Error::shape("correct_prediction", num_classes(m), pred.len()));
    }
    let mut out = pred.clone();
    for s in (0..m).filter(|&s| s != t) {
        let idx = pair_index(s, t, m)?;
        out.0[idx] = pred.0[idx] + pred.0[s];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// First epoch whose predictions are fused into targets.
    pub kappa: usize,
    /// Window length in epochs.
    pub tau: usize,
    /// Total epochs; α reaches `rho_max` here.
    pub iota: usize,
    pub rho_max: f64,
}

impl ScheduleConfig {
    pub fn new(kappa: usize, tau: usize, iota: usize, rho_max: f64) -> Result<Self> {
        let cfg = ScheduleConfig {
            kappa,
            tau,
            iota,
            rho_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iota == self.kappa {
            return Err(Error::Schedule(format!(
                "total epochs equals fusion start ({}); the reliability ramp is undefined",
                self.iota
            )));
        }
        if self.kappa > self.iota {
            return Err(Error::Schedule(format!(
                "fusion start {} must precede total epochs {}",
                self.kappa, self.iota
            )));
        }
        if self.tau == 0 {
            return Err(Error::Schedule("window size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rho_max) {
            return Err(Error::Schedule(format!(
                "max reliability {} outside [0, 1]",
                self.rho_max
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kappa: 40,
            tau: 5,
            iota: 120,
            rho_max: 0.5,
        }
    }
}

/// Reliability of predicted labels: 0 up to `κ`, then a linear ramp reaching
/// `ϱ` at `ι`, held there afterwards.
pub fn alpha_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch <= cfg.kappa {
        return 0.0;
    }
    let frac = (epoch - cfg.kappa) as f64 / (cfg.iota - cfg.kappa) as f64;
    (cfg.rho_max * frac.min(1.0)).clamp(0.0, cfg.rho_max)
}

/// `k = ⌈(e − κ + 1)/τ⌉`, 1-based.
pub fn window_index(epoch: usize, cfg: &ScheduleConfig) -> Result<usize> {
    if epoch < cfg.kappa {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} precedes fusion start {}; use the initial label",
            cfg.kappa
        )));
    }
    Ok((epoch - cfg.kappa + 1).div_ceil(cfg.tau))
}

/// True when `epoch` is the last epoch of its window.
pub fn is_window_end(epoch: usize, cfg: &ScheduleConfig) -> bool {
    epoch >= cfg.kappa && (epoch - cfg.kappa + 1).is_multiple_of(cfg.tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelState {
    pub image_id: u64,
    pub domain: usize,
    pub v0: VirtualLabel,
    pub current_target: VirtualLabel,
    pub accumulator: Vec<f64>,
    pub obs_count: usize,
}

impl LabelState {
    pub fn new(image_id: u64, domain: usize, m: usize) -> Result<Self> {
        let v0 = init_virtual_label(domain, m)?;
        let v = v0.len();
        Ok(LabelState {
            image_id,
            domain,
            current_target: v0.clone(),
            v0,
            accumulator: vec![0.0; v],
            obs_count: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.v0.len()
    }

    pub fn observe(&mut self, corrected: &VirtualLabel) -> Result<()> {
        if corrected.len() != self.accumulator.len() {
            return Err(Error::shape("observe", self.accumulator.len(), corrected.len()));
        }
        for (a, v) in self.accumulator.iter_mut().zip(corrected.values()) {
            *a += v;
        }
        self.obs_count += 1;
        Ok(())
    }

    /// Closes the current window: fuses the mean corrected prediction with
    /// `v₀` at reliability `alpha`, takes the softmax, and resets the
    /// accumulator. An empty window fuses a zero mean.
    pub fn finalize_window(&mut self, alpha: f64) -> &VirtualLabel {
        let count = self.obs_count.max(1) as f64;
        let z: Vec<f64> = self
            .v0
            .values()
            .iter()
            .zip(&self.accumulator)
            .map(|(v0, ac)| (1.0 - alpha) * v0 + alpha * (ac / count))
            .collect();
        self.current_target = VirtualLabel(softmax(&z));
        self.accumulator.fill(0.0);
        self.obs_count = 0;
        &self.current_target
    }

    /// Target label in force during `epoch`. Until the first window closes
    /// the current target is still `v₀`.
    pub fn label_for_epoch(&self, epoch: usize, cfg: &ScheduleConfig) -> &VirtualLabel {
        if epoch < cfg.kappa {
            &self.v0
        } else {
            &self.current_target
        }
    }
}
