//! Instance-specific batch normalization.
//!
//! Features are normalized with per-channel batch statistics exactly as in
//! ordinary BN, then modulated by an affine pair that varies per instance:
//! `y[b,c,·] = γ[b,c]·x̂[b,c,·] + β[b,c]`. Standard BN with a single learned
//! affine is the special case where every row of `γ`, `β` is the same, see
//! [`bn_fwd`] / [`bn_bwd`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of the batch statistics, used in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    /// `sqrt(var + eps)`, never below `sqrt(eps)`.
    pub sigma: Vec<f64>,
    pub running: Option<RunningStats>,
}

impl BatchStats {
    /// Statistics holder for eval mode, where only the running copy matters.
    pub fn eval_only(running: Option<RunningStats>) -> Self {
        BatchStats {
            mu: Vec::new(),
            sigma: Vec::new(),
            running,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinePair {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl AffinePair {
    pub fn identity(batch: usize, channels: usize) -> Self {
        let mut gamma = Matrix::zeros(batch, channels);
        gamma.data_mut().fill(1.0);
        AffinePair {
            gamma,
            beta: Matrix::zeros(batch, channels),
        }
    }

    /// Repeats a shared `(γ, β)` for every instance in the batch.
    pub fn broadcast(batch: usize, gamma: &[f64], beta: &[f64]) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape("AffinePair::broadcast", gamma.len(), beta.len()));
        }
        let c = gamma.len();
        let mut g = Matrix::zeros(batch, c);
        let mut b = Matrix::zeros(batch, c);
        for r in 0..batch {
            g.row_mut(r).copy_from_slice(gamma);
            b.row_mut(r).copy_from_slice(beta);
        }
        Ok(AffinePair { gamma: g, beta: b })
    }
}

/// Population (biased) mean and standard deviation per channel over `B·H·W`.
pub fn batch_stats(x: &Tensor4, eps: f64) -> Result<BatchStats> {
    let (bsz, c, p) = (x.batch(), x.channels(), x.plane());
    let n = bsz * p;
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let mut mu = vec![0.0; c];
    let mut sigma = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..bsz {
            sum += x.plane_slice(b, ch).iter().sum::<f64>();
        }
        let m = sum / n as f64;
        let mut sq = 0.0;
        for b in 0..bsz {
            for v in x.plane_slice(b, ch) {
                let d = v - m;
                sq += d * d;
            }
        }
        mu[ch] = m;
        sigma[ch] = (sq / n as f64 + eps).sqrt();
    }
    Ok(BatchStats {
        mu,
        sigma,
        running: None,
    })
}

fn check_affine(op: &'static str, x: &Tensor4, affine: &AffinePair) -> Result<()> {
    let want = (x.batch(), x.channels());
    for m in [&affine.gamma, &affine.beta] {
        if (m.rows(), m.cols()) != want {
            return Err(Error::shape(
                op,
                format!("{}x{}", want.0, want.1),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
    }
    Ok(())
}

fn norm_stats(stats: &BatchStats, mode: Mode, c: usize) -> Result<(&[f64], &[f64])> {
    let (mu, sigma) = match mode {
        Mode::Train => (&stats.mu[..], &stats.sigma[..]),
        Mode::Eval => {
            let r = stats.running.as_ref().ok_or(Error::UninitializedStats)?;
            (&r.mu[..], &r.sigma[..])
        }
    };
    if mu.len() != c || sigma.len() != c {
        return Err(Error::shape("isbn statistics", c, mu.len()));
    }
    Ok((mu, sigma))
}

pub fn isbn_fwd(x: &Tensor4, stats: &BatchStats, affine: &AffinePair, mode: Mode) -> Result<Tensor4> {
    check_affine("isbn_fwd", x, affine)?;
    let c = x.channels();
    let (mu, sigma) = norm_stats(stats, mode, c)?;
    let mut out = Tensor4::zeros(x.shape());
    for b in 0..x.batch() {
        for ch in 0..c {
            let g = affine.gamma.get(b, ch);
            let be = affine.beta.get(b, ch);
            let (m, s) = (mu[ch], sigma[ch]);
            for (o, v) in out.plane_slice_mut(b, ch).iter_mut().zip(x.plane_slice(b, ch)) {
                *o = g * ((v - m) / s) + be;
            }
        }
    }
    Ok(out)
}

pub struct IsbnGrads {
    pub x: Tensor4,
    pub gamma: Matrix,
    pub beta: Matrix,
}

/// Full train-mode backward, with `μ` and `σ` differentiated as functions of `x`.
pub fn isbn_bwd(
    x: &Tensor4,
    stats: &BatchStats,
    affine: &AffinePair,
    grad_out: &Tensor4,
) -> Result<IsbnGrads> {
    check_affine("isbn_bwd", x, affine)?;
    if grad_out.shape() != x.shape() {
        return Err(Error::shape(
            "isbn_bwd grad_out",
            format!("{:?}", x.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let (bsz, c, p) = (x.batch(), x.channels(), x.plane());
    let (mu, sigma) = norm_stats(stats, Mode::Train, c)?;
    let n = (bsz * p) as f64;
    let mut gx = Tensor4::zeros(x.shape());
    let mut ggamma = Matrix::zeros(bsz, c);
    let mut gbeta = Matrix::zeros(bsz, c);

    for ch in 0..c {
        let (m, s) = (mu[ch], sigma[ch]);
        // Σ dL/dx̂ and Σ dL/dx̂·x̂ over the whole channel
        let mut sum_gxhat = 0.0;
        let mut sum_gxhat_xhat = 0.0;
        for b in 0..bsz {
            let g = affine.gamma.get(b, ch);
            let mut gg = 0.0;
            let mut gb = 0.0;
            for (v, go) in x.plane_slice(b, ch).iter().zip(grad_out.plane_slice(b, ch)) {
                let xhat = (v - m) / s;
                gg += go * xhat;
                gb += go;
                sum_gxhat += go * g;
                sum_gxhat_xhat += go * g * xhat;
            }
            ggamma.set(b, ch, gg);
            gbeta.set(b, ch, gb);
        }
        let mean_g = sum_gxhat / n;
        let mean_gx = sum_gxhat_xhat / n;
        for b in 0..bsz {
            let g = affine.gamma.get(b, ch);
            let xs = x.plane_slice(b, ch);
            let gos = grad_out.plane_slice(b, ch);
            let dst = gx.plane_slice_mut(b, ch);
            for i in 0..p {
                let xhat = (xs[i] - m) / s;
                dst[i] = (gos[i] * g - mean_g - xhat * mean_gx) / s;
            }
        }
    }
    Ok(IsbnGrads {
        x: gx,
        gamma: ggamma,
        beta: gbeta,
    })
}

/// `running ← (1−momentum)·running + momentum·batch`. The first update seeds
/// the running copy with the batch statistics.
pub fn update_running_stats(stats: &BatchStats, momentum: f64) -> Result<BatchStats> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum {momentum} outside [0, 1]"
        )));
    }
    let running = match &stats.running {
        None => RunningStats {
            mu: stats.mu.clone(),
            sigma: stats.sigma.clone(),
        },
        Some(r) => {
            let ema = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter()
                    .zip(new)
                    .map(|(o, n)| (1.0 - momentum) * o + momentum * n)
                    .collect()
            };
            RunningStats {
                mu: ema(&r.mu, &stats.mu),
                sigma: ema(&r.sigma, &stats.sigma),
            }
        }
    };
    Ok(BatchStats {
        mu: stats.mu.clone(),
        sigma: stats.sigma.clone(),
        running: Some(running),
    })
}

/// Standard BN with one learned `(γ, β)` shared by all instances.
pub fn bn_fwd(
    x: &Tensor4,
    stats: &BatchStats,
    gamma: &[f64],
    beta: &[f64],
    mode: Mode,
) -> Result<Tensor4> {
    let affine = AffinePair::broadcast(x.batch(), gamma, beta)?;
    isbn_fwd(x, stats, &affine, mode)
}

pub struct BnGrads {
    pub x: Tensor4,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn bn_bwd(
    x: &Tensor4,
    stats: &BatchStats,
    gamma: &[f64],
    beta: &[f64],
    grad_out: &Tensor4,
) -> Result<BnGrads> {
    let affine = AffinePair::broadcast(x.batch(), gamma, beta)?;
    let g = isbn_bwd(x, stats, &affine, grad_out)?;
    let c = x.channels();
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for b in 0..x.batch() {
        for ch in 0..c {
            gg[ch] += g.gamma.get(b, ch);
            gb[ch] += g.beta.get(b, ch);
        }
    }
    Ok(BnGrads {
        x: g.x,
        gamma: gg,
        beta: gb,
    })
}
