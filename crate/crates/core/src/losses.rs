//! Training objectives and their gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dvc::VirtualLabel;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Tensor4};

/// Floor applied before taking logs of probabilities.
pub const LOG_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Density loss only.
    Base,
    /// Density loss plus cross-entropy on ground-truth collection labels.
    Gcl,
    /// Density loss plus soft cross-entropy on generated virtual labels.
    Vcl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Gcl, Variant::Vcl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Gcl => "gcl",
            Variant::Vcl => "vcl",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "gcl" => Ok(Variant::Gcl),
            "vcl" => Ok(Variant::Vcl),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_den: f64,
    pub l_cls: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `(1/2N) Σ_i ‖Ŷ_i − Y_i‖²` and its gradient `(Ŷ − Y)/N`.
pub fn density_loss(pred: &Tensor4, gt: &Tensor4) -> Result<(f64, Tensor4)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "density_loss",
            format!("{:?}", gt.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let n = pred.batch();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let nf = n as f64;
    let mut sq = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| {
            let d = p - g;
            sq += d * d;
            d / nf
        })
        .collect();
    Ok((sq / (2.0 * nf), Tensor4::from_vec(pred.shape(), grad)?))
}

/// Mean negative log-probability of the true class; gradient `(softmax − onehot)/N`.
pub fn gt_class_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("gt_class_loss", logits.rows(), labels.len()));
    }
    let (n, k) = (logits.rows(), logits.cols());
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::OutOfRange {
                what: "class label",
                value: y,
                limit: k,
            });
        }
        let p = softmax(logits.row(i));
        loss -= p[y].max(LOG_FLOOR).ln();
        let g = grad.row_mut(i);
        for (c, pc) in p.iter().enumerate() {
            g[c] = (pc - if c == y { 1.0 } else { 0.0 }) / nf;
        }
    }
    Ok((loss / nf, grad))
}

/// Soft cross-entropy `−(1/(N·V)) Σ_i Σ_c v^{i,c} log softmax(logits_i)_c`.
///
/// The `1/V` factor is kept as written, so a one-hot target gives exactly
/// `gt_class_loss / V`.
pub fn virtual_class_loss(logits: &Matrix, targets: &[VirtualLabel]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(Error::shape("virtual_class_loss", logits.rows(), targets.len()));
    }
    let (n, v) = (logits.rows(), logits.cols());
    let scale = 1.0 / (n as f64 * v as f64);
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, v);
    for (i, target) in targets.iter().enumerate() {
        if target.len() != v {
            return Err(Error::shape("virtual_class_loss target", v, target.len()));
        }
        let p = softmax(logits.row(i));
        let mass = target.sum();
        let mut row = 0.0;
        for (t, pc) in target.values().iter().zip(&p) {
            row -= t * pc.max(LOG_FLOOR).ln();
        }
        loss += row;
        let g = grad.row_mut(i);
        for c in 0..v {
            g[c] = scale * (mass * p[c] - target.0[c]);
        }
    }
    Ok((loss * scale, grad))
}

/// `total = l_den + λ·l_cls`; the base variant ignores the classifier term.
pub fn combined_loss(variant: Variant, l_den: f64, l_cls: Option<f64>, lambda: f64) -> Result<LossBreakdown> {
    match (variant, l_cls) {
        (Variant::Base, None) => Ok(LossBreakdown {
            l_den,
            l_cls: 0.0,
            total: l_den,
            lambda: 0.0,
        }),
        (Variant::Gcl | Variant::Vcl, Some(l_cls)) => Ok(LossBreakdown {
            l_den,
            l_cls,
            total: l_den + lambda * l_cls,
            lambda,
        }),
        (Variant::Base, Some(_)) => Err(Error::InvalidArgument(
            "base variant takes no classification term".into(),
        )),
        (v, None) => Err(Error::InvalidArgument(format!(
            "{v} variant requires a classification term"
        ))),
    }
}
