//! Domain-guided BN parameterizer.
//!
//! A side branch reads the raw input grid and produces a per-instance latent
//! `φ(x)`:
//!
//! ```text
//! site-linear(1→C) → BN → ReLU → global avg pool
//!   → FC(C→d) → ReLU → FC(d→d) → ReLU → FC(d→d) = φ
//! ```
//!
//! The decoder `ψ` maps `φ` to `2C` values, split into the IsBN scale and
//! shift. A bias-free classifier scores `φ` against one column per class.

use crate::dvc::VirtualLabel;
use crate::error::{Error, Result};
use crate::isbn::{self, AffinePair, BatchStats, Mode, RunningStats};
use crate::numerics::{
    self, fc_bwd, fc_fwd, global_avg_pool_bwd, global_avg_pool_fwd, matmul, relu_bwd, relu_fwd,
    site_linear_bwd, site_linear_fwd, transpose, FcGrads, Matrix, Tensor4,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterizerConfig {
    pub channels: usize,
    pub latent: usize,
    /// `M` for ground-truth classification, `V` for virtual classification.
    pub classes: usize,
}

impl ParameterizerConfig {
    pub fn new(channels: usize, latent: usize, classes: usize) -> Result<Self> {
        if channels == 0 || latent == 0 || classes == 0 {
            return Err(Error::InvalidArgument(
                "parameterizer widths must be at least 1".into(),
            ));
        }
        Ok(ParameterizerConfig {
            channels,
            latent,
            classes,
        })
    }

    pub fn decoder_width(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub phi: Matrix,
}

/// Borrowed view of the encoder's parameters.
#[derive(Clone, Copy)]
pub struct EncoderWeights<'a> {
    pub conv_w: &'a Matrix,
    pub conv_b: &'a [f64],
    pub bn_gamma: &'a [f64],
    pub bn_beta: &'a [f64],
    pub fc1_w: &'a Matrix,
    pub fc1_b: &'a [f64],
    pub fc2_w: &'a Matrix,
    pub fc2_b: &'a [f64],
    pub fc3_w: &'a Matrix,
    pub fc3_b: &'a [f64],
}

/// Intermediates kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub conv_out: Tensor4,
    pub stats: BatchStats,
    pub bn_out: Tensor4,
    pub pooled: Matrix,
    pub pre1: Matrix,
    pub h1: Matrix,
    pub pre2: Matrix,
    pub h2: Matrix,
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub conv_w: Matrix,
    pub conv_b: Vec<f64>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub fc1: FcGrads,
    pub fc2: FcGrads,
    pub fc3: FcGrads,
}

pub fn encode(
    x: &Tensor4,
    w: &EncoderWeights<'_>,
    running: Option<&RunningStats>,
    mode: Mode,
) -> Result<(LatentBatch, EncoderTrace)> {
    if x.channels() != 1 {
        return Err(Error::shape("encode input channels", 1, x.channels()));
    }
    let conv_out = site_linear_fwd(x, w.conv_w, w.conv_b)?;
    let mut stats = match mode {
        Mode::Train => isbn::batch_stats(&conv_out, isbn::DEFAULT_EPS)?,
        Mode::Eval => BatchStats::eval_only(None),
    };
    stats.running = running.cloned();
    let bn_out = isbn::bn_fwd(&conv_out, &stats, w.bn_gamma, w.bn_beta, mode)?;
    let pooled = global_avg_pool_fwd(&relu_fwd(&bn_out))?;
    let pre1 = fc_fwd(&pooled, w.fc1_w, w.fc1_b)?;
    let h1 = relu_fwd(&pre1);
    let pre2 = fc_fwd(&h1, w.fc2_w, w.fc2_b)?;
    let h2 = relu_fwd(&pre2);
    let phi = fc_fwd(&h2, w.fc3_w, w.fc3_b)?;
    Ok((
        LatentBatch { phi },
        EncoderTrace {
            conv_out,
            stats,
            bn_out,
            pooled,
            pre1,
            h1,
            pre2,
            h2,
        },
    ))
}

pub fn encode_bwd(
    x: &Tensor4,
    w: &EncoderWeights<'_>,
    trace: &EncoderTrace,
    grad_phi: &Matrix,
) -> Result<EncoderGrads> {
    let fc3 = fc_bwd(&trace.h2, w.fc3_w, grad_phi)?;
    let g_pre2 = relu_bwd(&trace.pre2, &fc3.h)?;
    let fc2 = fc_bwd(&trace.h1, w.fc2_w, &g_pre2)?;
    let g_pre1 = relu_bwd(&trace.pre1, &fc2.h)?;
    let fc1 = fc_bwd(&trace.pooled, w.fc1_w, &g_pre1)?;
    let g_relu = global_avg_pool_bwd(trace.bn_out.shape(), &fc1.h)?;
    let g_bn = relu_bwd(&trace.bn_out, &g_relu)?;
    let bn = isbn::bn_bwd(&trace.conv_out, &trace.stats, w.bn_gamma, w.bn_beta, &g_bn)?;
    let conv = site_linear_bwd(x, w.conv_w, &bn.x)?;
    Ok(EncoderGrads {
        conv_w: conv.w,
        conv_b: conv.bias,
        bn_gamma: bn.gamma,
        bn_beta: bn.beta,
        fc1,
        fc2,
        fc3,
    })
}

/// `ψ(φ)` split into `γ = 1 + ψ[:, :C]` and `β = ψ[:, C:]`.
pub fn decode(phi: &LatentBatch, w: &Matrix, bias: &[f64], channels: usize) -> Result<AffinePair> {
    if w.rows() != 2 * channels {
        return Err(Error::shape("decode width", 2 * channels, w.rows()));
    }
    let psi = fc_fwd(&phi.phi, w, bias)?;
    let b = psi.rows();
    let mut gamma = Matrix::zeros(b, channels);
    let mut beta = Matrix::zeros(b, channels);
    for r in 0..b {
        let row = psi.row(r);
        for c in 0..channels {
            gamma.set(r, c, 1.0 + row[c]);
            beta.set(r, c, row[channels + c]);
        }
    }
    Ok(AffinePair { gamma, beta })
}

pub fn decode_bwd(phi: &LatentBatch, w: &Matrix, grad: &AffinePair) -> Result<FcGrads> {
    let (b, c) = (grad.gamma.rows(), grad.gamma.cols());
    if w.rows() != 2 * c {
        return Err(Error::shape("decode_bwd width", 2 * c, w.rows()));
    }
    let mut g_psi = Matrix::zeros(b, 2 * c);
    for r in 0..b {
        let row = g_psi.row_mut(r);
        row[..c].copy_from_slice(grad.gamma.row(r));
        row[c..].copy_from_slice(grad.beta.row(r));
    }
    fc_bwd(&phi.phi, w, &g_psi)
}

/// Logits `φ(x_i)·w_m`; `w` is `[d × K]` with one class center per column.
pub fn classify(phi: &LatentBatch, w: &Matrix) -> Result<Matrix> {
    if phi.phi.cols() != w.rows() {
        return Err(Error::shape("classify", w.rows(), phi.phi.cols()));
    }
    matmul(&phi.phi, w)
}

/// Returns `(grad_phi, grad_w)`.
pub fn classify_bwd(phi: &LatentBatch, w: &Matrix, grad_logits: &Matrix) -> Result<(Matrix, Matrix)> {
    let g_phi = matmul(grad_logits, &transpose(w))?;
    let g_w = matmul(&transpose(&phi.phi), grad_logits)?;
    Ok((g_phi, g_w))
}

/// Elementwise sigmoid of the virtual-classifier logits. Rows are not
/// normalized.
pub fn predict_virtual(logits: &Matrix) -> Vec<VirtualLabel> {
    (0..logits.rows())
        .map(|r| VirtualLabel(numerics::sigmoid(logits.row(r))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, xavier_uniform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        conv_w: Matrix,
        conv_b: Vec<f64>,
        bn_gamma: Vec<f64>,
        bn_beta: Vec<f64>,
        fc: [(Matrix, Vec<f64>); 3],
    }

    impl Owned {
        fn random(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Self {
            let mut vec = |n: usize| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
            let conv_b = vec(c);
            let bn_gamma = vec(c).iter().map(|v| 1.0 + v).collect();
            let bn_beta = vec(c);
            let b1 = vec(d);
            let b2 = vec(d);
            let b3 = vec(d);
            Owned {
                conv_w: xavier_uniform(rng, c, 1),
                conv_b,
                bn_gamma,
                bn_beta,
                fc: [
                    (xavier_uniform(rng, d, c), b1),
                    (xavier_uniform(rng, d, d), b2),
                    (xavier_uniform(rng, d, d), b3),
                ],
            }
        }

        fn zero(c: usize, d: usize) -> Self {
            Owned {
                conv_w: Matrix::from_vec(c, 1, vec![0.3; c]).unwrap(),
                conv_b: vec![0.0; c],
                bn_gamma: vec![1.0; c],
                bn_beta: vec![0.0; c],
                fc: [
                    (Matrix::from_vec(d, c, vec![0.2; d * c]).unwrap(), vec![0.0; d]),
                    (Matrix::identity(d), vec![0.0; d]),
                    (Matrix::identity(d), vec![0.0; d]),
                ],
            }
        }

        fn view(&self) -> EncoderWeights<'_> {
            EncoderWeights {
                conv_w: &self.conv_w,
                conv_b: &self.conv_b,
                bn_gamma: &self.bn_gamma,
                bn_beta: &self.bn_beta,
                fc1_w: &self.fc[0].0,
                fc1_b: &self.fc[0].1,
                fc2_w: &self.fc[1].0,
                fc2_b: &self.fc[1].1,
                fc3_w: &self.fc[2].0,
                fc3_b: &self.fc[2].1,
            }
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4::from_vec([b, 1, h, w], (0..b * h * w).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_latent() {
        let p = Owned::zero(4, 5);
        let x = Tensor4::zeros([2, 1, 3, 3]);
        let (phi, _) = encode(&x, &p.view(), None, Mode::Train).unwrap();
        assert!(phi.phi.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_rows_identical_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let p = Owned::random(&mut rng, 4, 6);
        let one = random_input(&mut rng, 1, 3, 3);
        let x = one.select(&[0, 0]);
        let (phi, _) = encode(&x, &p.view(), None, Mode::Train).unwrap();
        assert_eq!(phi.phi.row(0), phi.phi.row(1));
    }

    #[test]
    fn encode_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (c, d) = (3, 4);
        let p = Owned::random(&mut rng, c, d);
        let x = random_input(&mut rng, 3, 2, 2);
        let (phi, _) = encode(&x, &p.view(), None, Mode::Train).unwrap();

        // layer-by-layer with explicit loops
        let (b, hw) = (3, 4);
        let mut a = vec![vec![vec![0.0; hw]; c]; b];
        for bi in 0..b {
            for ch in 0..c {
                for s in 0..hw {
                    a[bi][ch][s] = p.conv_w.get(ch, 0) * x.data()[bi * hw + s] + p.conv_b[ch];
                }
            }
        }
        let mut pooled = vec![vec![0.0; c]; b];
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|bi| a[bi][ch].clone()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64 + isbn::DEFAULT_EPS).sqrt();
            for bi in 0..b {
                let total: f64 = a[bi][ch]
                    .iter()
                    .map(|v| (p.bn_gamma[ch] * (v - m) / sd + p.bn_beta[ch]).max(0.0))
                    .sum();
                pooled[bi][ch] = total / hw as f64;
            }
        }
        let dense = |h: &[f64], w: &Matrix, bias: &[f64], relu: bool| -> Vec<f64> {
            (0..w.rows())
                .map(|o| {
                    let v = bias[o] + (0..w.cols()).map(|i| w.get(o, i) * h[i]).sum::<f64>();
                    if relu { v.max(0.0) } else { v }
                })
                .collect()
        };
        for bi in 0..b {
            let h1 = dense(&pooled[bi], &p.fc[0].0, &p.fc[0].1, true);
            let h2 = dense(&h1, &p.fc[1].0, &p.fc[1].1, true);
            let out = dense(&h2, &p.fc[2].0, &p.fc[2].1, false);
            for k in 0..d {
                assert!((phi.phi.get(bi, k) - out[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_identity_and_bias_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let phi = LatentBatch {
            phi: Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let a = decode(&phi, &Matrix::zeros(6, 4), &[0.0; 6], 3).unwrap();
        assert_eq!(a, AffinePair::identity(3, 3));

        let bias = [0.1, 0.2, 0.3, -0.4, -0.5, -0.6];
        let zero_phi = LatentBatch { phi: Matrix::zeros(2, 4) };
        let a = decode(&zero_phi, &xavier_uniform(&mut rng, 6, 4), &bias, 3).unwrap();
        for r in 0..2 {
            assert_eq!(a.gamma.row(r), &[1.1, 1.2, 1.3]);
            assert_eq!(a.beta.row(r), &[-0.4, -0.5, -0.6]);
        }
        assert!(decode(&phi, &Matrix::zeros(5, 4), &[0.0; 5], 3).is_err());
    }

    #[test]
    fn decode_matches_slicing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let phi = LatentBatch {
            phi: Matrix::from_vec(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let w = xavier_uniform(&mut rng, 4, 3);
        let bias = [0.5, -0.5, 0.25, 0.0];
        let a = decode(&phi, &w, &bias, 2).unwrap();
        let psi = fc_fwd(&phi.phi, &w, &bias).unwrap();
        for r in 0..2 {
            let row = psi.row(r);
            assert_eq!(a.gamma.row(r), &[1.0 + row[0], 1.0 + row[1]]);
            assert_eq!(a.beta.row(r), &row[2..4]);
        }
    }

    #[test]
    fn classify_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let phi = LatentBatch {
            phi: Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let logits = classify(&phi, &Matrix::zeros(4, 5)).unwrap();
        for r in 0..3 {
            assert!(numerics::softmax(logits.row(r)).iter().all(|p| (p - 0.2).abs() < 1e-15));
        }
        let w = xavier_uniform(&mut rng, 4, 5);
        let logits = classify(&phi, &w).unwrap();
        for r in 0..3 {
            for k in 0..5 {
                let want: f64 = (0..4).map(|i| phi.phi.get(r, i) * w.get(i, k)).sum();
                assert!((logits.get(r, k) - want).abs() < 1e-12);
            }
        }
        // linear in φ
        let scaled = classify(&LatentBatch { phi: phi.phi.scale(2.5) }, &w).unwrap();
        for (a, b) in scaled.data().iter().zip(logits.data()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
        assert!(classify(&phi, &Matrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn virtual_predictions() {
        let v = predict_virtual(&Matrix::zeros(2, 6));
        assert!(v.iter().all(|l| l.values().iter().all(|p| *p == 0.5)));
        let logits = Matrix::from_rows(&[vec![1.0, -1.0, 0.0, 800.0]]).unwrap();
        let v = predict_virtual(&logits);
        let want = [0.7310585786300049, 0.2689414213699951, 0.5, 1.0];
        for (a, b) in v[0].values().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (c, d) = (3, 4);
        let p = Owned::random(&mut rng, c, d);
        let x = random_input(&mut rng, 3, 3, 3);
        let up = Matrix::from_vec(3, d, (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, trace) = encode(&x, &p.view(), None, Mode::Train).unwrap();
        let g = encode_bwd(&x, &p.view(), &trace, &up).unwrap();
        let objective = |q: &Owned| -> f64 {
            let (phi, _) = encode(&x, &q.view(), None, Mode::Train).unwrap();
            phi.phi.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let checks: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
            ("conv_w", p.conv_w.data().to_vec(), g.conv_w.data().to_vec()),
            ("bn_gamma", p.bn_gamma.clone(), g.bn_gamma.clone()),
            ("fc1_w", p.fc[0].0.data().to_vec(), g.fc1.w.data().to_vec()),
            ("fc3_b", p.fc[2].1.clone(), g.fc3.bias.clone()),
        ];
        for (name, params, analytic) in checks {
            let r = grad_check(
                |v| {
                    let mut q = Owned { conv_w: p.conv_w.clone(), conv_b: p.conv_b.clone(), bn_gamma: p.bn_gamma.clone(), bn_beta: p.bn_beta.clone(), fc: p.fc.clone() };
                    match name {
                        "conv_w" => q.conv_w = Matrix::from_vec(c, 1, v.to_vec()).unwrap(),
                        "bn_gamma" => q.bn_gamma = v.to_vec(),
                        "fc1_w" => q.fc[0].0 = Matrix::from_vec(d, c, v.to_vec()).unwrap(),
                        _ => q.fc[2].1 = v.to_vec(),
                    }
                    objective(&q)
                },
                &params,
                &analytic,
                1e-6,
                1e-5,
            )
            .unwrap();
            assert!(r.passed, "{name}: {r:?}");
        }
    }

    #[test]
    fn decoder_and_classifier_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let phi = LatentBatch {
            phi: Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let w = xavier_uniform(&mut rng, 4, 6);
        let up = Matrix::from_vec(3, 6, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (g_phi, g_w) = classify_bwd(&phi, &w, &up).unwrap();
        let dot = |m: &Matrix| -> f64 { m.data().iter().zip(up.data()).map(|(a, b)| a * b).sum() };
        let r = grad_check(
            |v| dot(&classify(&LatentBatch { phi: Matrix::from_vec(3, 4, v.to_vec()).unwrap() }, &w).unwrap()),
            phi.phi.data(),
            g_phi.data(),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = grad_check(
            |v| dot(&classify(&phi, &Matrix::from_vec(4, 6, v.to_vec()).unwrap()).unwrap()),
            w.data(),
            g_w.data(),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");

        let dw = xavier_uniform(&mut rng, 4, 4);
        let db = [0.1, 0.0, -0.1, 0.2];
        let ga = AffinePair {
            gamma: Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            beta: Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        };
        let g = decode_bwd(&phi, &dw, &ga).unwrap();
        let r = grad_check(
            |v| {
                let a = decode(&LatentBatch { phi: Matrix::from_vec(3, 4, v.to_vec()).unwrap() }, &dw, &db, 2).unwrap();
                a.gamma.data().iter().zip(ga.gamma.data()).map(|(p, q)| p * q).sum::<f64>()
                    + a.beta.data().iter().zip(ga.beta.data()).map(|(p, q)| p * q).sum::<f64>()
            },
            phi.phi.data(),
            g.h.data(),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
