//! Whole-network forward and backward passes.
//!
//! ```text
//! input ─┬─ backbone: conv(1→C) → BN → ReLU → conv(C→C) ─┐
//!        │                                                 ├─ IsBN(γ, β) → predictor → Ŷ
//!        └─ parameterizer: encode → φ ─┬─ decode → (γ, β) ─┘
//!                                      └─ classify → logits
//! ```
//!
//! The predictor is `conv(C→C) → ReLU → conv(C→C) → conv(C→1)`. All
//! "convolutions" are per-site linear maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dvc;
use crate::error::{Error, Result};
use crate::isbn::{self, AffinePair, BatchStats, Mode, RunningStats};
use crate::losses::Variant;
use crate::numerics::{
    relu_bwd, relu_fwd, site_linear_bwd, site_linear_fwd, xavier_uniform, Matrix, ParamSlot, Tensor4,
};
use crate::synth::derive_seed;
use crate::parameterizer::{self, EncoderTrace, EncoderWeights, LatentBatch, ParameterizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub latent: usize,
    pub num_domains: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// `V` for the virtual classifier, `M` otherwise.
    pub fn classifier_width(&self) -> usize {
        match self.variant {
            Variant::Vcl => dvc::num_classes(self.num_domains),
            Variant::Base | Variant::Gcl => self.num_domains,
        }
    }

    pub fn parameterizer(&self) -> Result<ParameterizerConfig> {
        ParameterizerConfig::new(self.channels, self.latent, self.classifier_width())
    }
}

/// Fixed parameter order. The discriminant is the slot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Slot {
    BbConv1W,
    BbConv1B,
    BbBnGamma,
    BbBnBeta,
    BbConv2W,
    BbConv2B,
    EncConvW,
    EncConvB,
    EncBnGamma,
    EncBnBeta,
    EncFc1W,
    EncFc1B,
    EncFc2W,
    EncFc2B,
    EncFc3W,
    EncFc3B,
    DecW,
    DecB,
    ClsW,
    PredConv1W,
    PredConv1B,
    PredConv2W,
    PredConv2B,
    PredConv3W,
    PredConv3B,
}

pub const NUM_SLOTS: usize = 25;

const SLOT_NAMES: [&str; NUM_SLOTS] = [
    "backbone.conv1.weight",
    "backbone.conv1.bias",
    "backbone.bn.gamma",
    "backbone.bn.beta",
    "backbone.conv2.weight",
    "backbone.conv2.bias",
    "parameterizer.encoder.conv.weight",
    "parameterizer.encoder.conv.bias",
    "parameterizer.encoder.bn.gamma",
    "parameterizer.encoder.bn.beta",
    "parameterizer.encoder.fc1.weight",
    "parameterizer.encoder.fc1.bias",
    "parameterizer.encoder.fc2.weight",
    "parameterizer.encoder.fc2.bias",
    "parameterizer.encoder.fc3.weight",
    "parameterizer.encoder.fc3.bias",
    "parameterizer.decoder.weight",
    "parameterizer.decoder.bias",
    "parameterizer.classifier.weight",
    "predictor.conv1.weight",
    "predictor.conv1.bias",
    "predictor.conv2.weight",
    "predictor.conv2.bias",
    "predictor.conv3.weight",
    "predictor.conv3.bias",
];

/// BN sites carrying running statistics.
pub const BN_BACKBONE: usize = 0;
pub const BN_ENCODER: usize = 1;
pub const BN_ISBN: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub slots: Vec<ParamSlot>,
}

impl ModelParams {
    pub fn get(&self, s: Slot) -> &ParamSlot {
        &self.slots[s as usize]
    }

    pub fn get_mut(&mut self, s: Slot) -> &mut ParamSlot {
        &mut self.slots[s as usize]
    }

    fn value(&self, s: Slot) -> &Matrix {
        &self.slots[s as usize].value
    }

    fn vec(&self, s: Slot) -> &[f64] {
        self.slots[s as usize].value.data()
    }

    pub fn zero_grad(&mut self) {
        self.slots.iter_mut().for_each(ParamSlot::zero_grad);
    }

    pub fn num_values(&self) -> usize {
        self.slots.iter().map(ParamSlot::len).sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| s.value.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| s.grad.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::shape("set_flat_values", self.num_values(), flat.len()));
        }
        let mut at = 0;
        for s in &mut self.slots {
            let n = s.len();
            s.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn add_grad(&mut self, s: Slot, g: &[f64]) {
        for (d, v) in self.slots[s as usize].grad.data_mut().iter_mut().zip(g) {
            *d += v;
        }
    }

    fn encoder(&self) -> EncoderWeights<'_> {
        EncoderWeights {
            conv_w: self.value(Slot::EncConvW),
            conv_b: self.vec(Slot::EncConvB),
            bn_gamma: self.vec(Slot::EncBnGamma),
            bn_beta: self.vec(Slot::EncBnBeta),
            fc1_w: self.value(Slot::EncFc1W),
            fc1_b: self.vec(Slot::EncFc1B),
            fc2_w: self.value(Slot::EncFc2W),
            fc2_b: self.vec(Slot::EncFc2B),
            fc3_w: self.value(Slot::EncFc3W),
            fc3_b: self.vec(Slot::EncFc3B),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub running: [Option<RunningStats>; 3],
}

enum Init {
    Xavier(usize, usize),
    Fill(usize, f64),
}

fn row(v: Vec<f64>) -> Matrix {
    let n = v.len();
    Matrix::from_vec(1, n, v).expect("row vector")
}

impl Model {
    /// Xavier-uniform weights, zero biases, unit BN scales. Slot `i` draws
    /// from its own stream `derive_seed(seed, [i])`, so equally shaped slots
    /// start identical across variants.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let p = config.parameterizer()?;
        let (c, d, k, dec) = (p.channels, p.latent, p.classes, p.decoder_width());
        let specs: [Init; NUM_SLOTS] = [
            Init::Xavier(c, 1),
            Init::Fill(c, 0.0),
            Init::Fill(c, 1.0),
            Init::Fill(c, 0.0),
            Init::Xavier(c, c),
            Init::Fill(c, 0.0),
            Init::Xavier(c, 1),
            Init::Fill(c, 0.0),
            Init::Fill(c, 1.0),
            Init::Fill(c, 0.0),
            Init::Xavier(d, c),
            Init::Fill(d, 0.0),
            Init::Xavier(d, d),
            Init::Fill(d, 0.0),
            Init::Xavier(d, d),
            Init::Fill(d, 0.0),
            Init::Xavier(dec, d),
            Init::Fill(dec, 0.0),
            // [d × K]: one column per class
            Init::Xavier(d, k),
            Init::Xavier(c, c),
            Init::Fill(c, 0.0),
            Init::Xavier(c, c),
            Init::Fill(c, 0.0),
            Init::Xavier(1, c),
            Init::Fill(1, 0.0),
        ];
        let slots = specs
            .iter()
            .zip(SLOT_NAMES)
            .enumerate()
            .map(|(i, (spec, name))| {
                let value = match *spec {
                    Init::Xavier(rows, cols) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
                        xavier_uniform(&mut rng, rows, cols)
                    }
                    Init::Fill(n, v) => row(vec![v; n]),
                };
                ParamSlot::new(name, value)
            })
            .collect();
        Ok(Model {
            config,
            params: ModelParams { slots },
            running: [None, None, None],
        })
    }

    /// Zeroes the decoder so that `γ ≡ 1`, `β ≡ 0`.
    pub fn zero_decoder(&mut self) {
        self.params.get_mut(Slot::DecW).value.data_mut().fill(0.0);
        self.params.get_mut(Slot::DecB).value.data_mut().fill(0.0);
    }

    fn stats_for(&self, site: usize, x: &Tensor4, mode: Mode) -> Result<BatchStats> {
        let mut stats = match mode {
            Mode::Train => isbn::batch_stats(x, isbn::DEFAULT_EPS)?,
            Mode::Eval => BatchStats::eval_only(None),
        };
        stats.running = self.running[site].clone();
        Ok(stats)
    }

    pub fn forward(&self, input: &Tensor4, mode: Mode) -> Result<ForwardTrace> {
        let p = &self.params;
        if input.channels() != 1 {
            return Err(Error::shape("model input channels", 1, input.channels()));
        }

        let bb_conv1 = site_linear_fwd(input, p.value(Slot::BbConv1W), p.vec(Slot::BbConv1B))?;
        let bb_stats = self.stats_for(BN_BACKBONE, &bb_conv1, mode)?;
        let bb_bn = isbn::bn_fwd(&bb_conv1, &bb_stats, p.vec(Slot::BbBnGamma), p.vec(Slot::BbBnBeta), mode)?;
        let bb_relu = relu_fwd(&bb_bn);
        let features = site_linear_fwd(&bb_relu, p.value(Slot::BbConv2W), p.vec(Slot::BbConv2B))?;

        let (phi, enc) = parameterizer::encode(input, &p.encoder(), self.running[BN_ENCODER].as_ref(), mode)?;
        let affine = parameterizer::decode(&phi, p.value(Slot::DecW), p.vec(Slot::DecB), self.config.channels)?;
        let logits = parameterizer::classify(&phi, p.value(Slot::ClsW))?;

        let isbn_stats = self.stats_for(BN_ISBN, &features, mode)?;
        let modulated = isbn::isbn_fwd(&features, &isbn_stats, &affine, mode)?;

        let pred1_pre = site_linear_fwd(&modulated, p.value(Slot::PredConv1W), p.vec(Slot::PredConv1B))?;
        let pred1 = relu_fwd(&pred1_pre);
        let pred2 = site_linear_fwd(&pred1, p.value(Slot::PredConv2W), p.vec(Slot::PredConv2B))?;
        let output = site_linear_fwd(&pred2, p.value(Slot::PredConv3W), p.vec(Slot::PredConv3B))?;

        if !output.is_finite() {
            return Err(Error::NonFinite("density prediction".into()));
        }
        Ok(ForwardTrace {
            input: input.clone(),
            bb_conv1,
            bb_stats,
            bb_bn,
            bb_relu,
            features,
            enc,
            phi,
            affine,
            logits,
            isbn_stats,
            modulated,
            pred1_pre,
            pred1,
            pred2,
            output,
        })
    }

    /// Accumulates parameter gradients for upstream `grad_output` (w.r.t. Ŷ)
    /// and optional `grad_logits`. Train-mode traces only.
    pub fn backward(&mut self, t: &ForwardTrace, grad_output: &Tensor4, grad_logits: Option<&Matrix>) -> Result<()> {
        // predictor
        let g3 = site_linear_bwd(&t.pred2, self.params.value(Slot::PredConv3W), grad_output)?;
        let g2 = site_linear_bwd(&t.pred1, self.params.value(Slot::PredConv2W), &g3.x)?;
        let g1_pre = relu_bwd(&t.pred1_pre, &g2.x)?;
        let g1 = site_linear_bwd(&t.modulated, self.params.value(Slot::PredConv1W), &g1_pre)?;

        // IsBN: gradients flow into backbone features and into (γ, β)
        let gi = isbn::isbn_bwd(&t.features, &t.isbn_stats, &t.affine, &g1.x)?;

        // parameterizer: decoder + classifier both feed φ
        let gd = parameterizer::decode_bwd(&t.phi, self.params.value(Slot::DecW), &AffinePair { gamma: gi.gamma, beta: gi.beta })?;
        let mut g_phi = gd.h;
        if let Some(gl) = grad_logits {
            let (gp, gw) = parameterizer::classify_bwd(&t.phi, self.params.value(Slot::ClsW), gl)?;
            for (a, b) in g_phi.data_mut().iter_mut().zip(gp.data()) {
                *a += b;
            }
            self.params.add_grad(Slot::ClsW, gw.data());
        }
        let ge = parameterizer::encode_bwd(&t.input, &self.params.encoder(), &t.enc, &g_phi)?;

        // backbone
        let gb2 = site_linear_bwd(&t.bb_relu, self.params.value(Slot::BbConv2W), &gi.x)?;
        let g_bn = relu_bwd(&t.bb_bn, &gb2.x)?;
        let gbn = isbn::bn_bwd(&t.bb_conv1, &t.bb_stats, self.params.vec(Slot::BbBnGamma), self.params.vec(Slot::BbBnBeta), &g_bn)?;
        let gb1 = site_linear_bwd(&t.input, self.params.value(Slot::BbConv1W), &gbn.x)?;

        let p = &mut self.params;
        p.add_grad(Slot::PredConv3W, g3.w.data());
        p.add_grad(Slot::PredConv3B, &g3.bias);
        p.add_grad(Slot::PredConv2W, g2.w.data());
        p.add_grad(Slot::PredConv2B, &g2.bias);
        p.add_grad(Slot::PredConv1W, g1.w.data());
        p.add_grad(Slot::PredConv1B, &g1.bias);
        p.add_grad(Slot::DecW, gd.w.data());
        p.add_grad(Slot::DecB, &gd.bias);
        p.add_grad(Slot::EncConvW, ge.conv_w.data());
        p.add_grad(Slot::EncConvB, &ge.conv_b);
        p.add_grad(Slot::EncBnGamma, &ge.bn_gamma);
        p.add_grad(Slot::EncBnBeta, &ge.bn_beta);
        p.add_grad(Slot::EncFc1W, ge.fc1.w.data());
        p.add_grad(Slot::EncFc1B, &ge.fc1.bias);
        p.add_grad(Slot::EncFc2W, ge.fc2.w.data());
        p.add_grad(Slot::EncFc2B, &ge.fc2.bias);
        p.add_grad(Slot::EncFc3W, ge.fc3.w.data());
        p.add_grad(Slot::EncFc3B, &ge.fc3.bias);
        p.add_grad(Slot::BbConv2W, gb2.w.data());
        p.add_grad(Slot::BbConv2B, &gb2.bias);
        p.add_grad(Slot::BbBnGamma, &gbn.gamma);
        p.add_grad(Slot::BbBnBeta, &gbn.beta);
        p.add_grad(Slot::BbConv1W, gb1.w.data());
        p.add_grad(Slot::BbConv1B, &gb1.bias);
        Ok(())
    }

    /// Folds a train-mode trace's batch statistics into the running copies.
    pub fn update_running(&mut self, t: &ForwardTrace, momentum: f64) -> Result<()> {
        for (site, stats) in [(BN_BACKBONE, &t.bb_stats), (BN_ENCODER, &t.enc.stats), (BN_ISBN, &t.isbn_stats)] {
            let updated = isbn::update_running_stats(stats, momentum)?;
            self.running[site] = updated.running;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor4,
    pub bb_conv1: Tensor4,
    pub bb_stats: BatchStats,
    pub bb_bn: Tensor4,
    pub bb_relu: Tensor4,
    pub features: Tensor4,
    pub enc: EncoderTrace,
    pub phi: LatentBatch,
    pub affine: AffinePair,
    pub logits: Matrix,
    pub isbn_stats: BatchStats,
    pub modulated: Tensor4,
    pub pred1_pre: Tensor4,
    pub pred1: Tensor4,
    pub pred2: Tensor4,
    /// Predicted density maps `(B, 1, H, W)`.
    pub output: Tensor4,
}

impl ForwardTrace {
    pub fn predicted_counts(&self) -> Vec<f64> {
        (0..self.output.batch())
            .map(|b| self.output.plane_slice(b, 0).iter().sum())
            .collect()
    }
}
