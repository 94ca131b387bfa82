#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mdknet::losses::Variant;
use mdknet::synth::{self, BenchmarkSpec, SplitSizes};
use mdknet::trainer::TrainConfig;

/// The default three-domain law at a size that trains in a second or two.
pub fn small_benchmark(seed: u64) -> BenchmarkSpec {
    let mut spec = BenchmarkSpec::default_recipe(seed);
    spec.sizes = vec![
        SplitSizes { train: 24, test: 6 },
        SplitSizes { train: 10, test: 6 },
        SplitSizes { train: 10, test: 6 },
    ];
    spec
}

pub fn build_small(root: &Path, seed: u64) -> PathBuf {
    let data = root.join("data");
    synth::build_benchmark(&small_benchmark(seed), &data).unwrap();
    data
}

/// Eight epochs with two fusion windows closing at epochs 4 and 6.
pub fn smoke_config(variant: Variant, data: &Path) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 8,
        kappa: 3,
        tau: 2,
        batch_size: 8,
        eval_every: 2,
        seed: 5,
        dataset_path: data.to_path_buf(),
        ..TrainConfig::default()
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

use mdknet::dvc::{num_classes, VirtualLabel};
use mdknet::isbn::Mode;
use mdknet::numerics::{relative_error, softmax, Matrix, Tensor4};
use mdknet::trainer::{batch_loss, ClassTargets, ForwardTrace, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A model with every bias, BN shift and BN scale moved off its initial
/// value, so no gradient path is hidden behind a zero.
pub fn perturbed_model(variant: Variant, seed: u64) -> Model {
    let cfg = ModelConfig { channels: 16, latent: 32, num_domains: 3, variant };
    let mut model = Model::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for slot in &mut model.params.slots {
        let name = slot.name.clone();
        for v in slot.value.data_mut() {
            if name.ends_with("bias") || name.ends_with("beta") {
                *v = r.random_range(-0.5..0.5);
            } else if name.ends_with("gamma") {
                *v = r.random_range(0.5..1.5);
            }
        }
    }
    model
}

pub struct GradProblem {
    pub model: Model,
    pub input: Tensor4,
    pub target: Tensor4,
    pub domains: Vec<usize>,
    pub virtual_targets: Vec<VirtualLabel>,
}

impl GradProblem {
    /// Four 16×16 scenes with soft virtual targets. Density targets sit
    /// within ±0.1 of the model's own prediction, which keeps the loss O(1):
    /// central differences carry about `ε·|f|/h` of rounding noise, and at
    /// |f| ≈ 100 that noise swamps entries whose true gradient is zero (the
    /// biases feeding straight into BN).
    pub fn new(variant: Variant, seed: u64) -> Self {
        let mut r = rng(seed);
        let model = perturbed_model(variant, seed);
        let input = random_tensor(&mut r, [4, 1, 16, 16], 0.0, 1.0);
        let mut target = model.forward(&input, Mode::Train).unwrap().output;
        target.data_mut().iter_mut().for_each(|t| *t += r.random_range(-0.1..0.1));
        let v = num_classes(3);
        let virtual_targets = (0..4)
            .map(|_| VirtualLabel(softmax(&(0..v).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>())))
            .collect();
        GradProblem {
            model,
            input,
            target,
            domains: vec![0, 1, 2, 1],
            virtual_targets,
        }
    }

    fn cls(&self) -> ClassTargets<'_> {
        match self.model.config.variant {
            Variant::Base => ClassTargets::None,
            Variant::Gcl => ClassTargets::Domains(&self.domains),
            Variant::Vcl => ClassTargets::Virtual(&self.virtual_targets),
        }
    }

    pub fn analytic(&self) -> Vec<f64> {
        let mut model = self.model.clone();
        model.params.zero_grad();
        let trace = model.forward(&self.input, Mode::Train).unwrap();
        let l = batch_loss(&trace, &self.target, self.cls(), model.config.variant, 1.0).unwrap();
        model.backward(&trace, &l.grad_output, l.grad_logits.as_ref()).unwrap();
        model.params.flat_grads()
    }

    /// Central differences over every parameter of the model. A coordinate
    /// whose ±h probes flip any ReLU input across zero straddles a kink,
    /// where the difference quotient measures the jump rather than the
    /// derivative; those are skipped and counted.
    pub fn check(&self, h: f64, tol: f64) -> WholeModelCheck {
        let analytic = self.analytic();
        let theta = self.model.params.flat_values();
        let mut probe = self.model.clone();
        let mut eval = |t: &[f64]| {
            probe.params.set_flat_values(t).unwrap();
            let trace = probe.forward(&self.input, Mode::Train).unwrap();
            let loss = batch_loss(&trace, &self.target, self.cls(), probe.config.variant, 1.0).unwrap();
            (loss.breakdown.total, relu_pattern(&trace))
        };
        let (_, pattern0) = eval(&theta);
        let mut t = theta.clone();
        let mut out = WholeModelCheck { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0, passed: false };
        for i in 0..theta.len() {
            t[i] = theta[i] + h;
            let (fp, pp) = eval(&t);
            t[i] = theta[i] - h;
            let (fm, pm) = eval(&t);
            t[i] = theta[i];
            if pp != pattern0 || pm != pattern0 {
                out.skipped += 1;
                continue;
            }
            out.checked += 1;
            let err = relative_error(analytic[i], (fp - fm) / (2.0 * h));
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst_index = i;
            }
        }
        out.passed = out.max_rel_error < tol;
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WholeModelCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose probes crossed a ReLU kink.
    pub skipped: usize,
    pub passed: bool,
}

/// Signs of every ReLU input in a forward pass.
fn relu_pattern(t: &ForwardTrace) -> Vec<bool> {
    [t.bb_bn.data(), t.enc.bn_out.data(), t.enc.pre1.data(), t.enc.pre2.data(), t.pred1_pre.data()]
        .into_iter()
        .flatten()
        .map(|&v| v > 0.0)
        .collect()
}

/// `out[b, o, p] = Σ_i w[o, i]·x[b, i, p] + bias[o]`, written as plain loops.
pub fn loop_site_linear(x: &Tensor4, w: &Matrix, bias: &[f64]) -> Tensor4 {
    let [b, c, h, wd] = x.shape();
    let o = w.rows();
    let mut out = Tensor4::zeros([b, o, h, wd]);
    for n in 0..b {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = bias[oc];
                    for ic in 0..c {
                        s += w.get(oc, ic) * x.get(n, ic, i, j);
                    }
                    let k = out.index(n, oc, i, j);
                    out.data_mut()[k] = s;
                }
            }
        }
    }
    out
}

/// Textbook batch normalization with biased variance and ε = 1e-5. Uses the
/// supplied `(μ, σ)` when given, batch statistics otherwise.
pub fn loop_bn(x: &Tensor4, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> Tensor4 {
    let [b, c, h, w] = x.shape();
    let mut out = x.clone();
    for ch in 0..c {
        let (mu, sigma) = match stats {
            Some((m, s)) => (m[ch], s[ch]),
            None => {
                let vals: Vec<f64> = (0..b).flat_map(|n| x.plane_slice(n, ch).to_vec()).collect();
                let n = vals.len() as f64;
                let mu = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                (mu, (var + 1e-5).sqrt())
            }
        };
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let k = out.index(n, ch, i, j);
                    out.data_mut()[k] = gamma[ch] * (x.get(n, ch, i, j) - mu) / sigma + beta[ch];
                }
            }
        }
    }
    out
}

pub fn loop_relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// The density path of the model with a plain, unmodulated BN in place of
/// IsBN (scale 1, shift 0), rebuilt from loops. `Mode::Eval` normalizes with
/// the model's running statistics.
pub fn control_forward(model: &Model, input: &Tensor4, mode: Mode) -> Tensor4 {
    use mdknet::trainer::Slot::*;
    let p = |s| &model.params.get(s).value;
    let v = |s| model.params.get(s).value.data();
    let running = |site: usize| {
        let r = model.running[site].as_ref().expect("running statistics");
        (r.mu.as_slice(), r.sigma.as_slice())
    };
    let stats = |site| if mode == Mode::Eval { Some(running(site)) } else { None };
    let c = model.config.channels;

    let h = loop_site_linear(input, p(BbConv1W), v(BbConv1B));
    let h = loop_relu(&loop_bn(&h, v(BbBnGamma), v(BbBnBeta), stats(0)));
    let f = loop_site_linear(&h, p(BbConv2W), v(BbConv2B));
    let f = loop_bn(&f, &vec![1.0; c], &vec![0.0; c], stats(2));
    let h = loop_relu(&loop_site_linear(&f, p(PredConv1W), v(PredConv1B)));
    let h = loop_site_linear(&h, p(PredConv2W), v(PredConv2B));
    loop_site_linear(&h, p(PredConv3W), v(PredConv3B))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
