mod common;

use common::{control_forward, max_abs_diff, perturbed_model, random_tensor, rng, GradProblem};
use mdknet::isbn::Mode;
use mdknet::losses::Variant;
use mdknet::synth::{load_split, Split};
use mdknet::trainer::{train_epoch, Model, TensorData, TrainerState};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[test]
fn whole_model_gradients_for_every_variant() {
    for (variant, seed) in [(Variant::Base, 31), (Variant::Gcl, 32), (Variant::Vcl, 33)] {
        let report = GradProblem::new(variant, seed).check(1e-5, 1e-4);
        assert!(report.passed, "{variant}: {report:?}");
        assert!(report.skipped * 50 < report.checked, "{variant}: {report:?}");
    }
}

#[test]
fn classifier_only_moves_with_classification_loss() {
    let base = GradProblem::new(Variant::Base, 40);
    let g = base.analytic();
    let model = &base.model;
    let mut offset = 0;
    for slot in &model.params.slots {
        let n = slot.len();
        let norm: f64 = g[offset..offset + n].iter().map(|v| v * v).sum();
        if slot.name == "parameterizer.classifier.weight" {
            assert_eq!(norm, 0.0);
        } else {
            assert!(norm > 0.0, "{} receives no gradient", slot.name);
        }
        offset += n;
    }
}

#[test]
fn zero_decoder_matches_plain_bn_network() {
    let mut r = rng(50);
    for variant in [Variant::Base, Variant::Vcl] {
        let mut model = perturbed_model(variant, 51);
        model.zero_decoder();
        for _ in 0..5 {
            let x = random_tensor(&mut r, [6, 1, 16, 16], 0.0, 1.0);
            let trace = model.forward(&x, Mode::Train).unwrap();
            let control = control_forward(&model, &x, Mode::Train);
            assert!(max_abs_diff(trace.output.data(), control.data()) < 1e-10);
            model.update_running(&trace, 0.1).unwrap();
        }
        let x = random_tensor(&mut r, [3, 1, 16, 16], 0.0, 1.0);
        let eval = model.forward(&x, Mode::Eval).unwrap();
        let control = control_forward(&model, &x, Mode::Eval);
        assert!(max_abs_diff(eval.output.data(), control.data()) < 1e-10);
    }
}

#[test]
fn nonzero_decoder_departs_from_the_control() {
    let model = perturbed_model(Variant::Vcl, 52);
    let x = random_tensor(&mut rng(53), [4, 1, 16, 16], 0.0, 1.0);
    let out = model.forward(&x, Mode::Train).unwrap().output;
    assert!(max_abs_diff(out.data(), control_forward(&model, &x, Mode::Train).data()) > 1e-6);
}

#[test]
fn training_reduces_the_density_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = common::build_small(tmp.path(), 60);
    let train = TensorData::from_dataset(&load_split(&data, Split::Train).unwrap()).unwrap();
    for variant in Variant::ALL {
        let cfg = mdknet::trainer::TrainConfig { epochs: 30, kappa: 10, ..common::smoke_config(variant, &data) };
        let mut state = TrainerState::new(&cfg, &train).unwrap();
        let first = train_epoch(&mut state, &train, &cfg).unwrap();
        let mut last = first.clone();
        for _ in 1..cfg.epochs {
            last = train_epoch(&mut state, &train, &cfg).unwrap();
        }
        assert!(last.l_den < 0.5 * first.l_den, "{variant}: {} -> {}", first.l_den, last.l_den);
        if variant != Variant::Base {
            assert!(last.l_cls < first.l_cls, "{variant}: {} -> {}", first.l_cls, last.l_cls);
        }
    }
}

#[test]
fn initial_weights_are_shared_across_variants() {
    let a = Model::init(mdknet::trainer::ModelConfig { channels: 16, latent: 32, num_domains: 3, variant: Variant::Base }, 9)
        .unwrap();
    let b = Model::init(mdknet::trainer::ModelConfig { variant: Variant::Vcl, ..a.config }, 9).unwrap();
    for (sa, sb) in a.params.slots.iter().zip(&b.params.slots) {
        if sa.name != "parameterizer.classifier.weight" {
            assert_eq!(sa.value, sb.value, "{}", sa.name);
        }
    }
}
