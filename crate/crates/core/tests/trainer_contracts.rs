//! Structural contracts of the training loop: determinism, the trainability
//! partition per mode, the reconstructor's isolation, prototype freeze and
//! refresh semantics, and the loop's failure behavior.

use dtr_core::checkpoint::Checkpoint;
use dtr_core::datagen::{make_gaussian_shift, DomainTag, LabeledDataset, ShiftSpec};
use dtr_core::losses::{compactness_loss, reconstruction_loss};
use dtr_core::model::{ParamGroup, SOURCE_DOMAIN_LABEL, TARGET_DOMAIN_LABEL};
use dtr_core::tensor::Tensor;
use dtr_core::trainer::{
    resolve_mode_networks, train, train_with_observer, Mode, TrainConfig, TrainError, TrainState,
};

fn standard_data(seed: u64) -> (LabeledDataset, LabeledDataset) {
    make_gaussian_shift(&ShiftSpec::standard(), 600, 600, seed).unwrap()
}

fn quick_cfg(mode: Mode, iterations: u64, seed: u64) -> TrainConfig {
    TrainConfig { mode, iterations, seed, ..TrainConfig::default() }
}

fn tensor_bits(t: &Tensor) -> Vec<u64> {
    t.to_vec().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn identical_configs_give_identical_runs() {
    let cfg = quick_cfg(Mode::Dtr, 40, 5);
    let (source, target) = standard_data(5);
    let a = train(&cfg, &source, &target).unwrap();
    let b = train(&cfg, &source, &target).unwrap();
    let lines_a: Vec<String> =
        a.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
    let lines_b: Vec<String> =
        b.metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
    assert_eq!(lines_a, lines_b);
    let ck_a = serde_json::to_string(&Checkpoint::from_state(&a.state)).unwrap();
    let ck_b = serde_json::to_string(&Checkpoint::from_state(&b.state)).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn zero_iterations_returns_initial_state() {
    let cfg = quick_cfg(Mode::Dtr, 0, 3);
    let (source, target) = standard_data(3);
    let outcome = train(&cfg, &source, &target).unwrap();
    assert_eq!(outcome.state.step, 0);
    assert!(outcome.metrics.is_empty());
    assert!(outcome.evals.is_empty());
}

/// After a run, parameter groups outside the mode's trainable set (and
/// outside prototype refresh) match a never-trained ensemble bit-for-bit.
#[test]
fn trainability_partition_per_mode() {
    let (source, target) = standard_data(11);
    for mode in [Mode::SourceOnly, Mode::Dann, Mode::B, Mode::D, Mode::DR, Mode::Dtr] {
        let cfg = quick_cfg(mode, 8, 11);
        let outcome = train(&cfg, &source, &target).unwrap();
        let fresh = TrainState::new(cfg.clone(), source.input_dim, source.num_classes).unwrap();
        let trainable = resolve_mode_networks(mode);
        for group in ParamGroup::ALL {
            let refresh_touched = mode == Mode::Dtr
                && matches!(group, ParamGroup::SourceProtoHead | ParamGroup::TargetProtoHead);
            if trainable.contains(&group) || refresh_touched {
                continue;
            }
            let trained = outcome.state.ensemble.params_of(group);
            let untouched = fresh.ensemble.params_of(group);
            for (a, b) in trained.iter().zip(&untouched) {
                assert_eq!(
                    tensor_bits(a),
                    tensor_bits(b),
                    "{mode:?}: group {:?} moved outside its mode",
                    group
                );
            }
        }
    }
}

/// Adding the reconstruction step must not perturb anything else: modes `d`
/// and `d_r` share every non-reconstructor parameter bit-for-bit.
#[test]
fn reconstruction_step_is_isolated_from_the_main_path() {
    let (source, target) = standard_data(23);
    let d = train(&quick_cfg(Mode::D, 50, 23), &source, &target).unwrap();
    let dr = train(&quick_cfg(Mode::DR, 50, 23), &source, &target).unwrap();
    let mut compared = 0;
    for ((name_d, t_d), (name_dr, t_dr)) in d
        .state
        .ensemble
        .named_tensors()
        .iter()
        .zip(dr.state.ensemble.named_tensors().iter())
    {
        assert_eq!(name_d, name_dr);
        if name_d.starts_with("reconstructor.") {
            continue;
        }
        assert_eq!(tensor_bits(t_d), tensor_bits(t_dr), "{name_d} diverged");
        compared += 1;
    }
    assert!(compared > 10);
    // And the reconstructor itself did train in d_r.
    let r_d = d.state.ensemble.params_of(ParamGroup::Reconstructor);
    let r_dr = dr.state.ensemble.params_of(ParamGroup::Reconstructor);
    assert_ne!(tensor_bits(r_d[0]), tensor_bits(r_dr[0]));
}

/// Straightforward reimplementation of the two-layer forward pass used to
/// recompute the refresh outputs independently.
fn mlp_forward_by_hand(
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    hidden: usize,
    out_dim: usize,
    x: &[f64],
) -> Vec<f64> {
    let in_dim = x.len();
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += x[i] * w1[j * in_dim + i];
        }
        acc += b1[j];
        h[j] = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut y = vec![0.0; out_dim];
    for j in 0..out_dim {
        let mut acc = 0.0;
        for i in 0..hidden {
            acc += h[i] * w2[j * hidden + i];
        }
        y[j] = acc + b2[j];
    }
    y
}

/// The frozen heads change only on refresh steps, and the refreshed rows
/// equal the reconstruction of (class row, domain row) recomputed from
/// scratch, exactly.
#[test]
fn prototype_freeze_and_refresh_equation() {
    let mut cfg = quick_cfg(Mode::Dtr, 17, 31);
    cfg.refresh_interval = 5;
    let (source, target) = standard_data(31);

    let mut previous: Option<(Vec<u64>, Vec<u64>)> = None;
    let mut checked_refreshes = 0;
    let outcome = train_with_observer(&cfg, &source, &target, |state, _| {
        let ens = &state.ensemble;
        let s_bits = tensor_bits(&ens.source_proto_head.weight);
        let t_bits = tensor_bits(&ens.target_proto_head.weight);
        let is_refresh = state.step % 5 == 1;
        if let Some((prev_s, prev_t)) = &previous {
            if is_refresh {
                assert_eq!(state.bank.last_refresh_step, state.step);
            } else {
                assert_eq!(&s_bits, prev_s, "source head moved outside a refresh step");
                assert_eq!(&t_bits, prev_t, "target head moved outside a refresh step");
            }
        }
        if is_refresh {
            // Recompute the reconstruction by hand from the live weights.
            let dims = &ens.dims;
            let class_rows = ens.class_head.weight.to_vec();
            let domain_rows = ens.domain_head.weight.to_vec();
            let w1 = ens.reconstructor.layer1.weight.to_vec();
            let b1 = ens.reconstructor.layer1.bias.as_ref().unwrap().to_vec();
            let w2 = ens.reconstructor.layer2.weight.to_vec();
            let b2 = ens.reconstructor.layer2.bias.as_ref().unwrap().to_vec();
            let head = ens.source_proto_head.weight.to_vec();
            for class in 0..dims.num_classes {
                let mut input = class_rows
                    [class * dims.invariant_dim..(class + 1) * dims.invariant_dim]
                    .to_vec();
                input.extend_from_slice(
                    &domain_rows[SOURCE_DOMAIN_LABEL * dims.specific_dim
                        ..(SOURCE_DOMAIN_LABEL + 1) * dims.specific_dim],
                );
                let expect = mlp_forward_by_hand(
                    &w1,
                    &b1,
                    &w2,
                    &b2,
                    dims.hidden,
                    dims.feature_dim,
                    &input,
                );
                let got = &head[class * dims.feature_dim..(class + 1) * dims.feature_dim];
                assert_eq!(
                    got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "refresh row {class} differs from the recomputed value"
                );
            }
            checked_refreshes += 1;
        }
        previous = Some((s_bits, t_bits));
    })
    .unwrap();
    assert_eq!(outcome.state.step, 17);
    assert_eq!(checked_refreshes, 4, "refreshes at steps 1, 6, 11, 16");
}

#[test]
fn compactness_gradients_reach_only_the_extractor() {
    let (source, target) = standard_data(7);
    let cfg = quick_cfg(Mode::Dtr, 1, 7);
    let state = TrainState::new(cfg, source.input_dim, source.num_classes).unwrap();
    let ens = &state.ensemble;

    let d = source.input_dim;
    let x = Tensor::constant(vec![8, d], source.features()[..8 * d].to_vec()).unwrap();
    let labels: Vec<usize> = source.labels().unwrap()[..8].to_vec();
    let feats = ens.extractor.forward(&x).unwrap();
    let empty = Tensor::constant(vec![0, ens.dims.feature_dim], vec![]).unwrap();
    let loss = compactness_loss(ens, &feats, &labels, &empty, &[], 1.0).unwrap();
    loss.total.backward().unwrap();

    for p in ens.params_of(ParamGroup::Extractor) {
        assert!(p.grad().is_some());
    }
    for group in [
        ParamGroup::InvariantDisentangler,
        ParamGroup::SpecificDisentangler,
        ParamGroup::ClassHead,
        ParamGroup::DomainHead,
        ParamGroup::Discriminator,
        ParamGroup::Reconstructor,
        ParamGroup::SourceProtoHead,
        ParamGroup::TargetProtoHead,
    ] {
        for p in state.ensemble.params_of(group) {
            assert!(p.grad().is_none(), "{group:?} received compactness gradient");
        }
    }
    let _ = target;
}

#[test]
fn reconstruction_gradients_reach_only_the_reconstructor() {
    let (source, _) = standard_data(7);
    let cfg = quick_cfg(Mode::Dtr, 1, 7);
    let state = TrainState::new(cfg, source.input_dim, source.num_classes).unwrap();
    let ens = &state.ensemble;

    let d = source.input_dim;
    let x = Tensor::constant(vec![8, d], source.features()[..8 * d].to_vec()).unwrap();
    let bundle = ens.forward_all(&x).unwrap();
    let joined = bundle.invariant.detach().concat_cols(&bundle.specific.detach()).unwrap();
    let rec = ens.reconstructor.forward(&joined).unwrap();
    let loss = reconstruction_loss(&rec, &bundle.features.detach()).unwrap();
    loss.backward().unwrap();

    for p in ens.params_of(ParamGroup::Reconstructor) {
        assert!(p.grad().is_some());
    }
    for group in [
        ParamGroup::Extractor,
        ParamGroup::InvariantDisentangler,
        ParamGroup::SpecificDisentangler,
    ] {
        for p in ens.params_of(group) {
            assert!(p.grad().is_none(), "{group:?} received reconstruction gradient");
        }
    }
}

#[test]
fn source_only_fits_a_separable_source() {
    let spec = ShiftSpec {
        base: dtr_core::datagen::BaseDistribution::GaussianMixture {
            means: dtr_core::datagen::ring_means(3, 4.0, 2),
            cov_scale: 0.35,
        },
        rotation_deg: 0.0,
        translation: vec![],
        axis_scale: vec![],
        label_noise: 0.0,
    };
    let (source, target) = make_gaussian_shift(&spec, 300, 300, 2).unwrap();
    let mut cfg = quick_cfg(Mode::SourceOnly, 200, 2);
    cfg.eval_interval = 200;
    let outcome = train(&cfg, &source, &target).unwrap();
    let last = outcome.evals.last().unwrap();
    assert!(last.acc_c_di_src > 0.99, "source accuracy {}", last.acc_c_di_src);
}

#[test]
fn divergence_aborts_with_loss_and_step() {
    let (source, target) = standard_data(13);
    let mut cfg = quick_cfg(Mode::Dtr, 50, 13);
    cfg.optimizer.lr_heads = 1e9;
    cfg.optimizer.lr_extractor = 1e9;
    let err = match train(&cfg, &source, &target) {
        Ok(_) => panic!("expected the run to abort"),
        Err(e) => e,
    };
    match err {
        TrainError::NonFiniteLoss { loss, step } => {
            assert!(!loss.is_empty());
            assert!(step >= 1);
        }
        other => panic!("expected a non-finite abort, got {other}"),
    }
}

/// The trainer runs against a target dataset that carries no labels at all;
/// nothing on the training path needs them.
#[test]
fn label_free_target_trains() {
    let (source, target) = standard_data(17);
    let unlabeled = LabeledDataset::from_parts(
        "unlabeled-target",
        DomainTag::Target,
        target.input_dim,
        target.num_classes,
        target.seed,
        target.features().to_vec(),
        None,
    );
    let cfg = quick_cfg(Mode::Dtr, 6, 17);
    let outcome = train(&cfg, &source, &unlabeled).unwrap();
    assert_eq!(outcome.state.step, 6);
    let last = outcome.evals.last().unwrap();
    assert!(last.acc_c_di_tgt.is_none());
    assert!(last.acc_c_di_src > 0.0);
}

#[test]
fn dann_conditions_on_plain_invariant_features() {
    let (source, _) = standard_data(19);
    let dann = TrainState::new(quick_cfg(Mode::Dann, 1, 19), source.input_dim, source.num_classes)
        .unwrap();
    assert_eq!(dann.ensemble.discriminator.in_dim(), dann.ensemble.dims.invariant_dim);
    let b = TrainState::new(quick_cfg(Mode::B, 1, 19), source.input_dim, source.num_classes)
        .unwrap();
    assert_eq!(
        b.ensemble.discriminator.in_dim(),
        b.ensemble.dims.invariant_dim * b.ensemble.dims.num_classes
    );
}

/// Domain-supervised training pulls specific features toward their domain
/// prototype: the mean distance over correctly domain-classified samples
/// does not increase from initialization to the end of a full run.
#[test]
fn specific_features_approach_domain_prototypes() {
    let (source, target) = standard_data(29);
    let cfg = quick_cfg(Mode::Dtr, 400, 29);

    let measure = |state: &TrainState| -> f64 {
        let ens = &state.ensemble;
        let mut total = 0.0;
        let mut count = 0usize;
        for (ds, domain_label) in
            [(&source, SOURCE_DOMAIN_LABEL), (&target, TARGET_DOMAIN_LABEL)]
        {
            let x = Tensor::constant(vec![ds.len(), ds.input_dim], ds.features().to_vec())
                .unwrap();
            let bundle = ens.forward_all(&x).unwrap();
            let preds = dtr_core::model::argmax_rows(&bundle.domain_logits);
            let specific = bundle.specific.to_vec();
            let d = ens.dims.specific_dim;
            let proto = ens.domain_head.weight.to_vec()
                [domain_label * d..(domain_label + 1) * d]
                .to_vec();
            for (i, &p) in preds.iter().enumerate() {
                if p != domain_label {
                    continue;
                }
                let row = &specific[i * d..(i + 1) * d];
                total +=
                    row.iter().zip(&proto).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                count += 1;
            }
        }
        if count == 0 {
            f64::INFINITY
        } else {
            total / count as f64
        }
    };

    let initial_state =
        TrainState::new(cfg.clone(), source.input_dim, source.num_classes).unwrap();
    let before = measure(&initial_state);
    let outcome = train(&cfg, &source, &target).unwrap();
    let after = measure(&outcome.state);
    assert!(
        after <= before,
        "specific-feature prototype distance grew: {before} -> {after}"
    );
}
