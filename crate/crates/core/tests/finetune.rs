use stag_core::accounting::{count_flops, estimate_memory, CostInputs};
use stag_core::backbone::BackboneConfig;
use stag_core::geometry::{normalize_cloud, PointCloud};
use stag_core::model::{Model, ModelConfig, Strategy};
use stag_core::params::Component;
use stag_core::side::{count_side_params, StagConfig};
use stag_core::train::{finetune, head_param_count, Dataset, TrainConfig};
use stag_core::{Error, Precision, RngStream};

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { d: 8, layers: 4, tokens: 8, heads: 2, mlp_ratio: 2, group_size: 8 }
}

/// Three classes: isotropic blobs stretched along x, y or z.
fn blobs(per_class: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = RngStream::new(seed, "blobs");
    let mut out = Vec::new();
    for class in 0..3 {
        for i in 0..per_class {
            let pts = (0..64)
                .map(|_| {
                    let mut p = [rng.normal(), rng.normal(), rng.normal()];
                    p[class] *= 3.0;
                    p
                })
                .collect();
            let mut cloud = normalize_cloud(&PointCloud::new(pts)).unwrap();
            cloud.label = Some(class);
            cloud.source_id = format!("blob/{class}/{i}");
            out.push(cloud);
        }
    }
    out
}

fn dataset() -> Dataset {
    Dataset { train: blobs(4, 1), test: blobs(2, 2), class_names: vec!["x".into(), "y".into(), "z".into()] }
}

fn model(strategy: Strategy, side: StagConfig) -> Model<f64> {
    let config = ModelConfig {
        backbone: tiny_backbone(),
        side: strategy.side_config(&tiny_backbone(), &side),
        classes: 3,
        dropout: 0.5,
    };
    Model::new(config, &mut RngStream::new(0, "backbone"), &RngStream::new(5, "init")).unwrap()
}

fn train_config(strategy: Strategy, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, deterministic: true, ..TrainConfig::desk(strategy, 9) }
}

#[test]
fn head_only_leaves_everything_else_untouched() {
    let mut m = model(Strategy::HeadOnly, StagConfig::std(8, 4, 2));
    let frozen_before = m.store.fingerprint(|e| e.component != Component::Head);
    let head_before = m.store.fingerprint(|e| e.component == Component::Head);
    let report = finetune(&dataset(), &mut m, &train_config(Strategy::HeadOnly, 2)).unwrap();
    assert_eq!(m.store.fingerprint(|e| e.component != Component::Head), frozen_before);
    assert_ne!(m.store.fingerprint(|e| e.component == Component::Head), head_before);
    assert!(report.tunable_names.iter().all(|n| n.starts_with("head.")));
    assert_eq!(report.tunable_params, head_param_count(8, 3));
}

#[test]
fn stag_tunes_side_and_head_only() {
    let side = StagConfig::std(8, 4, 2);
    let mut m = model(Strategy::StagStd, side.clone());
    let backbone_before = m.store.fingerprint(|e| e.component.is_backbone());
    let report = finetune(&dataset(), &mut m, &train_config(Strategy::StagStd, 1)).unwrap();
    assert_eq!(m.store.fingerprint(|e| e.component.is_backbone()), backbone_before);
    assert_eq!(report.tunable_params, count_side_params(&side) + head_param_count(8, 3));
}

#[test]
fn zero_epochs_changes_nothing() {
    let mut m = model(Strategy::StagStd, StagConfig::std(8, 4, 2));
    let before = m.store.fingerprint(|_| true);
    let report = finetune(&dataset(), &mut m, &train_config(Strategy::StagStd, 0)).unwrap();
    assert!(report.metrics.is_empty());
    assert_eq!(m.store.fingerprint(|_| true), before);
    assert!((0.0..=1.0).contains(&report.final_test_acc));
}

#[test]
fn first_batch_loss_near_uniform() {
    let mut m = model(Strategy::StagStd, StagConfig::std(8, 4, 2));
    let report = finetune(&dataset(), &mut m, &train_config(Strategy::StagStd, 1)).unwrap();
    let loss = report.first_batch_loss.unwrap();
    assert!((loss - 3f64.ln()).abs() <= 0.2, "first batch loss {loss}");
}

#[test]
fn deterministic_runs_repeat_exactly() {
    let run = || {
        let mut m = model(Strategy::StagStd, StagConfig::std(8, 4, 2));
        let r = finetune(&dataset(), &mut m, &train_config(Strategy::StagStd, 2)).unwrap();
        (m.store.fingerprint(|_| true), r.metrics.iter().map(|e| (e.train_loss, e.test_acc)).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn empty_training_set_is_a_data_error() {
    let mut m = model(Strategy::HeadOnly, StagConfig::std(8, 4, 2));
    let data = Dataset { train: Vec::new(), ..dataset() };
    let err = finetune(&data, &mut m, &train_config(Strategy::HeadOnly, 1)).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err:?}");
}

#[test]
fn side_network_without_modulation_is_rejected() {
    let side = StagConfig::custom(8, 4, 4, 4, 2, None);
    let mut m = model(Strategy::StagCustom, side);
    let err = finetune(&dataset(), &mut m, &train_config(Strategy::StagCustom, 1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

fn full_inputs(a: usize) -> CostInputs {
    CostInputs {
        backbone: BackboneConfig::full_scale(),
        side: StagConfig::custom(384, 192, 12, a, 8, None),
        classes: 15,
        precision: Precision::Single,
        batch_size: 32,
    }
}

#[test]
fn backward_flops_and_memory_fall_as_a_grows() {
    let mut prev: Option<(u64, u64)> = None;
    for a in [0, 2, 4, 6, 8, 10, 11] {
        let inputs = full_inputs(a);
        let back = count_flops(&inputs, Strategy::StagCustom).unwrap().backward;
        let mem = estimate_memory(&inputs, Strategy::StagCustom).unwrap();
        if let Some((pb, pm)) = prev {
            assert!(back < pb, "A={a}: backward {back} not below {pb}");
            assert!(mem < pm, "A={a}: memory {mem} not below {pm}");
        }
        prev = Some((back, mem));
    }
}

#[test]
fn tiny_side_count() {
    // d=8, d'=4, L=4, A=2, one shared group each: D 8*4+4, G 2*4*4 (W', W2)
    // plus phi 4*4+4, U 4*8+8.
    let cfg = StagConfig::std(8, 4, 2);
    assert_eq!(count_side_params(&cfg), 36 + 32 + 20 + 40);
}
