use vistafuse::dataset::{split_train_test, Dataset, Role};
use vistafuse::fusion::FusionStrategy;
use vistafuse::model::{evaluate, predict, run_experiment, train, Modality, ModelConfig, TrainConfig, VisTaNet};
use vistafuse::streams::AugmentConfig;
use vistafuse::synthgen::{generate, GenerateConfig};
use vistafuse::Error;

fn small_data(classes: Vec<usize>, specimens: usize) -> Dataset {
    generate(&GenerateConfig {
        classes,
        specimens_per_class: specimens,
        sweeps_per_specimen: 1,
        images_per_specimen: 1,
        seed: 11,
        ..GenerateConfig::default()
    })
    .unwrap()
}

fn small_model(fusion: FusionStrategy, modality: Modality) -> ModelConfig {
    let mut m = ModelConfig {
        fusion,
        modality,
        d_f: 8,
        classifier_hidden: 8,
        ..ModelConfig::default()
    };
    m.augment = AugmentConfig {
        crop_size: 16,
        ..m.augment
    };
    m.visual.conv_channels = vec![4];
    m.visual.dense_widths = vec![16];
    m.tactile.dense_widths = vec![16];
    m
}

fn all_items(data: &Dataset) -> Vec<usize> {
    (0..data.manifest.records.len()).collect()
}

#[test]
fn two_class_toy_is_learned_within_twenty_epochs() {
    // coarsest and finest horizontal milling
    let data = small_data(vec![0, 5], 24);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        modality: Modality::Tactile,
        ..ModelConfig::default()
    };
    let mut net = VisTaNet::new(&model, cfg.init_seed()).unwrap();
    let items = all_items(&data);
    let outcome = train(&mut net, &data, &items, &cfg, &mut |_, _| {}).unwrap();
    assert_eq!(outcome.loss_curve.len(), 20);
    assert!(outcome.loss_curve[19] < outcome.loss_curve[0]);
    let preds = predict(&net, &data, &items, 1).unwrap();
    let acc = preds.iter().filter(|p| p.label == p.predicted).count() as f64 / preds.len() as f64;
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let data = small_data(vec![0, 7], 2);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let mut net = VisTaNet::new(&small_model(FusionStrategy::Attention, Modality::Both), cfg.init_seed()).unwrap();
    let before = net.store.clone();
    let outcome = train(&mut net, &data, &all_items(&data), &cfg, &mut |_, _| {}).unwrap();
    assert!(outcome.loss_curve.is_empty() && outcome.batches.is_empty());
    assert_eq!(net.store, before);
}

#[test]
fn runs_repeat_exactly_and_threads_do_not_change_results() {
    let data = small_data(vec![1, 8, 15], 3);
    let model = small_model(FusionStrategy::Attention, Modality::Both);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = run_experiment(&data, &model, &cfg, 1, &mut |_, _| {}).unwrap();
    let b = run_experiment(&data, &model, &cfg, 3, &mut |_, _| {}).unwrap();
    assert_eq!(a.net.store, b.net.store);
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.confusion_csv(), b.report.confusion_csv());

    let other = run_experiment(&data, &model, &TrainConfig { seed: 6, ..cfg }, 1, &mut |_, _| {}).unwrap();
    assert_ne!(a.net.store, other.net.store);
}

#[test]
fn families_share_split_and_batches() {
    let data = small_data(vec![2, 9], 3);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let sum = run_experiment(&data, &small_model(FusionStrategy::Sum, Modality::Both), &cfg, 1, &mut |_, _| {}).unwrap();
    let tac = run_experiment(&data, &small_model(FusionStrategy::Sum, Modality::Tactile), &cfg, 1, &mut |_, _| {}).unwrap();
    assert_eq!(sum.split, tac.split);
    assert_eq!(sum.outcome.batches, tac.outcome.batches);
}

#[test]
fn test_split_holds_whole_specimens() {
    let data = small_data(vec![3, 4], 5);
    let split = split_train_test(&data.manifest, 0.8, 1).unwrap();
    let test = split.indices(&data.manifest, Role::Test);
    let train_ids: Vec<&str> = split
        .indices(&data.manifest, Role::Train)
        .iter()
        .map(|&i| data.manifest.records[i].specimen_id.as_str())
        .collect();
    assert_eq!(test.len(), 2);
    assert!(test.iter().all(|&i| !train_ids.contains(&data.manifest.records[i].specimen_id.as_str())));
}

#[test]
fn diverging_training_reports_non_finite_loss() {
    let data = small_data(vec![0, 5], 2);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        base_lr: 1e300,
        ..TrainConfig::default()
    };
    let mut net = VisTaNet::new(&small_model(FusionStrategy::Sum, Modality::Tactile), 0).unwrap();
    let err = train(&mut net, &data, &all_items(&data), &cfg, &mut |_, _| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn evaluation_counts_every_window() {
    let data = small_data(vec![6], 2);
    let net = VisTaNet::new(&small_model(FusionStrategy::Max, Modality::Both), 0).unwrap();
    let items = all_items(&data);
    let report = evaluate(&net, &data, &items, vec![], 2).unwrap();
    // one 500-sample sweep per item, windows of 50 with stride 50
    assert_eq!(report.total, 2 * 10);
    assert_eq!(report.confusion.iter().flatten().sum::<u64>(), report.total);
}
