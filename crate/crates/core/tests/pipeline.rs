//! End-to-end training, evaluation and comparison on small problems.

use std::sync::atomic::AtomicBool;

use smoothconv::segmentation::compare::{
    compare_modes, seed_datasets, DataConfig, ExperimentConfig,
};
use smoothconv::segmentation::metrics::evaluate;
use smoothconv::segmentation::model::{ModelConfig, ToyModel};
use smoothconv::segmentation::train::{train, TrainConfig};
use smoothconv::{FilterKind, Rng};

fn small_data() -> DataConfig {
    DataConfig {
        train_samples: 12,
        test_samples: 6,
        height: 32,
        width: 32,
        classes: 4,
    }
}

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        crop_size: 32,
        ..TrainConfig::default()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_reduces_loss_and_improves_iou() {
    let (train_set, test_set) = seed_datasets(&small_data(), 0.3, 4).unwrap();
    for mode in [
        FilterKind::None,
        FilterKind::Average,
        FilterKind::Aggregated,
    ] {
        let model =
            ToyModel::new(ModelConfig::default().with_smoothing(mode), &Rng::new(4)).unwrap();
        let before = evaluate(&model, &test_set).unwrap().miou;
        let out = train(model, &train_set, &small_train(150), None).unwrap();
        assert_eq!(out.steps_completed, 150);
        assert_eq!(out.losses.len(), 150);
        let (head, tail) = (mean(&out.losses[..20]), mean(&out.losses[130..]));
        assert!(tail < head, "{mode}: loss {head} -> {tail}");
        let after = evaluate(&out.model, &test_set).unwrap().miou;
        assert!(after > before, "{mode}: mIoU {before} -> {after}");
    }
}

#[test]
fn cancellation_stops_early() {
    let (train_set, _) = seed_datasets(&small_data(), 0.3, 1).unwrap();
    let model = ToyModel::new(ModelConfig::default(), &Rng::new(1)).unwrap();
    let cancel = AtomicBool::new(true);
    let out = train(model, &train_set, &small_train(50), Some(&cancel)).unwrap();
    assert!(out.interrupted);
    assert_eq!(out.steps_completed, 0);
}

#[test]
fn comparison_grid_is_complete_and_reproducible() {
    let cfg = ExperimentConfig {
        modes: vec![FilterKind::None, FilterKind::Gaussian],
        seeds: vec![1, 2, 3],
        noise_level: 0.3,
        data: small_data(),
        model: ModelConfig::default(),
        train: small_train(10),
    };
    let a = compare_modes(&cfg, None).unwrap();
    assert_eq!(a.cells.len(), 6);
    assert_eq!(a.failed_cells().count(), 0);
    assert_eq!(a.to_csv(false).lines().count(), 7);
    let summaries = a.summaries();
    assert_eq!(summaries.len(), 2);
    assert!(summaries
        .iter()
        .all(|s| s.runs == 3 && (0.0..=1.0).contains(&s.miou_mean)));
    let b = compare_modes(&cfg, None).unwrap();
    assert_eq!(a.to_csv(false), b.to_csv(false));
}

#[test]
fn comparison_rejects_degenerate_grids() {
    let base = ExperimentConfig {
        data: small_data(),
        train: small_train(1),
        ..ExperimentConfig::default()
    };
    let one_mode = ExperimentConfig {
        modes: vec![FilterKind::None],
        ..base.clone()
    };
    assert!(compare_modes(&one_mode, None).is_err());
    let two_seeds = ExperimentConfig {
        seeds: vec![1, 2],
        ..base
    };
    assert!(compare_modes(&two_seeds, None).is_err());
}
