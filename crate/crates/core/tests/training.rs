//! Training loop, evaluation, datasets and the pruning sweep on a tiny model.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spvt::data::{parse_cifar_records, Dataset, DatasetSpec};
use spvt::prune::PruneOptions;
use spvt::train::{evaluate, sweep, train, TrainConfig};
use spvt::vit::init_params;
use spvt::{Error, SparseConfig, SparsePosition, ViTConfig};

fn tiny() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        hidden_size: 16,
        mlp_size: 32,
        num_heads: 2,
        depth: 1,
        num_classes: 4,
        ..ViTConfig::toy()
    }
}

fn data(train: usize, test: usize, seed: u64) -> (Dataset, Dataset) {
    let mut spec = DatasetSpec::synthetic(4, train, test, 0.05, seed);
    spec.image_size = 16;
    spec.load().unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 16, epochs, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let cfg = tiny();
    let (tr, te) = data(40, 8, 1);
    let init = init_params(&cfg, 1).unwrap();
    let mut params = init.clone();
    let tc = TrainConfig { learning_rate: 0.0, ..quick(3) };
    let records = train(&mut params, &cfg, &tr, &te, &tc).unwrap();
    assert_eq!(records.len(), 3);
    assert!(params.bitwise_eq(&init));
}

#[test]
fn zero_lambda_run_equals_disabled_run() {
    let cfg = tiny();
    let (tr, te) = data(48, 16, 2);
    let init = init_params(&cfg, 2).unwrap();
    let mut off = init.clone();
    let a = train(&mut off, &cfg, &tr, &te, &quick(4)).unwrap();
    for position in SparsePosition::ALL {
        let mut on = init.clone();
        let tc = TrainConfig { sparse: SparseConfig::new(position, 0.0).unwrap(), ..quick(4) };
        let b = train(&mut on, &cfg, &tr, &te, &tc).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_metrics(y)), "{position}");
        assert!(on.bitwise_eq(&off));
    }
}

#[test]
fn training_is_deterministic_and_logs_consistent_losses() {
    let cfg = tiny();
    let (tr, te) = data(40, 12, 3);
    let tc = TrainConfig {
        sparse: SparseConfig::with_default_lambda(SparsePosition::AttentionWeight, &cfg).unwrap(),
        ..quick(3)
    };
    let run = || {
        let mut p = init_params(&cfg, 3).unwrap();
        let r = train(&mut p, &cfg, &tr, &te, &tc).unwrap();
        (p, r)
    };
    let (p1, r1) = run();
    let (p2, r2) = run();
    assert!(p1.bitwise_eq(&p2));
    for (a, b) in r1.iter().zip(&r2) {
        assert!(a.same_metrics(b));
        assert!((a.total_loss - (a.ce_loss + a.penalty)).abs() < 1e-9);
        assert!(a.penalty > 0.0);
    }
}

#[test]
fn smoothed_training_loss_does_not_increase() {
    let cfg = tiny();
    let (tr, te) = data(64, 16, 0);
    let mut p = init_params(&cfg, 0).unwrap();
    // Momentum gets the tiny model off its initial plateau within the budget.
    let tc = TrainConfig { momentum: 0.9, ..quick(60) };
    let records = train(&mut p, &cfg, &tr, &te, &tc).unwrap();
    let means: Vec<f64> = records
        .chunks(10)
        .map(|c| c.iter().map(|r| r.ce_loss).sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "10-epoch mean loss rose: {means:?}");
    }
    assert!(means.last().unwrap() < &0.1);
    assert_eq!(records.last().unwrap().train_acc, 1.0);
}

#[test]
fn evaluate_edge_cases() {
    let cfg = tiny();
    let p = init_params(&cfg, 4).unwrap();
    let (tr, _) = data(5, 1, 4);
    let one = tr.clone().truncated(1);
    let acc = evaluate(&p, &cfg, &one).unwrap();
    assert!(acc == 0.0 || acc == 1.0);
    let empty = tr.truncated(0);
    assert!(matches!(evaluate(&p, &cfg, &empty), Err(Error::Contract(_))));
}

#[test]
fn untrained_model_is_at_chance_on_random_labels() {
    let cfg = tiny();
    let p = init_params(&cfg, 5).unwrap();
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let side = cfg.image_size;
    let pixels = (0..n * side * side * 3).map(|_| rng.gen::<f64>()).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    let set = Dataset::new(side, 3, pixels, labels).unwrap();
    let acc = evaluate(&p, &cfg, &set).unwrap();
    let c = cfg.num_classes as f64;
    let sigma = ((1.0 / c) * (1.0 - 1.0 / c) / n as f64).sqrt();
    assert!((acc - 1.0 / c).abs() < 3.0 * sigma, "accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn evaluate_ignores_sample_order(seed in any::<u64>()) {
        let cfg = tiny();
        let p = init_params(&cfg, seed).unwrap();
        let (tr, _) = data(70, 1, seed);
        let mut order: Vec<usize> = (0..tr.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = tr.permuted(&order).unwrap();
        prop_assert_eq!(evaluate(&p, &cfg, &tr).unwrap(), evaluate(&p, &cfg, &shuffled).unwrap());
    }
}

#[test]
fn synthetic_data_contract() {
    let (a, b) = data(20, 10, 9);
    let (c, d) = data(20, 10, 9);
    assert_eq!(a.pixels(), c.pixels());
    assert_eq!(b.labels(), d.labels());
    assert!(a.labels().iter().all(|&l| l < 4));
    assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));

    let mut spec = DatasetSpec::synthetic(3, 9, 3, 0.0, 1);
    spec.image_size = 8;
    let (clean, _) = spec.load().unwrap();
    for i in 0..9 {
        for j in 0..9 {
            if clean.labels()[i] == clean.labels()[j] {
                assert_eq!(clean.image(i), clean.image(j));
            }
        }
    }
}

#[test]
fn cifar_records_layout() {
    let mut bytes = vec![0u8; 2 * 3073];
    bytes[3073] = 7;
    bytes[3073 + 1] = 255; // red (0, 0)
    bytes[3073 + 1 + 1024 + 33] = 51; // green (1, 1)
    let set = parse_cifar_records(&bytes, 10).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.labels(), &[0, 7]);
    assert!(set.image(0).iter().all(|&v| v == 0.0));
    let img = set.image(1);
    assert_eq!(img[0], 1.0);
    assert_eq!(img[(32 + 1) * 3 + 1], 51.0 / 255.0);
    assert!(parse_cifar_records(&bytes[..3000], 10).is_err());
    assert!(parse_cifar_records(&bytes, 5).is_err());
}

#[test]
fn sweep_arms_and_baselines() {
    let cfg = tiny();
    let (tr, te) = data(48, 24, 6);
    let init = init_params(&cfg, 6).unwrap();
    let ratios = [0.1, 0.2, 0.3];
    let none = PruneOptions::default();
    let base = quick(3);
    let plain = sweep(&init, &cfg, &tr, &te, &base, &ratios, false, &none).unwrap();
    let sparse = sweep(&init, &cfg, &tr, &te, &base, &ratios, true, &none).unwrap();
    assert_eq!(plain.rows.len(), 3);
    assert_eq!(sparse.rows.len(), 3);
    assert!(sparse.records[0].penalty > 0.0);
    assert_eq!(plain.records[0].penalty, 0.0);

    let mut trained = init.clone();
    let records = train(&mut trained, &cfg, &tr, &te, &base).unwrap();
    assert_eq!(plain.baseline_accuracy, evaluate(&trained, &cfg, &te).unwrap());
    assert!(records.iter().zip(&plain.records).all(|(a, b)| a.same_metrics(b)));

    let empty = sweep(&init, &cfg, &tr, &te, &base, &[], true, &none).unwrap();
    assert!(empty.rows.is_empty());
    assert!(!empty.records.is_empty());

    // The sparse arm with λ = 0 is the baseline arm, bit for bit.
    let zero = TrainConfig {
        sparse: SparseConfig::new(SparsePosition::AttentionWeight, 0.0).unwrap(),
        ..base
    };
    let tied = sweep(&init, &cfg, &tr, &te, &zero, &ratios, true, &none).unwrap();
    assert!(tied.records.iter().zip(&plain.records).all(|(a, b)| a.same_metrics(b)));
    assert_eq!(tied.rows, plain.rows);
    assert!(sweep(&init, &cfg, &tr, &te, &base, &[1.2], false, &none).is_err());
}
