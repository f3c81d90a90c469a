use std::fs;
use std::path::Path;

use capsnet::capsule::RoutingConfig;
use capsnet::checkpoint::Checkpoint;
use capsnet::data::{self, DatasetSplit, NoiseKind, NoiseSpec, SplitRole};
use capsnet::network::{ArchitectureSpec, Model};
use capsnet::train::{self, EpochRecord, EvalReport, MarginSchedule, OptimizerConfig, TrainConfig, Trainer};
use capsnet::{Error, Tensor};
use proptest::prelude::*;

fn fixture_subset(n: usize) -> DatasetSplit {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/digits");
    let full = data::load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")).unwrap();
    full.subset(&(0..n).collect::<Vec<_>>(), SplitRole::Train)
}

fn tiny_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        stem_channels: 8,
        primary_caps: 4,
        conv_caps: 4,
        decoder_hidden: vec![32],
        ..ArchitectureSpec::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        margin: MarginSchedule {
            start: 0.5,
            end: 0.5,
            warm_epochs: 0,
        },
        routing: RoutingConfig {
            lambda_init: 1e-3,
            lambda_increment: 1e-3,
            ..RoutingConfig::default()
        },
        seed: 5,
        eval_batch_size: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss_on_small_subset() {
    let split = fixture_subset(64);
    let cfg = TrainConfig { epochs: 6, ..tiny_config() };
    let ckpt = train::train::<f32>(tiny_spec(), cfg, &split, &split).unwrap();
    assert_ne!(ckpt.history[0].weights_crc32, ckpt.history[1].weights_crc32);
    let first = ckpt.history.first().unwrap().loss;
    let last = ckpt.history.last().unwrap().loss;
    assert_eq!(ckpt.history.len(), 6);
    assert!(last < first, "loss went from {first} to {last}");
    assert!(ckpt.history.iter().all(|r| r.val_accuracy.is_some()));
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let split = fixture_subset(32);
    for optimizer in [OptimizerConfig::default(), OptimizerConfig::Sgd { momentum: 0.9 }] {
        let model = Model::<f32>::build(tiny_spec(), 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer,
            ..tiny_config()
        };
        let empty = split.subset(&[], SplitRole::Validation);
        let mut t = Trainer::new(model.clone(), cfg, &split, &empty).unwrap();
        t.run().unwrap();
        let initial = train::weights_checksum(&model);
        assert!(t.state().history.iter().all(|r| r.weights_crc32 == initial));
        for (a, b) in model.params().iter().zip(t.state().model.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(t.state().history[0].val_accuracy, None);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let split = fixture_subset(32);
    let val = fixture_subset(48).subset(&(32..48).collect::<Vec<_>>(), SplitRole::Validation);
    let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());

    let straight = TrainConfig {
        epochs: 2,
        checkpoint_dir: Some(a_dir.path().to_path_buf()),
        ..tiny_config()
    };
    let full = train::train::<f32>(tiny_spec(), straight, &split, &val).unwrap();

    let first_half = TrainConfig {
        epochs: 1,
        checkpoint_dir: Some(b_dir.path().to_path_buf()),
        ..tiny_config()
    };
    train::train::<f32>(tiny_spec(), first_half, &split, &val).unwrap();
    let ckpt = Checkpoint::<f32>::load(b_dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 1);
    let mut t = Trainer::resume(ckpt, Some(2), &split, &val).unwrap();
    t.run().unwrap();
    let resumed = t.into_state();

    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.optimizer, full.optimizer);
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.best_val_accuracy, full.best_val_accuracy);

    let (records, seconds) = train::read_history(&b_dir.path().join("history.jsonl")).unwrap();
    assert_eq!(records, full.history);
    assert_eq!(seconds.len(), 2);
    assert!(seconds.iter().all(Option::is_some));
    assert!(b_dir.path().join("best.ckpt").exists());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let split = fixture_subset(16);
    let cfg = TrainConfig { epochs: 1, ..tiny_config() };
    let ckpt = train::train::<f32>(tiny_spec(), cfg, &split, &split).unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(&bytes[..8], b"CAPSCKPT");
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ckpt);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = Model::<f32>::build(tiny_spec(), 1).unwrap();
    let cfg = tiny_config();
    let ckpt = Checkpoint {
        optimizer: train::OptimizerState::new(&cfg.optimizer, &model),
        model,
        seed: cfg.seed,
        config: cfg,
        epoch: 0,
        best_val_accuracy: None,
        history: Vec::new(),
    };
    let bytes = ckpt.to_bytes().unwrap();
    let is_ckpt_err = |r: capsnet::Result<Checkpoint<f32>>| matches!(r, Err(Error::Checkpoint(_)));

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(is_ckpt_err(Checkpoint::from_bytes(&flipped)));
    assert!(is_ckpt_err(Checkpoint::from_bytes(&bytes[..bytes.len() - 9])));
    assert!(is_ckpt_err(Checkpoint::from_bytes(b"not a checkpoint")));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(is_ckpt_err(Checkpoint::from_bytes(&magic)));
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    fs::write(&path, &flipped).unwrap();
    let err = Checkpoint::<f32>::load(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(err.to_string().contains("bad.ckpt"));
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let split = fixture_subset(16);
    let mut model = Model::<f32>::build(tiny_spec(), 2).unwrap();
    let mut values: Vec<Tensor<f32>> = model.params().iter().map(|p| p.value.clone()).collect();
    values[0] = values[0].map(|_| f32::NAN);
    model.set_values(values).unwrap();
    let mut t = Trainer::new(model, tiny_config(), &split, &split).unwrap();
    match t.run_epoch() {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("epoch 1"), "{msg}");
            assert!(msg.contains("lambda"), "{msg}");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        TrainConfig { lr_decay: 0.0, ..TrainConfig::default() },
        TrainConfig { optimizer: OptimizerConfig::Sgd { momentum: 1.0 }, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Contract(_))), "{cfg:?}");
    }
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
}

#[test]
fn schedules_follow_their_formulas() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), cfg.learning_rate);
    assert!((cfg.lr_at(3) - cfg.learning_rate * cfg.lr_decay.powi(3)).abs() < 1e-15);
    let m = MarginSchedule { start: 0.2, end: 0.9, warm_epochs: 7 };
    assert_eq!(m.at(0), 0.2);
    assert!((m.at(7) - 0.9).abs() < 1e-12);
    assert!((m.at(20) - 0.9).abs() < 1e-12);
    assert!(m.at(3) > 0.2 && m.at(3) < 0.9);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 0.0]).unwrap(), Tensor::new(vec![1], vec![4.0]).unwrap()];
    assert_eq!(train::clip_global_norm(&mut g, 1.0), 5.0);
    let after: f64 = g.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    assert!((after - 1.0).abs() < 1e-12);
    let mut h = g.clone();
    train::clip_global_norm(&mut h, 0.0);
    assert_eq!(h, g);
}

#[test]
fn history_has_metadata_line_then_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    let recs = vec![
        EpochRecord { epoch: 1, loss: 0.5, val_accuracy: Some(0.25), learning_rate: 1e-3, margin: 0.2, weights_crc32: "0123abcd".into() },
        EpochRecord { epoch: 2, loss: 0.25, val_accuracy: None, learning_rate: 9e-4, margin: 0.3, weights_crc32: "ffffffff".into() },
    ];
    train::write_history(&path, &recs, &[Some(1.5), None]).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("{\"meta\""));
    assert_eq!(train::read_history(&path).unwrap(), (recs, vec![Some(1.5), None]));
}

#[test]
fn constant_and_perfect_predictors() {
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let constant = EvalReport::from_predictions(&labels, &vec![0; 100], 10).unwrap();
    assert_eq!(constant.accuracy, 0.1);
    assert_eq!(constant.misclassified.len(), 90);
    for (t, row) in constant.confusion.iter().enumerate() {
        assert_eq!(row[0], 10, "row {t}");
        assert_eq!(row.iter().sum::<usize>(), 10);
    }
    assert_eq!(constant.precision[0], 0.1);
    assert_eq!(constant.recall[0], 1.0);

    let perfect = EvalReport::from_predictions(&labels, &labels, 10).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    let norm = perfect.normalized_confusion();
    for (t, row) in norm.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            assert_eq!(v, if t == p { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(perfect.accuracy_percent(), "100.00%");
    assert!(matches!(EvalReport::from_predictions(&[], &[], 10), Err(Error::Contract(_))));
    assert!(matches!(EvalReport::from_predictions(&[1], &[1, 2], 10), Err(Error::Consistency(_))));
}

#[test]
fn noise_eval_reports_clean_baseline_first() {
    let split = fixture_subset(20);
    let model = Model::<f32>::build(tiny_spec(), 4).unwrap();
    let routing = tiny_config().routing;
    let only_clean = train::noise_eval(&model, &split, &[], 8, &routing).unwrap();
    assert_eq!(only_clean.len(), 1);
    assert_eq!(only_clean[0].label, "clean");

    let specs = [NoiseSpec::new(NoiseKind::Gaussian, 0.0, 1), NoiseSpec::new(NoiseKind::Pepper, 0.05, 1)];
    let res = train::noise_eval(&model, &split, &specs, 8, &routing).unwrap();
    assert_eq!(res.len(), 3);
    assert_eq!(res[1].report, res[0].report);
    assert_eq!(res[2].label, "pepper(0.05)");
    let table = train::noise_table(&res);
    assert_eq!(table.lines().count(), 4);
    let empty = split.subset(&[], SplitRole::Test);
    assert!(matches!(train::evaluate(&model, &empty, 8, &routing), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn confusion_rows_sum_to_class_counts(
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..300),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let rep = EvalReport::from_predictions(&labels, &preds, 10).unwrap();
        for (c, row) in rep.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
        }
        for (row, counts) in rep.normalized_confusion().iter().zip(&rep.confusion) {
            let s: f64 = row.iter().sum();
            if counts.iter().sum::<usize>() > 0 {
                prop_assert!((s - 1.0).abs() < 1e-6);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
        let correct = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert_eq!(rep.n_correct, correct);
        prop_assert!((rep.accuracy - correct as f64 / labels.len() as f64).abs() < 1e-15);
    }
}
