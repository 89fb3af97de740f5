use tmsp_core::features::{FeatureConfig, ProviderSpec};
use tmsp_core::model::{Checkpoint, ModelConfig, ModelParams};
use tmsp_core::training::{
    evaluate, evaluate_samples, mean_std, prepare, run_ablation, train, train_seed, PreparedData,
    Schedule, TrainConfig,
};
use tmsp_core::trajectory::TrajectoryEncoderConfig;
use tmsp_core::world::{generate_episodes, Episode, GenConfig, Split};

fn features() -> FeatureConfig {
    FeatureConfig {
        text: ProviderSpec::MockTextHash { seed: 0, dim: 12 },
        scene: ProviderSpec::SyntheticScene { width: 20 },
    }
}

fn model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff_dim: 32,
        head_hidden: 16,
        dropout: 0.1,
        trajectory: TrajectoryEncoderConfig {
            resample_len: 16,
            ..TrajectoryEncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn episodes(n: usize, seed: u64) -> Vec<Episode> {
    let gen = GenConfig {
        min_steps: 20,
        max_steps: 60,
        ..GenConfig::default()
    };
    generate_episodes(n, seed, &gen).unwrap().0
}

fn data(n: usize, seed: u64) -> (Vec<Episode>, PreparedData) {
    let eps = episodes(n, seed);
    let prepared = prepare(&eps, &features()).unwrap();
    (eps, prepared)
}

fn short(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 3e-3,
        seeds: vec![0],
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let (_, d) = data(60, 1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..short(2)
    };
    let run = train_seed(&d, &model(), &cfg, 7).unwrap();
    let init = ModelParams::<f32>::init(&model(), d.widths, 7).unwrap();
    assert_eq!(run.params.tensors(), init.tensors());
    assert_eq!(run.report.best_epoch, 0);
    let fresh = evaluate_samples(&init, &d.train).unwrap();
    assert_eq!(run.report.train.probabilities, fresh.probabilities);
    assert_eq!(run.report.train.confusion, fresh.confusion);
    assert_eq!(run.report.step_losses.len(), 2 * d.train.len().div_ceil(8));
}

#[test]
fn same_seed_same_run() {
    let (_, d) = data(60, 2);
    let a = train_seed(&d, &model(), &short(3), 4).unwrap();
    let b = train_seed(&d, &model(), &short(3), 4).unwrap();
    assert_eq!(a.report.step_losses, b.report.step_losses);
    assert_eq!(a.params.tensors(), b.params.tensors());
    let c = train_seed(&d, &model(), &short(3), 5).unwrap();
    assert_ne!(a.report.step_losses, c.report.step_losses);
}

#[test]
fn constant_half_predictor_scores_the_positive_rate() {
    let (_, d) = data(80, 3);
    let mut p = ModelParams::<f32>::init(&model(), d.widths, 0).unwrap();
    for name in ["head.2.weight", "head.2.bias"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    for split in [&d.train, &d.val] {
        let m = evaluate_samples(&p, split).unwrap();
        let positives = split.iter().filter(|s| s.label == 1).count();
        assert_eq!(m.accuracy, positives as f64 / split.len() as f64);
        assert_eq!(m.confusion.tp, positives);
        assert_eq!(m.confusion.fp, split.len() - positives);
        assert!((m.loss - std::f64::consts::LN_2).abs() < 1e-6);
    }
}

#[test]
fn confusion_matches_a_recount() {
    let (_, d) = data(80, 4);
    let run = train_seed(&d, &model(), &short(2), 1).unwrap();
    let m = evaluate_samples(&run.params, &d.train).unwrap();
    assert_eq!(m.confusion.total(), d.train.len());
    let correct = m
        .probabilities
        .iter()
        .zip(&d.train)
        .filter(|(&p, s)| u8::from(p >= 0.5) == s.label)
        .count();
    assert_eq!(m.accuracy, correct as f64 / d.train.len() as f64);
    assert_eq!(m.accuracy, run.report.train.accuracy);
}

#[test]
fn overfitting_loss_trends_down() {
    let (_, mut d) = data(40, 5);
    d.val = d.train.clone();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 32,
        learning_rate: 3e-3,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let model = ModelConfig {
        dropout: 0.0,
        ..model()
    };
    let run = train_seed(&d, &model, &cfg, 0).unwrap();
    let windows: Vec<f64> = run
        .report
        .epochs
        .chunks(10)
        .map(|w| w.iter().map(|e| e.train_loss).sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "{windows:?}");
    }
    assert!(
        run.report.train.accuracy >= 0.95,
        "{}",
        run.report.train.accuracy
    );
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let (eps, d) = data(60, 6);
    let out = train(&d, &model(), &short(2)).unwrap();
    let ckpt = &out.checkpoints[0];
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    for split in [Split::Train, Split::Val] {
        let a = evaluate(ckpt, &eps, split).unwrap();
        let b = evaluate(&back, &eps, split).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
        assert_eq!(a.confusion, b.confusion);
    }
    let val = evaluate(ckpt, &eps, Split::Val).unwrap();
    assert_eq!(val.accuracy, out.report.runs[0].best_val_accuracy);
}

#[test]
fn mean_std_matches_hand_values() {
    assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    // Σ(x − 5)² = 32, n − 1 = 7
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
}

#[test]
fn learning_rate_schedules() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 4,
        schedule: Schedule::Cosine,
        ..TrainConfig::default()
    };
    let total = 104;
    assert!((cfg.learning_rate_at(0, total) - 2.5e-4).abs() < 1e-18);
    assert!((cfg.learning_rate_at(3, total) - 1e-3).abs() < 1e-18);
    assert!((cfg.learning_rate_at(4, total) - 1e-3).abs() < 1e-18);
    assert!((cfg.learning_rate_at(54, total) - 5e-4).abs() < 1e-15);
    assert!(cfg.learning_rate_at(103, total) < 1e-6);
    let constant = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    assert!((0..50).all(|s| constant.learning_rate_at(s, 50) == 1e-3));
}

#[test]
fn ablation_rows_and_table() {
    let (_, d) = data(50, 7);
    let cfg = TrainConfig {
        seeds: vec![0, 1],
        ..short(1)
    };
    let report = run_ablation(&d, &model(), &cfg).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "linear", "disabled"]);
    for r in &report.rows {
        assert_eq!(r.accuracies.len(), 2);
        assert_eq!((r.mean, r.std), mean_std(&r.accuracies));
    }
    let table = report.table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("accuracy [%]"));
    assert!(lines[1..].iter().all(|l| l.contains(" ± ")));
}

#[test]
fn empty_validation_split_is_rejected() {
    let eps: Vec<Episode> = episodes(30, 8)
        .into_iter()
        .filter(|e| e.split != Split::Val)
        .collect();
    assert!(prepare(&eps, &features()).is_err());
}
