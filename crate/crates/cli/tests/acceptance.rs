//! Exit criteria. Each test prints one `PASS`/`FAIL` line on stderr and
//! fails when its criterion does. Tests hold a shared lock so that timed
//! criteria never compete for the CPU.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use tempfile::TempDir;
use tmsp_core::features::{read_feature_file, write_feature_file, FeatureConfig, ProviderSpec};
use tmsp_core::gradcheck::{check_model, check_ops, tiny_model_config, CheckResult};
use tmsp_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use tmsp_core::training::{
    mean_std, prepare, run_ablation, train, train_seed, AblationReport, Schedule, TrainConfig,
};
use tmsp_core::trajectory::{
    encode_trajectory, TrajEncoderParams, Trajectory, TrajectoryEncoderConfig, TrajectoryMode, DOF,
    GRIPPER_ROW,
};
use tmsp_core::world::{
    generate_episodes, revalidate, sample_episode, success_oracle, Episode, GenConfig, SceneState,
    Split,
};
use tmsp_core::Tensor;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line and fails the test on a miss.
fn verdict(n: u8, title: &str, pass: bool, detail: impl Display) {
    let line = format!(
        "criterion {n} [{}] {title}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(pass, "{line}");
}

fn tmsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmsp"))
        .args(args)
        .output()
        .expect("tmsp runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_1_gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let mut results: Vec<CheckResult> = check_ops(0, 3, None);
    for mode in [
        TrajectoryMode::ConvPool,
        TrajectoryMode::LinearBaseline,
        TrajectoryMode::Disabled,
    ] {
        let mut config = tiny_model_config();
        config.trajectory.mode = mode;
        results.extend(check_model(&config, 0, None).unwrap());
    }
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_error))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    verdict(
        1,
        "finite-difference gradients",
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks, worst rel err {worst:.2e}, {:.1}s, failures {failed:?}",
            results.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_shape_contract() {
    let _guard = serial();
    let mut failures = Vec::new();
    for mode in [TrajectoryMode::ConvPool, TrajectoryMode::LinearBaseline] {
        let config = TrajectoryEncoderConfig {
            mode,
            ..TrajectoryEncoderConfig::default()
        };
        let params = match mode {
            TrajectoryMode::ConvPool => TrajEncoderParams::<f64>::delta(&config),
            _ => TrajEncoderParams::Linear {
                weight: Tensor::full(&[config.resample_len, config.d_trm], 0.01),
                bias: Tensor::zeros(&[config.d_trm]),
            },
        };
        for t in [1, 2, 15, 16, 17, 1000] {
            let data = (0..DOF * t)
                .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
                .collect();
            let traj = Trajectory::new(Tensor::new(&[DOF, t], data).unwrap()).unwrap();
            match encode_trajectory(&traj, &params, &config) {
                Ok(out) if out.shape() == [DOF, config.d_trm] && out.all_finite() => {}
                Ok(out) => failures.push(format!("{mode:?} T={t}: {:?}", out.shape())),
                Err(e) => failures.push(format!("{mode:?} T={t}: {e}")),
            }
        }
    }
    let config = TrajectoryEncoderConfig {
        activation: false,
        ..TrajectoryEncoderConfig::default()
    };
    let t = config.d_trm;
    let data = (0..DOF * t)
        .map(|i| ((i * 53 % 97) as f64 / 48.5) - 1.0)
        .collect();
    let traj = Trajectory::new(Tensor::new(&[DOF, t], data).unwrap()).unwrap();
    let out = encode_trajectory(&traj, &TrajEncoderParams::<f64>::delta(&config), &config).unwrap();
    if &out != traj.values() {
        failures.push("delta kernels with T = d_trm are not an identity".into());
    }
    verdict(
        2,
        "encoder shape contract",
        failures.is_empty(),
        format!("failures {failures:?}"),
    );
}

/// Replays an episode as gripper events in world coordinates, written
/// without the oracle's helpers.
fn resimulate(scene: &SceneState, traj: &Trajectory) -> u8 {
    let world = |v: f64| (v + 1.0) * 0.5;
    let steps = traj.steps();
    let target = &scene.objects[scene.target];
    let mut closed = false;
    let mut closes = 0;
    let mut opens = 0;
    let mut holding_target = false;
    let mut target_at = (target.x, target.y);
    for step in &steps {
        let (x, y) = (world(step[0]), world(step[1]));
        let now_closed = step[GRIPPER_ROW] >= 0.5;
        if now_closed && !closed {
            closes += 1;
            if closes == 1 {
                holding_target = (x - target.x).hypot(y - target.y) <= 0.03;
            }
        } else if !now_closed && closed {
            opens += 1;
            if holding_target && opens == 1 {
                target_at = (x, y);
            }
        }
        closed = now_closed;
    }
    let g = &scene.goal;
    let placed =
        target_at.0 >= g.x0 && target_at.0 <= g.x1 && target_at.1 >= g.y0 && target_at.1 <= g.y1;
    u8::from(closes == 1 && opens == 1 && holding_target && placed)
}

#[test]
fn criterion_3_oracle_equivalence() {
    let _guard = serial();
    let gen = GenConfig::default();
    let mut disagreements = Vec::new();
    let mut positives = 0;
    for seed in 0..200u64 {
        let ep = sample_episode(&format!("o{seed}"), 9_000 + seed, &gen).unwrap();
        let oracle = success_oracle(&ep.scene, &ep.trajectory);
        positives += usize::from(oracle == 1);
        if oracle != resimulate(&ep.scene, &ep.trajectory) || oracle != ep.label {
            disagreements.push(ep.id);
        }
    }
    let dir = TempDir::new().unwrap();
    let run = tmsp(&[
        "gen-data",
        "--n",
        "1000",
        "--seed",
        "11",
        "--out",
        s(dir.path()),
    ]);
    let episodes = tmsp_core::world::read_episodes(&dir.path().join("episodes.jsonl")).unwrap();
    let revalidated = run.status.success() && revalidate(&episodes).is_ok();
    verdict(
        3,
        "oracle equivalence and re-validation",
        disagreements.is_empty() && revalidated,
        format!(
            "200 episodes ({positives} positive), disagreements {disagreements:?}, {} records re-validated: {revalidated}",
            episodes.len()
        ),
    );
}

fn overfit_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        layers: 1,
        heads: 4,
        ff_dim: 64,
        head_hidden: 32,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn bench_features() -> FeatureConfig {
    FeatureConfig {
        text: ProviderSpec::MockTextHash { seed: 0, dim: 32 },
        scene: ProviderSpec::SyntheticScene { width: 20 },
    }
}

/// Reassigns splits by position: the first `train`, then `val`, then the rest.
fn exact_splits(mut episodes: Vec<Episode>, train: usize, val: usize) -> Vec<Episode> {
    for (i, ep) in episodes.iter_mut().enumerate() {
        ep.split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    episodes
}

#[test]
fn criterion_4_overfit_smoke() {
    let _guard = serial();
    let start = Instant::now();
    let (episodes, _) = generate_episodes(33, 4, &GenConfig::default()).unwrap();
    let mut data = prepare(&exact_splits(episodes, 32, 1), &bench_features()).unwrap();
    data.val = data.train.clone();
    let config = TrainConfig {
        epochs: 300,
        batch_size: 32,
        learning_rate: 3e-3,
        seeds: vec![0],
        max_steps: Some(300),
        ..TrainConfig::default()
    };
    let run = train_seed(&data, &overfit_model(), &config, 0).unwrap();
    let elapsed = start.elapsed();
    let steps = run.report.step_losses.len();
    let acc = run.report.train.accuracy;
    verdict(
        4,
        "overfit 32 episodes",
        data.train.len() == 32 && steps <= 300 && acc >= 0.95 && elapsed < Duration::from_secs(60),
        format!(
            "train accuracy {:.1}% after {steps} steps, final loss {:.4}, {:.1}s",
            100.0 * acc,
            run.report.step_losses.last().unwrap(),
            elapsed.as_secs_f64()
        ),
    );
}

fn bench_model() -> ModelConfig {
    ModelConfig {
        trajectory: TrajectoryEncoderConfig {
            resample_len: 32,
            ..TrajectoryEncoderConfig::default()
        },
        ..overfit_model()
    }
}

fn bench_training() -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 32,
        learning_rate: 1e-3,
        schedule: Schedule::Cosine,
        warmup_steps: 50,
        seeds: vec![0, 1, 2, 3, 4],
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_5_synthetic_benchmark() {
    let _guard = serial();
    let start = Instant::now();
    let (episodes, _) = generate_episodes(5000, 2024, &GenConfig::default()).unwrap();
    let episodes = exact_splits(episodes, 4000, 500);
    let data = prepare(&episodes, &bench_features()).unwrap();
    let counts = (data.train.len(), data.val.len(), data.test.len());
    let rate = episodes.iter().filter(|e| e.label == 1).count() as f64 / episodes.len() as f64;
    let report: AblationReport = run_ablation(&data, &bench_model(), &bench_training()).unwrap();
    let elapsed = start.elapsed();
    let pct = |v: &str| 100.0 * report.row(v).unwrap().mean;
    let (full, linear, disabled) = (pct("full"), pct("linear"), pct("disabled"));
    let tolerance = 3.0;
    let a = disabled <= 55.0 + tolerance;
    let b = full >= 85.0 - tolerance;
    let c = full >= linear - 2.0;
    let on_time = elapsed < Duration::from_secs(30 * 60);
    let _ = write!(std::io::stderr(), "{}", report.table());
    verdict(
        5,
        "synthetic benchmark",
        counts == (4000, 500, 500) && (rate - 0.5).abs() <= 0.02 && a && b && c && on_time,
        format!(
            "split {counts:?}, positive rate {rate:.3}; (a) disabled {disabled:.1}% ≤ 55±3: {a}; \
             (b) conv_pool {full:.1}% ≥ 85±3: {b}; (c) conv_pool ≥ linear {linear:.1}% − 2: {c}; {:.1} min",
            elapsed.as_secs_f64() / 60.0
        ),
    );
}

const SMALL_RUN: [&str; 14] = [
    "--set",
    "model.d_model=16",
    "--set",
    "model.layers=1",
    "--set",
    "model.ff_dim=32",
    "--set",
    "model.head_hidden=16",
    "--set",
    "features.text.dim=16",
    "--set",
    "features.scene.width=20",
    "--set",
    "train.epochs=2",
];

#[test]
fn criterion_6_determinism() {
    let _guard = serial();
    let dir = TempDir::new().unwrap();
    let mut mismatches = Vec::new();
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "4"].iter().enumerate() {
        let root = dir.path().join(format!("r{k}"));
        let data = root.join("data");
        let run = root.join("run");
        let episodes = data.join("episodes.jsonl");
        let gen = tmsp(&["gen-data", "--n", "120", "--seed", "6", "--out", s(&data)]);
        let mut args = vec![
            "train",
            "--data",
            s(&episodes),
            "--seed",
            "3",
            "--out",
            s(&run),
        ];
        args.extend(SMALL_RUN);
        let tr = Command::new(env!("CARGO_BIN_EXE_tmsp"))
            .env("TMSP_THREADS", threads)
            .args(&args)
            .output()
            .unwrap();
        let ckpt = run.join("seed_3.ckpt");
        let pred = tmsp(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--episode-file",
            s(&episodes),
        ]);
        if !(gen.status.success() && tr.status.success() && pred.status.success()) {
            mismatches.push(format!(
                "run {k} failed: {}",
                String::from_utf8_lossy(&tr.stderr)
            ));
            continue;
        }
        outputs.push([
            fs::read(&episodes).unwrap(),
            fs::read(data.join("stats.json")).unwrap(),
            fs::read(run.join("loss_seed_3.tsv")).unwrap(),
            fs::read(&ckpt).unwrap(),
            pred.stdout,
        ]);
    }
    let names = [
        "episodes.jsonl",
        "stats.json",
        "loss curve",
        "checkpoint",
        "predictions",
    ];
    if let [a, b] = outputs.as_slice() {
        for (i, name) in names.iter().enumerate() {
            if a[i] != b[i] {
                mismatches.push(name.to_string());
            }
        }
    }
    verdict(
        6,
        "byte-identical reruns",
        mismatches.is_empty(),
        format!("compared {names:?} across two runs, mismatches {mismatches:?}"),
    );
}

fn truncations_rejected(bytes: &[u8], parse: impl Fn(&[u8]) -> bool) -> bool {
    let stride = (bytes.len() / 256).max(1);
    (0..bytes.len())
        .step_by(stride)
        .chain([bytes.len() - 1])
        .all(|cut| !parse(&bytes[..cut]))
}

#[test]
fn criterion_7_format_round_trips() {
    let _guard = serial();
    let dir = TempDir::new().unwrap();
    let mut problems = Vec::new();

    let records: Vec<(String, Tensor<f32>)> = (0..5)
        .map(|i| {
            let data = (0..(i + 1) * 7)
                .map(|j| (j as f32 * 0.37 - 1.1).sin() * 1e3f32.powi(i as i32 - 2))
                .collect();
            (format!("ep{i:06}"), Tensor::new(&[i + 1, 7], data).unwrap())
        })
        .collect();
    let feat_path = dir.path().join("scene.feat");
    write_feature_file(&feat_path, &records).unwrap();
    let index = read_feature_file(&feat_path).unwrap();
    let bit_exact = records.iter().all(|(id, t)| {
        index.get(id).is_ok_and(|b| {
            b.shape() == t.shape()
                && b.data()
                    .iter()
                    .zip(t.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    });
    if !bit_exact {
        problems.push("feature values changed".to_string());
    }
    let bytes = fs::read(&feat_path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    if tmsp_core::features::decode_feature_file(&bad_magic).is_ok() {
        problems.push("feature file with corrupt magic accepted".into());
    }
    if !truncations_rejected(&bytes, |b| {
        tmsp_core::features::decode_feature_file(b).is_ok()
    }) {
        problems.push("truncated feature file accepted".into());
    }

    let (episodes, _) = generate_episodes(40, 7, &GenConfig::default()).unwrap();
    let data = prepare(&episodes, &bench_features()).unwrap();
    let config = TrainConfig {
        epochs: 1,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    let ckpt = train(&data, &overfit_model(), &config)
        .unwrap()
        .checkpoints
        .remove(0);
    let ckpt_path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &ckpt_path).unwrap();
    let back = load_checkpoint(&ckpt_path).unwrap();
    let params_equal = ckpt.params.names() == back.params.names()
        && ckpt
            .params
            .tensors()
            .iter()
            .zip(back.params.tensors())
            .all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });
    if !params_equal || back.features != ckpt.features || back.traj_stats != ckpt.traj_stats {
        problems.push("checkpoint contents changed".into());
    }
    let bytes = fs::read(&ckpt_path).unwrap();
    if back.to_bytes().unwrap() != bytes {
        problems.push("re-saved checkpoint differs".into());
    }
    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0x20;
    if Checkpoint::from_bytes(&bad_magic).is_ok() {
        problems.push("checkpoint with corrupt magic accepted".into());
    }
    if !truncations_rejected(&bytes, |b| Checkpoint::from_bytes(b).is_ok()) {
        problems.push("truncated checkpoint accepted".into());
    }
    verdict(
        7,
        "feature file and checkpoint round trips",
        problems.is_empty(),
        format!("problems {problems:?}"),
    );
}

#[test]
fn criterion_8_ablation_report() {
    let _guard = serial();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("ablate");
    let gen = tmsp(&["gen-data", "--n", "100", "--seed", "8", "--out", s(&data)]);
    let episodes = data.join("episodes.jsonl");
    let mut args = vec!["ablate", "--data", s(&episodes), "--out", s(&out)];
    args.extend(SMALL_RUN);
    args.extend(["--set", "train.epochs=1"]);
    let run = tmsp(&args);
    let mut problems = Vec::new();
    if !(gen.status.success() && run.status.success()) {
        problems.push(format!(
            "ablate failed: {}",
            String::from_utf8_lossy(&run.stderr)
        ));
    } else {
        let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
        let report: AblationReport =
            serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        if lines.len() != 4 || !lines[0].contains("accuracy [%]") {
            problems.push(format!("table layout {lines:?}"));
        }
        if report.seeds.len() != 5 {
            problems.push(format!("{} seeds", report.seeds.len()));
        }
        for (row, line) in report.rows.iter().zip(lines.iter().skip(1)) {
            let cells: Vec<&str> = line.split_whitespace().collect();
            let expected = [
                row.variant.clone(),
                format!("{:.1}", 100.0 * row.mean),
                "±".into(),
                format!("{:.2}", 100.0 * row.std),
            ];
            if cells != expected {
                problems.push(format!("row {line:?}"));
            }
            if row.accuracies.len() != 5 || mean_std(&row.accuracies) != (row.mean, row.std) {
                problems.push(format!("{} statistics", row.variant));
            }
        }
        let variants: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        if variants != ["full", "linear", "disabled"] {
            problems.push(format!("variants {variants:?}"));
        }
        let _ = write!(std::io::stderr(), "{table}");
    }
    verdict(
        8,
        "three-variant ablation table over five seeds",
        problems.is_empty(),
        format!("problems {problems:?}"),
    );
}
