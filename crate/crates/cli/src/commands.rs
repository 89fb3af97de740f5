use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use tmsp_core::gradcheck::{check_model, check_ops, tiny_model_config, CheckResult};
use tmsp_core::model::{fuse_and_predict, load_checkpoint, save_checkpoint};
use tmsp_core::training::{self, prepare};
use tmsp_core::world::{generate_episodes, read_episodes, write_episodes, DatasetStats, Split};
use tmsp_core::{Error, OpKind};

use crate::config::RunConfig;
use crate::{CliError, ConfigArgs};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_file(path, text)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    RunConfig::load(args.config.as_deref(), &args.overrides)
}

pub fn gen_data(
    n: usize,
    seed: Option<u64>,
    args: &ConfigArgs,
    out: &Path,
) -> Result<(), CliError> {
    let mut config = load_config(args)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if n == 0 {
        return Err(CliError::Config("--n must be ≥ 1".into()));
    }
    let (episodes, outcomes) = generate_episodes(n, config.seed, &config.gen)?;
    create_dir(out)?;
    write_episodes(&out.join("episodes.jsonl"), &episodes)?;
    let stats = DatasetStats::of(&episodes, &outcomes);
    write_json(&out.join("stats.json"), &stats)?;
    config.snapshot(out)?;
    println!(
        "episodes {}  positive rate {:.4}",
        stats.total, stats.positive_rate
    );
    for (name, s) in &stats.splits {
        println!(
            "  {name:<5} {:>7}  positive rate {:.4}",
            s.count, s.positive_rate
        );
    }
    Ok(())
}

fn loss_curve(losses: &[f64]) -> String {
    let mut out = String::from("step\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i}\t{l:e}\n"));
    }
    out
}

pub fn train(
    data: &Path,
    seed: Option<u64>,
    args: &ConfigArgs,
    out: &Path,
) -> Result<(), CliError> {
    let mut config = load_config(args)?;
    if let Some(seed) = seed {
        config.train.seeds = vec![seed];
    }
    let prepared = prepare(&read_episodes(data)?, &config.features)?;
    create_dir(out)?;
    config.snapshot(out)?;
    let outcome = training::train(&prepared, &config.model, &config.train)?;
    for (ckpt, run) in outcome.checkpoints.iter().zip(&outcome.report.runs) {
        save_checkpoint(ckpt, &out.join(format!("seed_{}.ckpt", run.seed)))?;
        write_file(
            &out.join(format!("loss_seed_{}.tsv", run.seed)),
            loss_curve(&run.step_losses),
        )?;
        println!(
            "seed {}  best epoch {}  val {:.4}  train {:.4}{}",
            run.seed,
            run.best_epoch,
            run.best_val_accuracy,
            run.train.accuracy,
            run.test
                .as_ref()
                .map_or(String::new(), |t| format!("  test {:.4}", t.accuracy)),
        );
    }
    let report = &outcome.report;
    write_json(&out.join("metrics.json"), report)?;
    println!(
        "accuracy {:.2} ± {:.2} %",
        100.0 * report.accuracy_mean,
        100.0 * report.accuracy_std
    );
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let metrics = training::evaluate(&ckpt, &read_episodes(data)?, split)?;
    let c = &metrics.confusion;
    println!(
        "split {}  accuracy {:.4}  loss {:.4}  tp {} tn {} fp {} fn {}  latency {:.3} ms",
        split.name(),
        metrics.accuracy,
        metrics.loss,
        c.tp,
        c.tn,
        c.fp,
        c.fn_,
        metrics.latency_ms
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join(format!("eval_{}.json", split.name())), &metrics)?;
    }
    Ok(())
}

pub fn ablate(data: &Path, args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let config = load_config(args)?;
    let prepared = prepare(&read_episodes(data)?, &config.features)?;
    create_dir(out)?;
    config.snapshot(out)?;
    let report = training::run_ablation(&prepared, &config.model, &config.train)?;
    let table = report.table();
    write_file(&out.join("ablation.txt"), &table)?;
    write_json(&out.join("ablation.json"), &report)?;
    print!("{table}");
    Ok(())
}

pub fn predict(checkpoint: &Path, episode_file: &Path, ids: &[String]) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let episodes = read_episodes(episode_file)?;
    let chosen: Vec<_> = if ids.is_empty() {
        episodes.iter().collect()
    } else {
        let known: HashSet<&str> = episodes.iter().map(|e| e.id.as_str()).collect();
        let missing: Vec<&str> = ids
            .iter()
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect();
        if !missing.is_empty() {
            return Err(
                Error::Lookup(format!("unknown episode ids: {}", missing.join(", "))).into(),
            );
        }
        ids.iter()
            .map(|id| episodes.iter().find(|e| &e.id == id).unwrap())
            .collect()
    };
    let provider = tmsp_core::features::FeatureProvider::new(&ckpt.features)?;
    let fingerprint = ckpt.fingerprint();
    let stdout = io::stdout();
    let mut w = io::BufWriter::new(stdout.lock());
    for ep in chosen {
        let bundle = provider.bundle(ep, &ckpt.traj_stats)?;
        let p = fuse_and_predict(&ckpt.params, &bundle, &fingerprint)?;
        let verdict = if p.decision == 1 { "success" } else { "fail" };
        writeln!(w, "{}\t{:.6}\t{verdict}", p.episode_id, p.probability)
            .map_err(|e| CliError::Io(format!("stdout: {e}")))?;
    }
    w.flush().map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn parse_op(name: &str) -> Result<OpKind, CliError> {
    OpKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::Config(format!("unknown op `{name}`")))
}

fn print_results(title: &str, results: &[CheckResult]) {
    println!("{title}");
    for r in results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "  {:<28} {:>12.3e}  < {:.0e}  {status}",
            r.name, r.max_rel_error, r.tolerance
        );
    }
}

pub fn gradcheck(
    config: Option<&Path>,
    seed: u64,
    corrupt_op: Option<&str>,
) -> Result<(), CliError> {
    let model = match config {
        Some(path) => RunConfig::load(Some(path), &[])?.model,
        None => tiny_model_config(),
    };
    let fault = corrupt_op.map(parse_op).transpose()?;
    let ops = check_ops(seed, 3, fault);
    print_results("operations", &ops);
    let groups = check_model(&model, seed, fault)?;
    print_results("parameter groups", &groups);
    let failed: Vec<&str> = ops
        .iter()
        .chain(&groups)
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}
