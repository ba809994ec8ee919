use std::error::Error as StdError;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::json;
use tppo_core::config::{load_config, Algorithm, RunConfig};
use tppo_core::envs::{eval_refs, TaskKind, TaskManifest};
use tppo_core::metrics::{export_metrics_file, write_metrics_csv, write_metrics_line, RunManifest};
use tppo_core::nn::Checkpoint;
use tppo_core::scheduler::{read_trace, write_trace};
use tppo_core::sim::{compare_with_training, write_comparison_csv, LengthDistribution};
use tppo_core::trainer::{
    evaluate, NetDecoder, RunOptions, RunOutcome, StepMetrics, TrainObserver, Trainer,
};
use tppo_core::Error;

use crate::{CompareArgs, EvalArgs, ExportArgs, RunArgs, SimulateArgs, TrainArgs};

type CliResult<T = ()> = Result<T, Box<dyn StdError>>;

fn usage(field: &str, reason: impl Into<String>) -> Box<dyn StdError> {
    Box::new(Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    })
}

fn resolve_config(run: &RunArgs, algo: Option<&str>) -> CliResult<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => load_config(path)?,
        None => RunConfig::desk(),
    };
    if let Some(a) = algo {
        cfg.algorithm = a.parse()?;
    }
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = run.steps {
        cfg.total_steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(run: &RunArgs, default: String) -> PathBuf {
    run.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(default))
}

/// Streams metrics to `metrics.jsonl` and writes periodic checkpoints.
struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    checkpoint_every: u64,
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, m: &StepMetrics, trainer: &Trainer) -> tppo_core::Result<()> {
        write_metrics_line(&mut self.metrics, m)?;
        self.metrics.flush()?;
        let done = m.step + 1;
        if self.checkpoint_every > 0 && done % self.checkpoint_every == 0 {
            checkpoint_of(trainer, done).save(&self.dir.join(format!("checkpoint_{done:06}.ckpt")))?;
        }
        Ok(())
    }
}

fn checkpoint_of(trainer: &Trainer, step: u64) -> Checkpoint {
    Checkpoint {
        featurizer: trainer.featurizer,
        policy: trainer.policy.clone(),
        value: trainer.value.clone(),
        step,
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> CliResult {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Runs one training job, writing every artifact into `dir`.
fn run_training(cfg: &RunConfig, dir: &Path) -> CliResult<RunOutcome> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json_pretty()? + "\n")?;
    let mut manifest = RunManifest::begin(cfg.hash()?, cfg.seed);
    let mut writer = RunWriter {
        dir: dir.to_path_buf(),
        metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?),
        checkpoint_every: cfg.checkpoint_every,
    };
    let trainer = Trainer::new(
        cfg.clone(),
        RunOptions {
            keep_history: false,
            dump_dir: Some(dir.to_path_buf()),
        },
    )?;
    let outcome = trainer.run(&mut writer)?;
    writer.metrics.flush()?;
    Checkpoint {
        featurizer: tppo_core::nn::Featurizer::new(cfg.history, cfg.max_len),
        policy: outcome.policy.clone(),
        value: outcome.value.clone(),
        step: outcome.metrics.len() as u64,
    }
    .save(&dir.join("final.ckpt"))?;
    write_metrics_csv(
        BufWriter::new(File::create(dir.join("metrics.csv"))?),
        &outcome.metrics,
    )?;
    write_jsonl(&dir.join("events.jsonl"), &outcome.events)?;
    write_trace(
        BufWriter::new(File::create(dir.join("trace.jsonl"))?),
        &outcome.trace,
    )?;
    manifest.finish(dir)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(outcome)
}

fn summary(cfg: &RunConfig, outcome: &RunOutcome, dir: &Path) -> serde_json::Value {
    let last = outcome.metrics.last();
    let last_eval = outcome.metrics.iter().rev().find_map(|m| m.eval_success);
    json!({
        "algorithm": cfg.algorithm.to_string(),
        "seed": cfg.seed,
        "steps": outcome.metrics.len(),
        "reached_target_at": outcome.reached_target,
        "last_eval_success": last_eval,
        "cumulative_walltime": last.map_or(0, |m| m.cumulative_walltime),
        "out": dir.display().to_string(),
    })
}

pub fn train(args: TrainArgs) -> CliResult {
    let cfg = resolve_config(&args.run, args.algo.as_deref())?;
    let dir = output_dir(&args.run, format!("{}-seed{}", cfg.algorithm, cfg.seed));
    let outcome = run_training(&cfg, &dir)?;
    println!("{}", summary(&cfg, &outcome, &dir));
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let tasks: Vec<_> = if args.tasks.ends_with(".json") || Path::new(&args.tasks).is_file() {
        TaskManifest::load(Path::new(&args.tasks))?
            .eval
            .iter()
            .map(|r| r.instance())
            .collect()
    } else {
        let kind: TaskKind = args.tasks.parse()?;
        eval_refs(kind, args.seed, args.num_tasks)
            .iter()
            .map(|r| r.instance())
            .collect()
    };
    if !(args.temperature > 0.0) {
        return Err(usage("temperature", "must be positive"));
    }
    if !(args.top_p > 0.0 && args.top_p <= 1.0) {
        return Err(usage("top_p", "must be in (0, 1]"));
    }
    let decoder = NetDecoder {
        policy: &ckpt.policy,
        featurizer: ckpt.featurizer,
        temperature: args.temperature,
        top_p: args.top_p,
    };
    let success = evaluate(
        &decoder,
        &tasks,
        args.samples,
        ckpt.featurizer.max_len,
        args.seed,
    )?;
    println!(
        "{}",
        json!({
            "success": success,
            "tasks": tasks.len(),
            "samples_per_task": args.samples,
            "metric": format!("avg@{}", args.samples),
        })
    );
    Ok(())
}

/// First step whose evaluation reached `threshold`, with the cumulative
/// walltime at that point.
fn first_reach(metrics: &[StepMetrics], threshold: f64) -> Option<(u64, u64)> {
    metrics
        .iter()
        .find(|m| m.eval_success.is_some_and(|s| s >= threshold))
        .map(|m| (m.step, m.cumulative_walltime))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn compare(args: CompareArgs) -> CliResult {
    let base = resolve_config(&args.run, None)?;
    let dir = output_dir(&args.run, format!("compare-seed{}", base.seed));
    let mut runs = Vec::new();
    for algo in [Algorithm::Tppo, Algorithm::VanillaPpo] {
        let cfg = RunConfig {
            algorithm: algo,
            ..base.clone()
        };
        let outcome = run_training(&cfg, &dir.join(algo.to_string()))?;
        runs.push(outcome.metrics);
    }
    let (t, v) = (&runs[0], &runs[1]);
    let mut csv = BufWriter::new(File::create(dir.join("compare.csv"))?);
    writeln!(
        csv,
        "step,tppo_walltime,ppo_walltime,tppo_cumulative_walltime,ppo_cumulative_walltime,\
         tppo_mean_reward,ppo_mean_reward,tppo_eval_success,ppo_eval_success"
    )?;
    for i in 0..t.len().max(v.len()) {
        let (a, b) = (t.get(i), v.get(i));
        writeln!(
            csv,
            "{i},{},{},{},{},{},{},{},{}",
            opt(a.map(|m| m.walltime)),
            opt(b.map(|m| m.walltime)),
            opt(a.map(|m| m.cumulative_walltime)),
            opt(b.map(|m| m.cumulative_walltime)),
            opt(a.map(|m| m.mean_reward)),
            opt(b.map(|m| m.mean_reward)),
            opt(a.and_then(|m| m.eval_success)),
            opt(b.and_then(|m| m.eval_success)),
        )?;
    }
    csv.flush()?;
    let threshold = base.target_success.unwrap_or(0.9);
    let (rt, rv) = (first_reach(t, threshold), first_reach(v, threshold));
    let ratio = match (rt, rv) {
        (Some((_, wt)), Some((_, wv))) if wv > 0 => Some(wt as f64 / wv as f64),
        _ => None,
    };
    println!(
        "{}",
        json!({
            "threshold": threshold,
            "tppo_reached": rt.map(|r| json!({"step": r.0, "cumulative_walltime": r.1})),
            "ppo_reached": rv.map(|r| json!({"step": r.0, "cumulative_walltime": r.1})),
            "walltime_ratio": ratio,
            "out": dir.display().to_string(),
        })
    );
    Ok(())
}

fn parse_dist(spec: &str, max_len: usize) -> CliResult<LengthDistribution> {
    let mut parts = spec.splitn(3, ':');
    let kind = parts.next().unwrap_or_default();
    let number = |s: Option<&str>, default: f64, name: &str| -> CliResult<f64> {
        match s {
            None => Ok(default),
            Some(x) => x
                .parse()
                .map_err(|_| usage(name, format!("`{x}` is not a number"))),
        }
    };
    match kind {
        "fixed" => Ok(LengthDistribution::Fixed { length: max_len }),
        "uniform" => Ok(LengthDistribution::Uniform { min: 1, max: max_len }),
        "lognormal" => {
            let sigma = number(parts.next(), 0.6, "sigma")?;
            let median = number(parts.next(), max_len as f64 / 4.0, "median")?;
            Ok(LengthDistribution::lognormal_with_median(median, sigma, max_len))
        }
        "trace" => {
            let path = spec.strip_prefix("trace:").unwrap_or_default();
            let records = read_trace(BufReader::new(File::open(path)?))?;
            Ok(LengthDistribution::from_trace(&records)?)
        }
        other => Err(usage(
            "dist",
            format!("unknown distribution `{other}` (fixed, uniform, lognormal, trace:PATH)"),
        )),
    }
}

pub fn simulate(args: SimulateArgs) -> CliResult {
    if args.l == 0 || args.l > args.max_len {
        return Err(usage(
            "l",
            format!("window length {} must lie in [1, L = {}]", args.l, args.max_len),
        ));
    }
    let dist = parse_dist(&args.dist, args.max_len)?;
    let cmp = compare_with_training(args.k, args.l, &dist, args.steps, args.seed, args.train_cost)?;
    if let Some(path) = &args.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        write_comparison_csv(&mut out, &cmp)?;
        out.flush()?;
    }
    println!(
        "{}",
        json!({
            "speedup": cmp.speedup,
            "throughput_ratio": cmp.throughput_ratio,
            "end_to_end_speedup": cmp.end_to_end_speedup,
            "vanilla_walltime": cmp.vanilla.total_walltime,
            "windowed_walltime": cmp.windowed.total_walltime,
            "vanilla_tokens": cmp.vanilla.tokens_generated,
            "windowed_tokens": cmp.windowed.tokens_generated,
            "steps": cmp.windowed.steps,
        })
    );
    Ok(())
}

pub fn export(args: ExportArgs) -> CliResult {
    if args.format != "csv" {
        return Err(usage("format", format!("unsupported format `{}`", args.format)));
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.input.with_extension("csv"));
    let rows = export_metrics_file(&args.input, &out)?;
    println!("{}", json!({"rows": rows, "out": out.display().to_string()}));
    Ok(())
}
