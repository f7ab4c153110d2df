//! Command-line pipeline: train, prune, eval, bench, report and the
//! sensitivity study. Every command writes its resolved config next to its
//! outputs.

pub mod bench;
pub mod config;
pub mod report;
pub mod study;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{checkpoint, Model, StructureKind};
use crate::shedder::{self, read_jsonl, replay, run_schedule, PlanStep, Schedule, Scorer};
use crate::training::{self, perplexity, recovery_tune, Split, TrainConfig};

pub use bench::{bench, BenchReport};
pub use config::{BenchConfig, RunConfig};
pub use study::{study_sensitivity, StudyReport};

#[derive(Debug, Parser)]
#[command(name = "ssm-shed", version, about = "Train, prune and benchmark toy selective state-space LMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides both `seed` and `train.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Write every candidate score to trace.jsonl.
    #[arg(long, global = true)]
    pub emit_trace: bool,
    /// Search only: write plan and trace, leave the model alone.
    #[arg(long, global = true)]
    pub plan_only: bool,
    /// Candidate-scoring threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train a model on the corpus.
    Train,
    /// Run a pruning schedule.
    Prune,
    /// Validation perplexity of a checkpoint.
    Eval,
    /// Prefill/decode throughput, dense vs pruned.
    Bench,
    /// CSV view of a finished prune run's trace.
    Report,
    /// Mamba-1 vs Mamba-2 pruning-sensitivity curves.
    StudySensitivity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Prune => "prune",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Report => "report",
            Command::StudySensitivity => "study-sensitivity",
        }
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(parsed.command, &parsed.opts) {
        Ok(out) => {
            println!("outputs in {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Config file plus CLI overrides.
pub fn resolve(command: Command, opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = opts.threads {
        cfg.threads = t;
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("runs").join(command.name()));
    }
    Ok(cfg)
}

/// Runs one command and returns its output directory.
pub fn run(command: Command, opts: &Opts) -> Result<PathBuf> {
    let cfg = resolve(command, opts)?;
    let out = cfg.out.clone().expect("resolved");
    fs::create_dir_all(&out)?;
    if command != Command::Report {
        fs::write(out.join("config.toml"), cfg.to_toml())?;
    }
    match command {
        Command::Train => cmd_train(&cfg, &out),
        Command::Prune => cmd_prune(&cfg, opts, &out),
        Command::Eval => cmd_eval(&cfg, &out),
        Command::Bench => cmd_bench(&cfg, &out),
        Command::Report => cmd_report(&out),
        Command::StudySensitivity => cmd_study(&cfg, &out),
    }?;
    Ok(out)
}

pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    match &cfg.model.checkpoint {
        Some(p) => Ok(checkpoint::load(p)?.0),
        None => {
            log::warn!("no model.checkpoint given; using a freshly initialized model");
            Model::build(&cfg.model.descriptor()?, cfg.seed)
        }
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = cfg.data.corpus()?;
    let eval = cfg.data.eval_set(&corpus)?;
    let mut model = load_model(cfg)?;
    let every = (cfg.train.steps / 20).max(1);
    let report = training::train_with(&mut model, corpus.split(Split::Train), &cfg.train, |s| {
        if s.step % every == 0 || s.step + 1 == cfg.train.steps {
            println!("step {:>6}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr);
        }
    })?;
    fs::write(out.join("loss.csv"), report.to_csv())?;
    let val_ppl = perplexity(&model, &eval)?;
    let meta = json!({
        "command": "train",
        "seed": cfg.seed,
        "train": cfg.train,
        "val_ppl": val_ppl,
    });
    checkpoint::save(&model, out.join("model.ckpt"), Some(&meta))?;
    write_json(
        &out.join("eval.json"),
        &json!({ "val_ppl": val_ppl, "params": model.alive_param_count(), "prune_ratio": model.prune_ratio() }),
    )?;
    println!("validation perplexity {val_ppl:.4}");
    Ok(())
}

fn cmd_prune(cfg: &RunConfig, opts: &Opts, out: &Path) -> Result<()> {
    let corpus = cfg.data.corpus()?;
    let cal = cfg.data.calibration(&corpus)?;
    let eval = cfg.data.eval_set(&corpus)?;
    let schedule = cfg.prune.schedule()?;
    let scorer = Scorer::with_threads(cfg.threads)?;
    let model = load_model(cfg)?;
    schedule.validate(&model)?;
    let dense_cal = shedder::calibration_perplexity(&model, &cal)?;
    let dense_val = perplexity(&model, &eval)?;
    println!("schedule {schedule}; dense calibration ppl {dense_cal:.4}");

    let mut work = if opts.plan_only { model.clone() } else { model };
    let plan = run_schedule(&mut work, &schedule, &cal, &scorer)?;
    for s in &plan.steps {
        println!("stage {} step {:>3}  {:<24} ppl {:.4}  ratio {:.4}", s.stage, s.step, s.action.to_string(), s.score, s.prune_ratio);
    }
    plan.write_plan(BufWriter::new(File::create(out.join("plan.jsonl"))?))?;
    if opts.emit_trace || opts.plan_only {
        plan.write_trace(BufWriter::new(File::create(out.join("trace.jsonl"))?))?;
    }
    let mut summary = json!({
        "schedule": schedule.to_string(),
        "plan_only": opts.plan_only,
        "steps": plan.steps.len(),
        "truncated": plan.truncated,
        "dense_calibration_ppl": dense_cal,
        "final_calibration_ppl": plan.final_score(),
        "dense_val_ppl": dense_val,
        "prune_ratio": work.prune_ratio(),
    });
    if !opts.plan_only {
        let pruned_val = perplexity(&work, &eval)?;
        summary["pruned_val_ppl"] = json!(pruned_val);
        println!("validation ppl {dense_val:.4} -> {pruned_val:.4}, prune ratio {:.4}", work.prune_ratio());
        let meta = json!({ "command": "prune", "schedule": schedule.to_string(), "seed": cfg.seed });
        checkpoint::save(&work, out.join("pruned.ckpt"), Some(&meta))?;
        if cfg.prune.recover_steps > 0 {
            let tcfg = TrainConfig {
                steps: cfg.prune.recover_steps,
                ..cfg.train.clone()
            };
            let (rep, curve) = recovery_tune(&mut work, &corpus, &tcfg, &eval)?;
            println!("recovery tuning: ppl {:.4} -> {:.4}", rep.ppl_before, rep.ppl_after);
            fs::write(out.join("recovery_loss.csv"), curve.to_csv())?;
            summary["recovery"] = serde_json::to_value(&rep)?;
            checkpoint::save(&work, out.join("recovered.ckpt"), Some(&meta))?;
        }
    }
    write_json(&out.join("summary.json"), &summary)
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = cfg.data.corpus()?;
    let eval = cfg.data.eval_set(&corpus)?;
    let model = load_model(cfg)?;
    let ppl = perplexity(&model, &eval)?;
    println!("validation perplexity {ppl:.4} over {} windows", eval.len());
    write_json(
        &out.join("eval.json"),
        &json!({ "val_ppl": ppl, "params": model.alive_param_count(), "prune_ratio": model.prune_ratio() }),
    )
}

/// The pruned side of a benchmark, per the `[bench]` section.
pub fn bench_pruned(cfg: &RunConfig, dense: &Model) -> Result<Model> {
    let b = &cfg.bench;
    match (&b.plan, &b.pruned, b.block_steps) {
        (Some(plan), None, None) => {
            let steps: Vec<PlanStep> = read_jsonl(BufReader::new(File::open(plan)?))?;
            let mut m = dense.clone();
            replay(&mut m, &steps.iter().map(|s| s.action).collect::<Vec<_>>())?;
            Ok(m)
        }
        (None, Some(p), None) => Ok(checkpoint::load(p)?.0),
        (None, None, Some(k)) => {
            let corpus = cfg.data.corpus()?;
            let cal = cfg.data.calibration(&corpus)?;
            let kinds: Vec<StructureKind> = [StructureKind::MambaBlock, StructureKind::TransformerBlock]
                .into_iter()
                .filter(|k| dense.descriptor().block_kinds.iter().any(|&b| k.applies_to(b)))
                .collect();
            let mut m = dense.clone();
            run_schedule(
                &mut m,
                &Schedule::single(&kinds, k, None),
                &cal,
                &Scorer::with_threads(cfg.threads)?,
            )?;
            Ok(m)
        }
        _ => Err(Error::Config(
            "bench needs exactly one of bench.plan, bench.pruned or bench.block_steps".into(),
        )),
    }
}

fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = cfg.data.corpus()?;
    let eval = cfg.data.eval_set(&corpus)?;
    let dense = load_model(cfg)?;
    let pruned = bench_pruned(cfg, &dense)?;
    let rep = bench(&dense, &pruned, &cfg.bench, corpus.split(Split::Validation), Some(&eval))?;
    rep.write_csv(BufWriter::new(File::create(out.join("bench.csv"))?))?;
    write_json(&out.join("bench.json"), &serde_json::to_value(&rep)?)?;
    println!(
        "prefill {:.0} -> {:.0} tok/s ({:.2}x), decode {:.0} -> {:.0} tok/s ({:.2}x), ratio {:.4}{}",
        rep.dense_prefill.median_tokens_per_s,
        rep.pruned_prefill.median_tokens_per_s,
        rep.prefill_speedup,
        rep.dense_decode.median_tokens_per_s,
        rep.pruned_decode.median_tokens_per_s,
        rep.decode_speedup,
        rep.prune_ratio,
        if rep.unstable { " [unstable]" } else { "" }
    );
    Ok(())
}

fn cmd_report(out: &Path) -> Result<()> {
    let path = out.join("trace.jsonl");
    let f = File::open(&path)
        .map_err(|e| Error::Config(format!("no trace at {} ({e}); run prune with --emit-trace", path.display())))?;
    let trace: Vec<shedder::ImportanceRecord> = read_jsonl(BufReader::new(f))?;
    report::write_trace_csv(BufWriter::new(File::create(out.join("report.csv"))?), &trace)?;
    println!("{} trace records", trace.len());
    Ok(())
}

fn cmd_study(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = cfg.data.corpus()?;
    let cal = cfg.data.calibration(&corpus)?;
    let eval = cfg.data.eval_set(&corpus)?;
    let scorer = Scorer::with_threads(cfg.threads)?;
    let (rep, models) = study_sensitivity(&corpus, &cfg.study, &cfg.train, cfg.seed, &cal, &eval, &scorer)?;
    report::write_curves_csv(BufWriter::new(File::create(out.join("curves.csv"))?), &rep.points())?;
    write_json(&out.join("study.json"), &serde_json::to_value(&rep)?)?;
    for (m, name) in models.iter().zip(["mamba1.ckpt", "mamba2.ckpt"]) {
        checkpoint::save(m, out.join(name), None)?;
    }
    for c in &rep.curves {
        let last = c.points.last().expect("point");
        println!("{:<14} ppl {:.3} -> {:.3} after {} steps", c.label, c.points[0].ppl, last.ppl, last.steps);
    }
    println!(
        "Mamba-1 more tolerant to block removal: {}; Mamba-2 more tolerant to SSM removal: {}",
        rep.mamba1_tolerates_blocks_better, rep.mamba2_tolerates_ssm_better
    );
    Ok(())
}
