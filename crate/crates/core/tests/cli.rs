use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ssm_shed::harness::bench::read_timings;
use ssm_shed::harness::report::{read_curves_csv, read_trace_csv, write_curves_csv, CurvePoint};
use ssm_shed::harness::{cli, BenchReport, RunConfig};
use ssm_shed::shedder::{read_jsonl, ImportanceRecord, PlanStep};

const TINY: &str = r#"
seed = 11
[model]
preset = "hybrid"
n_blocks = 4
d_model = 32
mlp_intermediate = 64
[data]
calibration_count = 6
calibration_len = 64
eval_count = 6
eval_len = 64
[train]
steps = 25
batch_size = 4
seq_len = 32
[prune]
schedule = "MambaBlock&TransformerBlock:1 + MhaModule&MlpModule:1 + MlpChannelGroup:2:16"
[bench]
batches = 3
warmup = 1
prompt_len = 48
new_tokens = 4
block_steps = 1
"#;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["ssm-shed"];
    argv.extend_from_slice(args);
    cli(argv)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{TINY}\n{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn val_ppl(path: PathBuf) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["val_ppl"].as_f64().unwrap()
}

/// Trains the tiny model once per test and returns its checkpoint.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "");
    let out = dir.join("train");
    assert_eq!(run(&["train", "--config", s(&cfg), "--out", s(&out)]), 0);
    out.join("model.ckpt")
}

fn with_checkpoint(dir: &Path, ckpt: &Path) -> PathBuf {
    let text = TINY.replacen("[model]\n", &format!("[model]\ncheckpoint = {:?}\n", s(ckpt)), 1);
    let p = dir.join("ckpt.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn eval_reproduces_training_perplexity_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let cfg = with_checkpoint(dir.path(), &ckpt);
    let out = dir.path().join("eval");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--out", s(&out)]), 0);
    let at_train = val_ppl(dir.path().join("train/eval.json"));
    assert_eq!(val_ppl(out.join("eval.json")).to_bits(), at_train.to_bits());

    let (_, meta) = ssm_shed::model::checkpoint::load(&ckpt).unwrap();
    assert_eq!(meta.unwrap()["val_ppl"].as_f64().unwrap().to_bits(), at_train.to_bits());
    assert!(fs::read_to_string(dir.path().join("train/loss.csv")).unwrap().starts_with("step,loss,lr,grad_norm\n"));
}

#[test]
fn plan_only_mutates_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let before = fs::read(&ckpt).unwrap();
    let cfg = with_checkpoint(dir.path(), &ckpt);
    let out = dir.path().join("dry");
    assert_eq!(run(&["prune", "--config", s(&cfg), "--out", s(&out), "--plan-only"]), 0);

    assert_eq!(fs::read(&ckpt).unwrap(), before);
    let plan: Vec<PlanStep> = read_jsonl(BufReader::new(File::open(out.join("plan.jsonl")).unwrap())).unwrap();
    let trace: Vec<ImportanceRecord> = read_jsonl(BufReader::new(File::open(out.join("trace.jsonl")).unwrap())).unwrap();
    assert_eq!(plan.len(), 4);
    assert!(trace.len() > plan.len());
    for f in ["pruned.ckpt", "recovered.ckpt"] {
        assert!(!out.join(f).exists(), "{f} written by a dry run");
    }
}

#[test]
fn report_rows_equal_trace_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("prune");
    assert_eq!(run(&["prune", "--config", s(&cfg), "--out", s(&out), "--emit-trace"]), 0);
    assert_eq!(run(&["report", "--out", s(&out)]), 0);

    let trace: Vec<ImportanceRecord> = read_jsonl(BufReader::new(File::open(out.join("trace.jsonl")).unwrap())).unwrap();
    let rows = read_trace_csv(File::open(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows, trace);
    assert!(out.join("pruned.ckpt").exists());
}

#[test]
fn resolved_config_is_written_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("e");
    assert_eq!(run(&["eval", "--config", s(&cfg), "--out", s(&out), "--seed", "5", "--threads", "3"]), 0);
    let back = RunConfig::load(out.join("config.toml")).unwrap();
    assert_eq!(back.seed, 5);
    assert_eq!(back.train.seed, 5);
    assert_eq!(back.threads, 3);
    assert_eq!(back.out.as_deref(), Some(out.as_path()));
    assert_eq!(back.model.n_blocks, Some(4));
    assert_eq!(RunConfig::from_toml(&back.to_toml()).unwrap(), back);
}

#[test]
fn usage_and_config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--no-such-flag"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["eval", "--config", s(&dir.path().join("missing.toml"))]), 1);

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "[train]\nstep = 10\n").unwrap();
    assert_eq!(run(&["eval", "--config", s(&typo), "--out", s(&dir.path().join("x"))]), 1);

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let cfg = with_checkpoint(dir.path(), &bad);
    assert_eq!(run(&["eval", "--config", s(&cfg), "--out", s(&dir.path().join("y"))]), 1);
    // report before any trace exists
    assert_eq!(run(&["report", "--out", s(&dir.path().join("y"))]), 1);
}

#[test]
fn bench_outputs_round_trip_and_speedups_are_auditable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("bench");
    assert_eq!(run(&["bench", "--config", s(&cfg), "--out", s(&out)]), 0);

    let rep: BenchReport = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let rows = read_timings(File::open(out.join("bench.csv")).unwrap()).unwrap();
    assert_eq!(rows, rep.timings);
    assert_eq!(rows.len(), 4 * 3);

    let med = |model: &str, phase: &str| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|t| t.model == model && t.phase == phase)
            .map(|t| t.tokens as f64 / t.seconds)
            .collect();
        ssm_shed::harness::bench::median(&v)
    };
    assert_eq!(rep.decode_speedup, med("pruned", "decode") / med("dense", "decode"));
    assert_eq!(rep.prefill_speedup, med("pruned", "prefill") / med("dense", "prefill"));
    assert!(rep.equivalence_max_diff <= 1e-6);
    assert!(rep.prune_ratio > 0.0);
}

#[test]
fn bench_needs_exactly_one_pruned_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("block_steps = 1\n", "");
    fs::write(&cfg, text).unwrap();
    assert_eq!(run(&["bench", "--config", s(&cfg), "--out", s(&dir.path().join("b"))]), 1);
}

#[test]
fn curves_csv_round_trips_with_fixed_columns() {
    let pts = vec![
        CurvePoint { kind: "mamba1_block".into(), steps: 0, ppl: 7.5, ratio: 0.0 },
        CurvePoint { kind: "mamba1_block".into(), steps: 1, ppl: 8.25, ratio: 0.125 },
    ];
    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &pts).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("kind,steps,ppl,ratio\n"));
    assert_eq!(read_curves_csv(&buf[..]).unwrap(), pts);
}

#[test]
fn shipped_configs_parse_and_describe_valid_models() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            cfg.model.descriptor().unwrap();
            cfg.train.validate().unwrap();
            if cfg.prune.schedule.is_some() || !cfg.prune.stages.is_empty() {
                cfg.prune.schedule().unwrap();
            }
            n += 1;
        }
    }
    assert!(n >= 4);
}
