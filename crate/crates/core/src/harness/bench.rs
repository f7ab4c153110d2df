//! Prefill/decode throughput of a dense model against its pruned,
//! physically compacted counterpart.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::BenchConfig;
use crate::error::{Error, Result};
use crate::model::Model;

/// Compacted and overlay logits must agree this closely before timing.
pub const EQUIVALENCE_TOL: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub model: String,
    pub phase: String,
    pub batch: usize,
    pub seconds: f64,
    pub tokens: usize,
}

impl Timing {
    pub fn tokens_per_s(&self) -> f64 {
        self.tokens as f64 / self.seconds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub median_tokens_per_s: f64,
    pub cv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub dense_prefill: PhaseStats,
    pub dense_decode: PhaseStats,
    pub pruned_prefill: PhaseStats,
    pub pruned_decode: PhaseStats,
    pub prefill_speedup: f64,
    pub decode_speedup: f64,
    pub unstable: bool,
    pub prune_ratio: f64,
    pub dense_params: usize,
    pub pruned_params: usize,
    pub ppl_dense: Option<f64>,
    pub ppl_pruned: Option<f64>,
    /// Largest logit gap between the overlay model and its compaction.
    pub equivalence_max_diff: f32,
    pub timings: Vec<Timing>,
}

impl BenchReport {
    /// One row per timed batch; every speedup is recomputable from these.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        write_timings(w, &self.timings)
    }
}

pub fn write_timings(w: impl Write, rows: &[Timing]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_timings(r: impl std::io::Read) -> Result<Vec<Timing>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn stats(rows: &[Timing], model: &str, phase: &str) -> PhaseStats {
    let tps: Vec<f64> = rows
        .iter()
        .filter(|t| t.model == model && t.phase == phase)
        .map(Timing::tokens_per_s)
        .collect();
    let mean = tps.iter().sum::<f64>() / tps.len() as f64;
    let var = tps.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tps.len() as f64;
    PhaseStats {
        median_tokens_per_s: median(&tps),
        cv: var.sqrt() / mean,
    }
}

/// Deterministic prompts cut from `source`.
fn prompts(source: &[usize], cfg: &BenchConfig, batch: usize) -> Result<Vec<Vec<usize>>> {
    if source.len() < cfg.prompt_len + 1 {
        return Err(Error::Config(format!(
            "prompt source of {} tokens is shorter than prompt_len {}",
            source.len(),
            cfg.prompt_len
        )));
    }
    let span = source.len() - cfg.prompt_len;
    Ok((0..cfg.batch_size)
        .map(|i| {
            let start = ((batch * cfg.batch_size + i) * 7919) % span.max(1);
            source[start..start + cfg.prompt_len].to_vec()
        })
        .collect())
}

fn time_prefill(m: &Model, prompts: &[Vec<usize>], len: usize) -> Result<f64> {
    let flat: Vec<usize> = prompts.concat();
    let t = Instant::now();
    let logits = m.forward_with(m.liveness(), &flat, len)?;
    let s = t.elapsed().as_secs_f64();
    std::hint::black_box(logits);
    Ok(s)
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Primes each prompt through the recurrent path (untimed), then times
/// greedy generation of `new_tokens` tokens per sequence.
fn time_decode(m: &Model, prompts: &[Vec<usize>], new_tokens: usize) -> Result<f64> {
    let mut states = Vec::with_capacity(prompts.len());
    for p in prompts {
        states.push(m.prime(p)?);
    }
    let t = Instant::now();
    for (state, logits) in &mut states {
        let mut next = argmax(logits);
        for _ in 0..new_tokens {
            let l = m.decode_step(state, next)?;
            next = argmax(&l);
        }
    }
    Ok(t.elapsed().as_secs_f64())
}

/// Times `dense` and the compaction of `pruned`, interleaving batches so
/// drift hits both equally. Warm-up batches are discarded.
pub fn bench(
    dense: &Model,
    pruned: &Model,
    cfg: &BenchConfig,
    prompt_source: &[usize],
    eval: Option<&[Vec<usize>]>,
) -> Result<BenchReport> {
    if cfg.batches == 0 || cfg.batch_size == 0 || cfg.prompt_len == 0 {
        return Err(Error::Config("bench needs positive batches, batch_size and prompt_len".into()));
    }
    let dense_c = dense.compact()?;
    let pruned_c = pruned.compact()?;
    let probe = prompts(prompt_source, cfg, 0)?.swap_remove(0);
    let probe = &probe[..probe.len().min(64)];
    let mut diff = 0.0f32;
    for (a, b) in [(dense, &dense_c), (pruned, &pruned_c)] {
        diff = diff.max(a.forward(probe)?.max_abs_diff(&b.forward(probe)?));
    }
    if diff.is_nan() || diff > EQUIVALENCE_TOL {
        return Err(Error::Contract(format!(
            "compacted model deviates from its overlay by {diff:e}; refusing to time it"
        )));
    }

    let mut timings = Vec::new();
    for batch in 0..cfg.warmup + cfg.batches {
        let ps = prompts(prompt_source, cfg, batch)?;
        for (name, m) in [("dense", &dense_c), ("pruned", &pruned_c)] {
            let pre = time_prefill(m, &ps, cfg.prompt_len)?;
            let dec = time_decode(m, &ps, cfg.new_tokens)?;
            if batch < cfg.warmup {
                continue;
            }
            let b = batch - cfg.warmup;
            timings.push(Timing {
                model: name.into(),
                phase: "prefill".into(),
                batch: b,
                seconds: pre,
                tokens: cfg.batch_size * cfg.prompt_len,
            });
            timings.push(Timing {
                model: name.into(),
                phase: "decode".into(),
                batch: b,
                seconds: dec,
                tokens: cfg.batch_size * cfg.new_tokens,
            });
        }
    }
    let dp = stats(&timings, "dense", "prefill");
    let dd = stats(&timings, "dense", "decode");
    let pp = stats(&timings, "pruned", "prefill");
    let pd = stats(&timings, "pruned", "decode");
    let unstable = [&dp, &dd, &pp, &pd].iter().any(|s| s.cv.is_nan() || s.cv > cfg.max_cv);
    if unstable {
        log::warn!("timing variance above cv {}; report flagged unstable", cfg.max_cv);
    }
    let (ppl_dense, ppl_pruned) = match eval {
        Some(e) => (
            Some(crate::training::perplexity(dense, e)?),
            Some(crate::training::perplexity(pruned, e)?),
        ),
        None => (None, None),
    };
    Ok(BenchReport {
        config: cfg.clone(),
        prefill_speedup: pp.median_tokens_per_s / dp.median_tokens_per_s,
        decode_speedup: pd.median_tokens_per_s / dd.median_tokens_per_s,
        dense_prefill: dp,
        dense_decode: dd,
        pruned_prefill: pp,
        pruned_decode: pd,
        unstable,
        prune_ratio: pruned.prune_ratio(),
        dense_params: dense.alive_param_count(),
        pruned_params: pruned.alive_param_count(),
        ppl_dense,
        ppl_pruned,
        equivalence_max_diff: diff,
        timings,
    })
}
