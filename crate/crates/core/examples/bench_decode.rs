//! Prefill and decode throughput of a dense model against the same model
//! with a quarter of its blocks removed.

use ssm_shed::harness::{bench, BenchConfig};
use ssm_shed::model::{ArchDescriptor, BlockKind, Model, StructureKind};
use ssm_shed::shedder::{prune_blocks, CalibrationSet, Scorer};
use ssm_shed::training::{Corpus, Split};

fn main() -> ssm_shed::Result<()> {
    let corpus = Corpus::bundled();
    let dense = Model::build(&ArchDescriptor::toy(BlockKind::Mamba1, 8), 0)?;
    let mut pruned = dense.clone();
    let cal = CalibrationSet::new(corpus.calibration(4, 64)?)?;
    prune_blocks(&mut pruned, &[StructureKind::MambaBlock], 2, &cal, None, &Scorer::sequential())?;

    let cfg = BenchConfig { batches: 5, prompt_len: 256, new_tokens: 32, ..BenchConfig::default() };
    let rep = bench(&dense, &pruned, &cfg, corpus.split(Split::Validation), None)?;
    println!(
        "prefill {:.0} -> {:.0} tok/s ({:.2}x)",
        rep.dense_prefill.median_tokens_per_s, rep.pruned_prefill.median_tokens_per_s, rep.prefill_speedup
    );
    println!(
        "decode  {:.0} -> {:.0} tok/s ({:.2}x){}",
        rep.dense_decode.median_tokens_per_s,
        rep.pruned_decode.median_tokens_per_s,
        rep.decode_speedup,
        if rep.unstable { "  [unstable timings]" } else { "" }
    );
    rep.write_csv(std::io::stdout())?;
    Ok(())
}
