//! Greedy perplexity-guided removal of whole Mamba blocks, printing every
//! candidate score per iteration.

use ssm_shed::model::{ArchDescriptor, BlockKind, Model, StructureKind};
use ssm_shed::shedder::{prune_blocks, replay, CalibrationSet, Scorer};
use ssm_shed::training::{perplexity, train, Corpus, Split, TrainConfig};

fn main() -> ssm_shed::Result<()> {
    let corpus = Corpus::bundled();
    let mut model = Model::build(&ArchDescriptor { d_model: 32, ..ArchDescriptor::toy(BlockKind::Mamba1, 6) }, 0)?;
    train(&mut model, &corpus, &TrainConfig { steps: 120, batch_size: 8, seq_len: 64, ..TrainConfig::default() })?;
    let dense = model.clone();

    let cal = CalibrationSet::new(corpus.calibration(16, 128)?)?;
    let plan = prune_blocks(&mut model, &[StructureKind::MambaBlock], 3, &cal, None, &Scorer::sequential())?;
    for it in 0..plan.steps.len() {
        let row: Vec<String> = plan
            .trace
            .iter()
            .filter(|r| r.iteration == it)
            .map(|r| format!("{}{}={:.2}", if r.selected { "*" } else { "" }, r.candidate, r.score))
            .collect();
        println!("iteration {it}: {}", row.join("  "));
    }

    let eval = corpus.windows(Split::Validation, 128, 8);
    println!(
        "validation ppl {:.3} -> {:.3}, prune ratio {:.3}",
        perplexity(&dense, &eval)?,
        perplexity(&model, &eval)?,
        model.prune_ratio()
    );

    // the plan alone reproduces the pruned model
    let mut again = dense.clone();
    replay(&mut again, &plan.actions())?;
    assert_eq!(again.liveness(), model.liveness());
    Ok(())
}
