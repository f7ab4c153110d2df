//! Slices trailing MLP channel groups out of a hybrid model's Transformer
//! blocks (a physical shrink), removes an attention module through the
//! liveness overlay, then compacts and checks the logits did not move.

use ssm_shed::model::{ArchDescriptor, Model, StructureId, StructureKind};
use ssm_shed::shedder::{prune_blocks, CalibrationSet, Scorer};
use ssm_shed::training::Corpus;

fn main() -> ssm_shed::Result<()> {
    let corpus = Corpus::bundled();
    let desc = ArchDescriptor { d_model: 32, mlp_intermediate: 128, ..ArchDescriptor::toy_hybrid() };
    let mut model = Model::build(&desc, 0)?;
    let dense_stored = model.stored_param_count();
    let cal = CalibrationSet::new(corpus.calibration(4, 64)?)?;

    let plan = prune_blocks(&mut model, &[StructureKind::MlpChannelGroup], 4, &cal, Some(16), &Scorer::sequential())?;
    for s in &plan.steps {
        println!("{}  score {:.3}  ratio {:.4}", s.action, s.score, s.prune_ratio);
    }

    model.remove(StructureId::new(StructureKind::MhaModule, 3))?;
    let compact = model.compact()?;
    let probe = &cal.sequences()[0];
    let diff = model.forward(probe)?.max_abs_diff(&compact.forward(probe)?);
    println!(
        "stored params: dense {dense_stored}, sliced {}, compacted {}; max logit diff {diff:.1e}",
        model.stored_param_count(),
        compact.stored_param_count()
    );
    Ok(())
}
