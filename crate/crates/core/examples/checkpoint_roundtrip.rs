//! Saves a partially pruned model with metadata and reloads it bit-exactly.

use serde_json::json;
use ssm_shed::model::{checkpoint, ArchDescriptor, Model, StructureId, StructureKind};

fn main() -> ssm_shed::Result<()> {
    let mut model = Model::build(&ArchDescriptor::toy_hybrid(), 5)?;
    model.remove(StructureId::new(StructureKind::SsmModule, 0))?;
    model.slice_mlp(3, 64)?;

    let dir = std::env::temp_dir().join("ssm-shed-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path, Some(&json!({ "note": "example" })))?;
    let (back, meta) = checkpoint::load(&path)?;

    let probe: Vec<usize> = (0..32).map(|i| (i * 7) % model.vocab()).collect();
    let same = model.forward(&probe)?.data() == back.forward(&probe)?.data();
    println!(
        "{} bytes, meta {}, liveness preserved: {}, logits bit-identical: {same}",
        std::fs::metadata(&path)?.len(),
        meta.unwrap_or_default(),
        back.liveness() == model.liveness()
    );
    Ok(())
}
