//! Trains a small Mamba-1 character model on the bundled text and samples
//! from it greedily.

use ssm_shed::model::{ArchDescriptor, BlockKind, Model};
use ssm_shed::training::{self, perplexity, Corpus, Split, TrainConfig};

fn main() -> ssm_shed::Result<()> {
    let corpus = Corpus::bundled();
    let desc = ArchDescriptor { d_model: 48, ..ArchDescriptor::toy(BlockKind::Mamba1, 4) };
    let mut model = Model::build(&desc, 0)?;
    let cfg = TrainConfig { steps: 150, batch_size: 8, seq_len: 64, ..TrainConfig::default() };

    let eval = corpus.windows(Split::Validation, 128, 8);
    println!("{} params, initial validation ppl {:.2}", model.dense_param_count(), perplexity(&model, &eval)?);
    let report = training::train_with(&mut model, corpus.split(Split::Train), &cfg, |s| {
        if s.step % 25 == 0 {
            println!("step {:>4}  loss {:.3}", s.step, s.loss);
        }
    })?;
    println!("final loss {:.3}, validation ppl {:.2}", report.losses().last().unwrap(), perplexity(&model, &eval)?);

    let prompt = training::encode("Alice was ")?;
    let (mut state, mut logits) = model.prime(&prompt)?;
    let mut out = prompt.clone();
    for _ in 0..60 {
        let next = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        out.push(next);
        logits = model.decode_step(&mut state, next)?;
    }
    println!("{:?}", training::decode(&out));
    Ok(())
}
