//! Block- vs SSM-removal sensitivity for matched Mamba-1 and Mamba-2 stacks,
//! at a size that runs in about a minute.

use ssm_shed::harness::config::StudySection;
use ssm_shed::harness::report::write_curves_csv;
use ssm_shed::harness::study_sensitivity;
use ssm_shed::shedder::{CalibrationSet, Scorer};
use ssm_shed::training::{Corpus, Split, TrainConfig};

fn main() -> ssm_shed::Result<()> {
    let corpus = Corpus::bundled();
    let study = StudySection { n_blocks: 6, d_model: 32, ssm_state: 8, block_steps: 3, ssm_steps: 3 };
    let train = TrainConfig { steps: 150, batch_size: 8, seq_len: 64, ..TrainConfig::default() };
    let cal = CalibrationSet::new(corpus.calibration(8, 128)?)?;
    let eval = corpus.windows(Split::Validation, 128, 8);

    let (rep, _) = study_sensitivity(&corpus, &study, &train, 0, &cal, &eval, &Scorer::sequential())?;
    write_curves_csv(std::io::stdout(), &rep.points())?;
    println!(
        "Mamba-1 tolerates block removal better: {}; Mamba-2 tolerates SSM removal better: {}",
        rep.mamba1_tolerates_blocks_better, rep.mamba2_tolerates_ssm_better
    );
    Ok(())
}
