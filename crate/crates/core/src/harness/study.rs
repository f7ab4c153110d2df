//! Block- versus SSM-removal tolerance of matched Mamba-1 and Mamba-2
//! stacks.

use serde::{Deserialize, Serialize};

use super::config::StudySection;
use super::report::CurvePoint;
use crate::error::Result;
use crate::model::{ArchDescriptor, BlockKind, Model, StructureKind};
use crate::shedder::{prune_blocks, CalibrationSet, PruneAction, Scorer};
use crate::training::{perplexity, train, Corpus, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub family: BlockKind,
    pub target: StructureKind,
    pub actions: Vec<PruneAction>,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    /// Mean of `ppl / dense ppl` over the pruned points.
    pub fn mean_degradation(&self) -> f64 {
        let dense = self.points[0].ppl;
        let tail = &self.points[1..];
        if tail.is_empty() {
            return 1.0;
        }
        tail.iter().map(|p| p.ppl / dense).sum::<f64>() / tail.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub dense_ppl: Vec<(BlockKind, f64)>,
    pub curves: Vec<Curve>,
    /// Mamba-1 degrades less than Mamba-2 under block removal.
    pub mamba1_tolerates_blocks_better: bool,
    /// Mamba-2 degrades less than Mamba-1 under SSM removal.
    pub mamba2_tolerates_ssm_better: bool,
}

impl StudyReport {
    pub fn points(&self) -> Vec<CurvePoint> {
        self.curves.iter().flat_map(|c| c.points.iter().cloned()).collect()
    }

    pub fn ordering_reproduced(&self) -> bool {
        self.mamba1_tolerates_blocks_better && self.mamba2_tolerates_ssm_better
    }

    fn degradation(&self, family: BlockKind, target: StructureKind) -> f64 {
        self.curves
            .iter()
            .find(|c| c.family == family && c.target == target)
            .map_or(f64::NAN, Curve::mean_degradation)
    }
}

pub fn study_descriptor(kind: BlockKind, s: &StudySection) -> ArchDescriptor {
    ArchDescriptor {
        d_model: s.d_model,
        ssm_state: s.ssm_state,
        ..ArchDescriptor::toy(kind, s.n_blocks)
    }
}

/// One curve: greedy removal of `target`, one step at a time, with the
/// validation perplexity after each step.
pub fn pruning_curve(
    trained: &Model,
    target: StructureKind,
    steps: usize,
    cal: &CalibrationSet,
    eval: &[Vec<usize>],
    scorer: &Scorer,
    label: &str,
) -> Result<Curve> {
    let mut m = trained.clone();
    let mut points = vec![CurvePoint {
        kind: label.to_string(),
        steps: 0,
        ppl: perplexity(&m, eval)?,
        ratio: m.prune_ratio(),
    }];
    let mut actions = Vec::new();
    for t in 1..=steps {
        let plan = prune_blocks(&mut m, &[target], 1, cal, None, scorer)?;
        if plan.truncated {
            break;
        }
        actions.extend(plan.actions());
        points.push(CurvePoint {
            kind: label.to_string(),
            steps: t,
            ppl: perplexity(&m, eval)?,
            ratio: m.prune_ratio(),
        });
    }
    Ok(Curve {
        label: label.to_string(),
        family: trained.descriptor().block_kinds[0],
        target,
        actions,
        points,
    })
}

/// Trains matched Mamba-1 and Mamba-2 stacks (same dimensions, data, steps
/// and seeds) and records block- and SSM-removal curves for both.
#[allow(clippy::too_many_arguments)]
pub fn study_sensitivity(
    corpus: &Corpus,
    cfg: &StudySection,
    train_cfg: &TrainConfig,
    seed: u64,
    cal: &CalibrationSet,
    eval: &[Vec<usize>],
    scorer: &Scorer,
) -> Result<(StudyReport, Vec<Model>)> {
    let mut dense_ppl = Vec::new();
    let mut curves = Vec::new();
    let mut models = Vec::new();
    for family in [BlockKind::Mamba1, BlockKind::Mamba2] {
        let mut m = Model::build(&study_descriptor(family, cfg), seed)?;
        log::info!("study: training {family:?} for {} steps", train_cfg.steps);
        train(&mut m, corpus, train_cfg)?;
        let tag = match family {
            BlockKind::Mamba1 => "mamba1",
            _ => "mamba2",
        };
        for (target, steps, what) in [
            (StructureKind::MambaBlock, cfg.block_steps, "block"),
            (StructureKind::SsmModule, cfg.ssm_steps, "ssm"),
        ] {
            log::info!("study: {tag} {what} curve");
            curves.push(pruning_curve(&m, target, steps, cal, eval, scorer, &format!("{tag}_{what}"))?);
        }
        dense_ppl.push((family, curves.last().expect("curve").points[0].ppl));
        models.push(m);
    }
    let mut report = StudyReport {
        dense_ppl,
        curves,
        mamba1_tolerates_blocks_better: false,
        mamba2_tolerates_ssm_better: false,
    };
    report.mamba1_tolerates_blocks_better = report.degradation(BlockKind::Mamba1, StructureKind::MambaBlock)
        < report.degradation(BlockKind::Mamba2, StructureKind::MambaBlock);
    report.mamba2_tolerates_ssm_better = report.degradation(BlockKind::Mamba2, StructureKind::SsmModule)
        < report.degradation(BlockKind::Mamba1, StructureKind::SsmModule);
    Ok((report, models))
}
