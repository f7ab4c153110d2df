//! Perplexity-driven structured pruning.
//!
//! Every iteration scores each alive candidate by the calibration perplexity
//! of the current model with that candidate bypassed, then removes the
//! candidate with the lowest score. Scoring runs on liveness overlays, so the
//! model is only mutated once per iteration.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Liveness, Model, StructureId, StructureKind};
use crate::training::perplexity_with;

/// Fixed token sequences used only for scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    sequences: Vec<Vec<usize>>,
}

impl CalibrationSet {
    pub const DEFAULT_COUNT: usize = 256;
    pub const DEFAULT_LEN: usize = 256;

    pub fn new(sequences: Vec<Vec<usize>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Contract("calibration set is empty".into()));
        }
        if sequences.iter().any(|s| s.len() < 2) {
            return Err(Error::Contract("calibration sequences need at least 2 tokens".into()));
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// One pruning decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneAction {
    pub kind: StructureKind,
    pub block: usize,
    /// Channels sliced off, for `MlpChannelGroup` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

impl PruneAction {
    pub fn remove(id: StructureId) -> Self {
        Self {
            kind: id.kind,
            block: id.block,
            group: None,
        }
    }

    pub fn slice(block: usize, g: usize) -> Self {
        Self {
            kind: StructureKind::MlpChannelGroup,
            block,
            group: Some(g),
        }
    }

    pub fn id(&self) -> StructureId {
        StructureId::new(self.kind, self.block)
    }

    /// Applies the action to a liveness overlay.
    pub fn apply_overlay(&self, live: &mut Liveness) -> Result<()> {
        match (self.kind, self.group) {
            (StructureKind::MlpChannelGroup, Some(g)) => live.narrow_mlp(self.block, g),
            (StructureKind::MlpChannelGroup, None) => Err(Error::State("channel action without a group size".into())),
            _ => live.remove(self.id()),
        }
    }

    /// Applies the action to the model itself.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        match (self.kind, self.group) {
            (StructureKind::MlpChannelGroup, Some(g)) => model.slice_mlp(self.block, g),
            (StructureKind::MlpChannelGroup, None) => Err(Error::State("channel action without a group size".into())),
            _ => model.remove(self.id()),
        }
    }
}

impl fmt::Display for PruneAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())?;
        if let Some(g) = self.group {
            write!(f, "/{g}")?;
        }
        Ok(())
    }
}

/// Scores serialize as `null` when not finite.
mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// A decision together with where it happened and what it scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub stage: usize,
    pub step: usize,
    #[serde(flatten)]
    pub action: PruneAction,
    /// Calibration perplexity after applying this and all earlier actions.
    #[serde(with = "score_serde")]
    pub score: f64,
    pub prune_ratio: f64,
}

/// Score of one candidate in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub stage: usize,
    pub iteration: usize,
    #[serde(flatten)]
    pub candidate: PruneAction,
    #[serde(with = "score_serde")]
    pub score: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrunePlan {
    pub steps: Vec<PlanStep>,
    pub trace: Vec<ImportanceRecord>,
    /// Some stage ran out of candidates before its step budget.
    pub truncated: bool,
}

impl PrunePlan {
    pub fn actions(&self) -> Vec<PruneAction> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn final_score(&self) -> Option<f64> {
        self.steps.last().map(|s| s.score)
    }

    fn extend(&mut self, other: PrunePlan) {
        self.steps.extend(other.steps);
        self.trace.extend(other.trace);
        self.truncated |= other.truncated;
    }

    pub fn write_plan(&self, w: impl Write) -> Result<()> {
        write_jsonl(w, &self.steps)
    }

    pub fn write_trace(&self, w: impl Write) -> Result<()> {
        write_jsonl(w, &self.trace)
    }
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Replays plan actions on `model` in order.
pub fn replay(model: &mut Model, actions: &[PruneAction]) -> Result<()> {
    for a in actions {
        a.apply(model)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// Candidate scorer; with more than one thread it scores candidates in
/// parallel, collecting results in candidate order.
pub struct Scorer {
    pool: Option<rayon::ThreadPool>,
}

impl Default for Scorer {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Scorer {
    pub fn sequential() -> Self {
        Self { pool: None }
    }

    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    fn score_all(&self, model: &Model, live: &Liveness, cands: &[PruneAction], cal: &CalibrationSet) -> Vec<f64> {
        let one = |a: &PruneAction| score_overlay(model, live, a, cal);
        match &self.pool {
            Some(pool) => pool.install(|| cands.par_iter().map(one).collect()),
            None => cands.iter().map(one).collect(),
        }
    }
}

fn score_overlay(model: &Model, live: &Liveness, a: &PruneAction, cal: &CalibrationSet) -> f64 {
    let mut overlay = live.clone();
    if let Err(e) = a.apply_overlay(&mut overlay) {
        warn!("cannot score {a}: {e}");
        return f64::INFINITY;
    }
    match perplexity_with(model, &overlay, cal.sequences()) {
        Ok(p) if p.is_finite() => p,
        Ok(p) => {
            warn!("{a}: perplexity {p} is not finite; scored +inf");
            f64::INFINITY
        }
        Err(e) => {
            warn!("{a}: scoring failed ({e}); scored +inf");
            f64::INFINITY
        }
    }
}

/// Calibration perplexity of the model as it stands.
pub fn calibration_perplexity(model: &Model, cal: &CalibrationSet) -> Result<f64> {
    perplexity_with(model, model.liveness(), cal.sequences())
}

/// Perplexity with `s` bypassed; the model is not touched.
pub fn importance(model: &Model, s: StructureId, cal: &CalibrationSet) -> Result<f64> {
    if !model.is_alive(s) || s.kind == StructureKind::MlpChannelGroup {
        return Err(Error::State(format!("{s} is not a removable alive structure")));
    }
    Ok(score_overlay(model, model.liveness(), &PruneAction::remove(s), cal))
}

/// Perplexity with the trailing `g` channels of the MLP in `block` sliced.
pub fn channel_importance(model: &Model, block: usize, g: usize, cal: &CalibrationSet) -> Result<f64> {
    // surface capacity errors instead of scoring them as +inf
    model.liveness().clone().narrow_mlp(block, g)?;
    Ok(score_overlay(model, model.liveness(), &PruneAction::slice(block, g), cal))
}

// ---------------------------------------------------------------------------
// greedy search
// ---------------------------------------------------------------------------

fn candidates(model: &Model, kinds: &[StructureKind], g: Option<usize>) -> Vec<PruneAction> {
    let mut ids: Vec<StructureId> = kinds
        .iter()
        .flat_map(|&k| model.candidates(model.liveness(), k, g.unwrap_or(0)))
        .collect();
    ids.sort();
    ids.dedup();
    ids.into_iter()
        .map(|id| match id.kind {
            StructureKind::MlpChannelGroup => PruneAction::slice(id.block, g.unwrap_or(0)),
            _ => PruneAction::remove(id),
        })
        .collect()
}

/// `t` greedy iterations over the given kinds. Channel candidates slice `g`
/// trailing channels; the other kinds remove the whole structure. Stops early
/// (flagging the plan truncated) when no candidate is left.
pub fn prune_blocks(
    model: &mut Model,
    kinds: &[StructureKind],
    t: usize,
    cal: &CalibrationSet,
    g: Option<usize>,
    scorer: &Scorer,
) -> Result<PrunePlan> {
    let stage = Stage {
        kinds: kinds.to_vec(),
        steps: t,
        group: g,
    };
    stage.validate_for(model)?;
    run_stage(model, &stage, 0, cal, scorer)
}

fn run_stage(model: &mut Model, st: &Stage, index: usize, cal: &CalibrationSet, scorer: &Scorer) -> Result<PrunePlan> {
    let mut plan = PrunePlan::default();
    for it in 0..st.steps {
        let cands = candidates(model, &st.kinds, st.group);
        if cands.is_empty() {
            info!("stage {index}: candidates exhausted after {it} of {} steps", st.steps);
            plan.truncated = true;
            break;
        }
        let scores = scorer.score_all(model, model.liveness(), &cands, cal);
        // first minimum wins: candidates are sorted by (block, kind)
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = i;
            }
        }
        if !scores[best].is_finite() {
            warn!("stage {index} step {it}: every candidate scored +inf");
        }
        let chosen = cands[best];
        chosen.apply(model)?;
        debug!("stage {index} step {it}: {chosen} ppl {:.4}", scores[best]);
        for (i, (a, &s)) in cands.iter().zip(&scores).enumerate() {
            plan.trace.push(ImportanceRecord {
                stage: index,
                iteration: it,
                candidate: *a,
                score: s,
                selected: i == best,
            });
        }
        plan.steps.push(PlanStep {
            stage: index,
            step: it,
            action: chosen,
            score: scores[best],
            prune_ratio: model.prune_ratio(),
        });
    }
    Ok(plan)
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

/// Kinds competing jointly for `steps` iterations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub kinds: Vec<StructureKind>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

impl Stage {
    fn problems(&self, model: &Model) -> Vec<String> {
        let mut out = Vec::new();
        if self.kinds.is_empty() {
            out.push("stage lists no target kinds".to_string());
        }
        if self.steps == 0 {
            out.push("stage needs at least one step".to_string());
        }
        let kinds = &model.descriptor().block_kinds;
        for k in &self.kinds {
            if !kinds.iter().any(|&b| k.applies_to(b)) {
                out.push(format!("{k} does not occur in this model"));
            }
        }
        let channels = self.kinds.contains(&StructureKind::MlpChannelGroup);
        match self.group {
            Some(0) => out.push("group size must be positive".to_string()),
            Some(_) if !channels => out.push("group size given for a stage without MlpChannelGroup".to_string()),
            None if channels => out.push("MlpChannelGroup needs a group size".to_string()),
            _ => {}
        }
        out
    }

    fn validate_for(&self, model: &Model) -> Result<()> {
        let p = self.problems(model);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Schedule(p.join("; ")))
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.kinds.iter().map(|k| k.name()).collect();
        write!(f, "{}:{}", names.join("&"), self.steps)?;
        if let Some(g) = self.group {
            write!(f, ":{g}")?;
        }
        Ok(())
    }
}

/// Stages run strictly in order, each on the model left by the previous.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

impl Schedule {
    pub fn single(kinds: &[StructureKind], steps: usize, group: Option<usize>) -> Self {
        Self {
            stages: vec![Stage {
                kinds: kinds.to_vec(),
                steps,
                group,
            }],
        }
    }

    /// Checks every stage against the model without touching it.
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Schedule("schedule has no stages".into()));
        }
        let p: Vec<String> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.problems(model).into_iter().map(move |m| format!("stage {i}: {m}")))
            .collect();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Schedule(p.join("; ")))
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" + "))
    }
}

/// `kind&kind:steps[:group] + ...`, e.g.
/// `MambaBlock&MlpModule&MhaModule:4 + MlpChannelGroup:5:16 + SsmModule:2`.
impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut stages = Vec::new();
        for part in s.split('+') {
            let fields: Vec<&str> = part.split(':').map(str::trim).collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::Schedule(format!("cannot parse stage '{}'", part.trim())));
            }
            let kinds = fields[0]
                .split('&')
                .map(|k| k.trim().parse::<StructureKind>())
                .collect::<Result<Vec<_>>>()?;
            let num = |f: &str| {
                f.parse::<usize>()
                    .map_err(|_| Error::Schedule(format!("'{f}' is not a count in stage '{}'", part.trim())))
            };
            stages.push(Stage {
                kinds,
                steps: num(fields[1])?,
                group: fields.get(2).map(|f| num(f)).transpose()?,
            });
        }
        Ok(Self { stages })
    }
}

/// Validates the whole schedule, then runs its stages in order.
pub fn run_schedule(model: &mut Model, sched: &Schedule, cal: &CalibrationSet, scorer: &Scorer) -> Result<PrunePlan> {
    sched.validate(model)?;
    let mut plan = PrunePlan::default();
    for (i, st) in sched.stages.iter().enumerate() {
        info!("stage {i}: {st}");
        plan.extend(run_stage(model, st, i, cal, scorer)?);
    }
    Ok(plan)
}
