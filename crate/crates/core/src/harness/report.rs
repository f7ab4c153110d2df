//! CSV views of run artifacts and the matching readers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::bench::csv_err;
use crate::error::Result;
use crate::model::StructureKind;
use crate::shedder::{ImportanceRecord, PruneAction};

/// Flat form of an [`ImportanceRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub iteration: usize,
    pub kind: StructureKind,
    pub block: usize,
    pub group: Option<usize>,
    /// `inf` for disqualified candidates.
    pub score: f64,
    pub selected: bool,
}

impl From<&ImportanceRecord> for TraceRow {
    fn from(r: &ImportanceRecord) -> Self {
        Self {
            stage: r.stage,
            iteration: r.iteration,
            kind: r.candidate.kind,
            block: r.candidate.block,
            group: r.candidate.group,
            score: r.score,
            selected: r.selected,
        }
    }
}

impl From<TraceRow> for ImportanceRecord {
    fn from(r: TraceRow) -> Self {
        Self {
            stage: r.stage,
            iteration: r.iteration,
            candidate: PruneAction {
                kind: r.kind,
                block: r.block,
                group: r.group,
            },
            score: r.score,
            selected: r.selected,
        }
    }
}

pub fn write_trace_csv(w: impl Write, records: &[ImportanceRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(TraceRow::from(r)).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trace_csv(r: impl Read) -> Result<Vec<ImportanceRecord>> {
    csv::Reader::from_reader(r)
        .deserialize::<TraceRow>()
        .map(|row| row.map(Into::into).map_err(csv_err))
        .collect()
}

/// One point of a pruning curve. Column order is fixed: kind, steps, ppl,
/// ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub kind: String,
    pub steps: usize,
    pub ppl: f64,
    pub ratio: f64,
}

pub fn write_curves_csv(w: impl Write, points: &[CurvePoint]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_curves_csv(r: impl Read) -> Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}
