//! Run configuration: TOML with one section per concern. Unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchDescriptor, BlockKind};
use crate::shedder::{CalibrationSet, Schedule, Stage};
use crate::training::{Corpus, Split, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives model initialization and batch sampling.
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Candidate-scoring threads for `prune`; 0 or 1 scores sequentially.
    pub threads: usize,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub prune: PruneSection,
    pub bench: BenchConfig,
    pub study: StudySection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Start from this checkpoint instead of a fresh model.
    pub checkpoint: Option<PathBuf>,
    /// `mamba1`, `mamba2` or `hybrid`.
    pub preset: String,
    pub n_blocks: Option<usize>,
    pub d_model: Option<usize>,
    pub ssm_state: Option<usize>,
    pub mlp_intermediate: Option<usize>,
    pub n_heads: Option<usize>,
    pub expand: Option<usize>,
    /// Overrides the preset's Transformer positions.
    pub transformers_at: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            preset: "mamba1".into(),
            n_blocks: None,
            d_model: None,
            ssm_state: None,
            mlp_intermediate: None,
            n_heads: None,
            expand: None,
            transformers_at: None,
        }
    }
}

impl ModelSection {
    pub fn descriptor(&self) -> Result<ArchDescriptor> {
        let (kind, hybrid) = match self.preset.to_ascii_lowercase().as_str() {
            "mamba1" | "mamba-1" | "s6" => (BlockKind::Mamba1, false),
            "mamba2" | "mamba-2" | "ssd" => (BlockKind::Mamba2, false),
            "hybrid" => (BlockKind::Mamba2, true),
            "transformer" => (BlockKind::Transformer, false),
            other => return Err(Error::Config(format!("unknown model preset '{other}'"))),
        };
        let n = self.n_blocks.unwrap_or(12);
        let mut d = ArchDescriptor::toy(kind, n);
        d.d_model = self.d_model.unwrap_or(d.d_model);
        d.ssm_state = self.ssm_state.unwrap_or(d.ssm_state);
        d.mlp_intermediate = self.mlp_intermediate.unwrap_or(d.mlp_intermediate);
        d.n_heads = self.n_heads.unwrap_or(d.n_heads);
        d.expand = self.expand.unwrap_or(d.expand);
        let positions = match (&self.transformers_at, hybrid) {
            (Some(p), _) => p.clone(),
            (None, true) => vec![n / 4, n - 1 - n / 4],
            (None, false) => Vec::new(),
        };
        if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
            return Err(Error::Config(format!("transformer position {bad} is outside {n} blocks")));
        }
        d = d.with_transformers_at(&positions);
        d.validate()?;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Plain-text corpus; the bundled text when absent.
    pub corpus: Option<PathBuf>,
    pub calibration_count: usize,
    pub calibration_len: usize,
    /// Validation windows used for every reported perplexity.
    pub eval_count: usize,
    pub eval_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            calibration_count: CalibrationSet::DEFAULT_COUNT,
            calibration_len: CalibrationSet::DEFAULT_LEN,
            eval_count: 32,
            eval_len: 256,
        }
    }
}

impl DataSection {
    pub fn corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            Some(p) => Corpus::from_path(p),
            None => Ok(Corpus::bundled()),
        }
    }

    pub fn calibration(&self, corpus: &Corpus) -> Result<CalibrationSet> {
        CalibrationSet::new(corpus.calibration(self.calibration_count, self.calibration_len)?)
    }

    pub fn eval_set(&self, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
        let w = corpus.windows(Split::Validation, self.eval_len, self.eval_count);
        if w.is_empty() {
            return Err(Error::Config(format!(
                "validation split is shorter than eval_len {}",
                self.eval_len
            )));
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    /// Text form, e.g. `"MambaBlock&MhaModule:4 + MlpChannelGroup:5:16"`.
    pub schedule: Option<String>,
    /// Table form; used when `schedule` is absent.
    pub stages: Vec<Stage>,
    /// Recovery-tuning steps after pruning (0 skips tuning). Uses `[train]`
    /// for everything else.
    pub recover_steps: usize,
}

impl PruneSection {
    pub fn schedule(&self) -> Result<Schedule> {
        match (&self.schedule, self.stages.is_empty()) {
            (Some(_), false) => Err(Error::Config("give either prune.schedule or prune.stages, not both".into())),
            (Some(s), true) => s.parse(),
            (None, false) => Ok(Schedule {
                stages: self.stages.clone(),
            }),
            (None, true) => Err(Error::Config("no pruning schedule configured".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batches: usize,
    pub warmup: usize,
    pub prompt_len: usize,
    pub new_tokens: usize,
    pub batch_size: usize,
    /// Coefficient of variation above which a phase is flagged unstable.
    pub max_cv: f64,
    /// Pruned model: a plan to replay on the dense model...
    pub plan: Option<PathBuf>,
    /// ...or a pruned checkpoint...
    pub pruned: Option<PathBuf>,
    /// ...or this many greedy whole-block removals.
    pub block_steps: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batches: 10,
            warmup: 1,
            prompt_len: 512,
            new_tokens: 16,
            batch_size: 1,
            max_cv: 0.15,
            plan: None,
            pruned: None,
            block_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub n_blocks: usize,
    pub d_model: usize,
    pub ssm_state: usize,
    /// Removal steps per curve.
    pub block_steps: usize,
    pub ssm_steps: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            d_model: 64,
            ssm_state: 16,
            block_steps: 6,
            ssm_steps: 6,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
