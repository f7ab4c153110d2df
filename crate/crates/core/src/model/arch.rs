use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DEFAULT_CONV_WIDTH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockKind {
    Mamba1,
    Mamba2,
    Transformer,
}

impl BlockKind {
    pub fn is_mamba(self) -> bool {
        matches!(self, BlockKind::Mamba1 | BlockKind::Mamba2)
    }
}

/// Declarative description of a model stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub vocab: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub block_kinds: Vec<BlockKind>,
    /// SSM state size `N`.
    pub ssm_state: usize,
    /// Gated-MLP intermediate width `D` of Transformer blocks when dense.
    pub mlp_intermediate: usize,
    pub conv_width: usize,
    pub n_heads: usize,
    /// Mamba inner width is `expand · d_model`.
    #[serde(default = "default_expand")]
    pub expand: usize,
}

fn default_expand() -> usize {
    2
}

pub const TOY_VOCAB: usize = 96;

impl ArchDescriptor {
    /// Toy stack of one block kind: vocab 96, d 64, N 16, D 256.
    pub fn toy(kind: BlockKind, n_blocks: usize) -> Self {
        Self {
            vocab: TOY_VOCAB,
            d_model: 64,
            n_blocks,
            block_kinds: vec![kind; n_blocks],
            ssm_state: 16,
            mlp_intermediate: 256,
            conv_width: DEFAULT_CONV_WIDTH,
            n_heads: 4,
            expand: 2,
        }
    }

    pub fn toy_mamba1() -> Self {
        Self::toy(BlockKind::Mamba1, 12)
    }

    pub fn toy_mamba2() -> Self {
        Self::toy(BlockKind::Mamba2, 12)
    }

    /// Mamba-2 stack with Transformer blocks at positions 3 and 9.
    pub fn toy_hybrid() -> Self {
        Self::toy(BlockKind::Mamba2, 12).with_transformers_at(&[3, 9])
    }

    pub fn with_transformers_at(mut self, positions: &[usize]) -> Self {
        for &p in positions {
            if p < self.block_kinds.len() {
                self.block_kinds[p] = BlockKind::Transformer;
            }
        }
        self
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.block_kinds.len() != self.n_blocks {
            errs.push(format!(
                "block_kinds has {} entries but n_blocks is {}",
                self.block_kinds.len(),
                self.n_blocks
            ));
        }
        for (name, v) in [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("ssm_state", self.ssm_state),
            ("conv_width", self.conv_width),
            ("n_heads", self.n_heads),
            ("expand", self.expand),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        let has_transformer = self.block_kinds.contains(&BlockKind::Transformer);
        if has_transformer {
            if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
                errs.push(format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ));
            }
            if self.mlp_intermediate == 0 {
                errs.push("mlp_intermediate must be positive when Transformer blocks are present".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    // Analytic parameter counts; they match the tensors `Model::build` creates.

    pub fn embedding_params(&self) -> usize {
        self.vocab * self.d_model
    }

    /// Embedding, final norm and LM head.
    pub fn shared_params(&self) -> usize {
        2 * self.vocab * self.d_model + self.d_model
    }

    /// Parameters of a Mamba block outside its SSM module.
    pub fn mamba_shell_params(&self, kind: BlockKind) -> usize {
        let (d, di, w) = (self.d_model, self.d_inner(), self.conv_width);
        let out_norm = if kind == BlockKind::Mamba2 { di } else { 0 };
        d + 2 * di * d + di * w + di + d * di + out_norm
    }

    pub fn ssm_params(&self, kind: BlockKind) -> usize {
        let (di, n) = (self.d_inner(), self.ssm_state);
        let a = if kind == BlockKind::Mamba2 { di } else { di * n };
        a + 2 * n * di + di * di + 2 * di
    }

    pub fn mha_params(&self) -> usize {
        self.d_model + 4 * self.d_model * self.d_model
    }

    pub fn mlp_params(&self, width: usize) -> usize {
        self.d_model + 3 * width * self.d_model
    }

    pub fn block_params(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Mamba1 | BlockKind::Mamba2 => self.mamba_shell_params(kind) + self.ssm_params(kind),
            BlockKind::Transformer => self.mha_params() + self.mlp_params(self.mlp_intermediate),
        }
    }

    pub fn dense_params(&self) -> usize {
        self.shared_params() + self.block_kinds.iter().map(|&k| self.block_params(k)).sum::<usize>()
    }
}

/// Granularity of a removable structure. The declaration order is the
/// tie-break order used by the pruning search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StructureKind {
    MambaBlock,
    TransformerBlock,
    SsmModule,
    MhaModule,
    MlpModule,
    MlpChannelGroup,
}

impl StructureKind {
    pub const ALL: [StructureKind; 6] = [
        StructureKind::MambaBlock,
        StructureKind::TransformerBlock,
        StructureKind::SsmModule,
        StructureKind::MhaModule,
        StructureKind::MlpModule,
        StructureKind::MlpChannelGroup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StructureKind::MambaBlock => "MambaBlock",
            StructureKind::TransformerBlock => "TransformerBlock",
            StructureKind::SsmModule => "SsmModule",
            StructureKind::MhaModule => "MhaModule",
            StructureKind::MlpModule => "MlpModule",
            StructureKind::MlpChannelGroup => "MlpChannelGroup",
        }
    }

    /// Whether a block of `kind` hosts structures of this kind.
    pub fn applies_to(self, kind: BlockKind) -> bool {
        match self {
            StructureKind::MambaBlock | StructureKind::SsmModule => kind.is_mamba(),
            _ => kind == BlockKind::Transformer,
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match norm.as_str() {
            "mambablock" | "mamba" | "block" => StructureKind::MambaBlock,
            "transformerblock" | "transformer" => StructureKind::TransformerBlock,
            "ssmmodule" | "ssm" => StructureKind::SsmModule,
            "mhamodule" | "mha" | "attention" => StructureKind::MhaModule,
            "mlpmodule" | "mlp" => StructureKind::MlpModule,
            "mlpchannelgroup" | "channel" | "channels" | "mlpchannel" => StructureKind::MlpChannelGroup,
            _ => return Err(Error::Config(format!("unknown structure kind '{s}'"))),
        })
    }
}

/// A removable structure. Ordering is by block index, then kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StructureId {
    pub block: usize,
    pub kind: StructureKind,
}

impl StructureId {
    pub fn new(kind: StructureKind, block: usize) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for StructureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.kind, self.block)
    }
}

/// One registry entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructureInfo {
    pub id: StructureId,
    pub alive: bool,
    /// Parameters owned directly by this structure (nested structures own
    /// their own).
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLiveness {
    pub block: bool,
    pub ssm: bool,
    pub mha: bool,
    pub mlp: bool,
    /// Effective MLP intermediate width; forward uses the leading channels.
    pub mlp_width: usize,
}

/// Alive bitmap plus effective MLP widths. Doubles as a scoring overlay: a
/// model can run forward under any liveness without mutating its weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Liveness {
    pub blocks: Vec<BlockLiveness>,
}

impl Liveness {
    pub fn dense(desc: &ArchDescriptor) -> Self {
        Self {
            blocks: desc
                .block_kinds
                .iter()
                .map(|&k| BlockLiveness {
                    block: true,
                    ssm: true,
                    mha: true,
                    mlp: true,
                    mlp_width: if k == BlockKind::Transformer { desc.mlp_intermediate } else { 0 },
                })
                .collect(),
        }
    }

    pub fn is_alive(&self, id: StructureId) -> bool {
        let Some(b) = self.blocks.get(id.block) else { return false };
        b.block
            && match id.kind {
                StructureKind::MambaBlock | StructureKind::TransformerBlock => true,
                StructureKind::SsmModule => b.ssm,
                StructureKind::MhaModule => b.mha,
                StructureKind::MlpModule => b.mlp,
                StructureKind::MlpChannelGroup => b.mlp && b.mlp_width > 0,
            }
    }

    /// Marks a whole structure removed.
    pub fn remove(&mut self, id: StructureId) -> Result<()> {
        if !self.is_alive(id) {
            return Err(Error::State(format!("{id} is already removed")));
        }
        let b = &mut self.blocks[id.block];
        match id.kind {
            StructureKind::MambaBlock | StructureKind::TransformerBlock => b.block = false,
            StructureKind::SsmModule => b.ssm = false,
            StructureKind::MhaModule => b.mha = false,
            StructureKind::MlpModule => b.mlp = false,
            StructureKind::MlpChannelGroup => {
                return Err(Error::State("channel groups are sliced, not removed".into()))
            }
        }
        Ok(())
    }

    /// Narrows the effective MLP width of `block` by `g`.
    pub fn narrow_mlp(&mut self, block: usize, g: usize) -> Result<()> {
        let id = StructureId::new(StructureKind::MlpModule, block);
        if !self.is_alive(id) {
            return Err(Error::State(format!("{id} is not alive")));
        }
        let b = &mut self.blocks[block];
        if b.mlp_width < g {
            return Err(Error::Capacity {
                block,
                available: b.mlp_width,
                requested: g,
            });
        }
        b.mlp_width -= g;
        Ok(())
    }

    /// Parameters that still take part in the forward pass.
    pub fn alive_params(&self, desc: &ArchDescriptor) -> usize {
        let mut total = desc.shared_params();
        for (b, &kind) in self.blocks.iter().zip(&desc.block_kinds) {
            if !b.block {
                continue;
            }
            match kind {
                BlockKind::Mamba1 | BlockKind::Mamba2 => {
                    total += desc.mamba_shell_params(kind);
                    if b.ssm {
                        total += desc.ssm_params(kind);
                    }
                }
                BlockKind::Transformer => {
                    if b.mha {
                        total += desc.mha_params();
                    }
                    if b.mlp {
                        total += desc.mlp_params(b.mlp_width);
                    }
                }
            }
        }
        total
    }
}

/// Removed fraction of the dense parameter count, embedding and head
/// included in the denominator.
pub fn prune_ratio_of(desc: &ArchDescriptor, live: &Liveness, dense_params: usize) -> f64 {
    if dense_params == 0 {
        return 0.0;
    }
    let alive = live.alive_params(desc);
    (dense_params.saturating_sub(alive)) as f64 / dense_params as f64
}
