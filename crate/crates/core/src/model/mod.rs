//! Prunable language models assembled from Mamba and Transformer blocks.
//!
//! Every block adds its residual branches to the stream, so removing a
//! structure is an exact identity bypass. During search removal only flips the
//! [`Liveness`] bitmap; [`Model::compact`] later drops dead weights
//! physically.

mod arch;
mod blocks;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Binder, Embedding, Linear, RmsNorm};
use crate::numerics::{Tape, Tensor, Var};

pub use arch::{
    prune_ratio_of, ArchDescriptor, BlockKind, BlockLiveness, Liveness, StructureId, StructureInfo, StructureKind,
    TOY_VOCAB,
};
pub use blocks::{AttnSub, Block, BlockState, MambaBlock, MlpSub, TransformerBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    desc: ArchDescriptor,
    pub embedding: Embedding,
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    pub head: Linear,
    live: Liveness,
    dense_params: usize,
}

/// Decode-time state of a whole model.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub blocks: Vec<BlockState>,
    pub position: usize,
}

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn build(desc: &ArchDescriptor, seed: u64) -> Result<Self> {
        desc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_gain = 1.0 / ((2 * desc.n_blocks.max(1)) as f32).sqrt();
        let embedding = Embedding::init(desc.vocab, desc.d_model, &mut rng);
        let mut blocks = Vec::with_capacity(desc.n_blocks);
        for &kind in &desc.block_kinds {
            blocks.push(match kind {
                BlockKind::Mamba1 | BlockKind::Mamba2 => {
                    Block::Mamba(MambaBlock::init(desc, kind, out_gain, &mut rng))
                }
                BlockKind::Transformer => Block::Transformer(TransformerBlock::init(desc, out_gain, &mut rng)?),
            });
        }
        let head = Linear::init(desc.d_model, desc.vocab, false, 1.0, &mut rng);
        Ok(Self {
            live: Liveness::dense(desc),
            dense_params: desc.dense_params(),
            desc: desc.clone(),
            embedding,
            blocks,
            final_norm: RmsNorm::new(desc.d_model),
            head,
        })
    }

    pub(crate) fn from_parts(
        desc: ArchDescriptor,
        embedding: Embedding,
        blocks: Vec<Block>,
        final_norm: RmsNorm,
        head: Linear,
        live: Liveness,
        dense_params: usize,
    ) -> Result<Self> {
        desc.validate()?;
        if blocks.len() != desc.n_blocks || live.blocks.len() != desc.n_blocks {
            return Err(Error::Format(format!(
                "{} blocks and {} liveness entries for a {}-block descriptor",
                blocks.len(),
                live.blocks.len(),
                desc.n_blocks
            )));
        }
        for (i, (b, &k)) in blocks.iter().zip(&desc.block_kinds).enumerate() {
            if b.kind() != k {
                return Err(Error::Format(format!("block {i} is {:?}, descriptor says {k:?}", b.kind())));
            }
        }
        Ok(Self {
            desc,
            embedding,
            blocks,
            final_norm,
            head,
            live,
            dense_params,
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn liveness(&self) -> &Liveness {
        &self.live
    }

    pub fn vocab(&self) -> usize {
        self.desc.vocab
    }

    pub fn dense_param_count(&self) -> usize {
        self.dense_params
    }

    // ----------------------------------------------------------------------
    // forward
    // ----------------------------------------------------------------------

    /// Logits `[T × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_with(&self.live, tokens, tokens.len().max(1))
    }

    /// Logits for `tokens.len() / seq_len` sequences under an arbitrary
    /// liveness overlay.
    pub fn forward_with(&self, live: &Liveness, tokens: &[usize], seq_len: usize) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut binder = Binder::inference();
        let logits = self.forward_tape(&mut tape, &mut binder, live, tokens, seq_len)?;
        Ok(tape.take(logits))
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        live: &Liveness,
        tokens: &[usize],
        seq_len: usize,
    ) -> Result<Var> {
        if live.blocks.len() != self.blocks.len() {
            return Err(Error::State(format!(
                "overlay covers {} blocks, model has {}",
                live.blocks.len(),
                self.blocks.len()
            )));
        }
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        let mut x = self.embedding.forward(tape, binder, "embedding", tokens)?;
        for (i, (block, bl)) in self.blocks.iter().zip(&live.blocks).enumerate() {
            x = block.forward(tape, binder, &format!("blocks.{i}"), x, bl, seq_len)?;
        }
        let h = self.final_norm.forward(tape, binder, "final_norm", x)?;
        self.head.forward(tape, binder, "head", h)
    }

    // ----------------------------------------------------------------------
    // decode
    // ----------------------------------------------------------------------

    pub fn new_decode_state(&self) -> DecodeState {
        DecodeState {
            blocks: self.blocks.iter().map(Block::new_state).collect(),
            position: 0,
        }
    }

    /// Consumes one token and returns next-token logits.
    pub fn decode_step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f32>> {
        let mut x = self.embedding.lookup(token).map_err(|_| Error::Input {
            position: state.position,
            token,
            vocab: self.vocab(),
        })?;
        for ((block, bs), bl) in self.blocks.iter().zip(&mut state.blocks).zip(&self.live.blocks) {
            block.step(bs, bl, &mut x)?;
        }
        state.position += 1;
        let h = self.final_norm.apply_row(&x);
        Ok(self.head.apply_row(&h))
    }

    /// Runs `tokens` through the decode path, returning the state and the
    /// logits after the last token.
    pub fn prime(&self, tokens: &[usize]) -> Result<(DecodeState, Vec<f32>)> {
        let mut state = self.new_decode_state();
        let mut logits = Vec::new();
        for &t in tokens {
            logits = self.decode_step(&mut state, t)?;
        }
        Ok((state, logits))
    }

    // ----------------------------------------------------------------------
    // registry
    // ----------------------------------------------------------------------

    /// Every removable structure with its alive flag and directly owned
    /// parameter count. Channel groups are not listed: they are slices of an
    /// `MlpModule`.
    pub fn registry(&self) -> Vec<StructureInfo> {
        let mut out = Vec::new();
        for (i, (block, bl)) in self.blocks.iter().zip(&self.live.blocks).enumerate() {
            match block {
                Block::Mamba(m) => {
                    let mut shell = 0;
                    m.visit_shell("", &mut |_, t| shell += t.numel());
                    out.push(StructureInfo {
                        id: StructureId::new(StructureKind::MambaBlock, i),
                        alive: bl.block,
                        param_count: shell,
                    });
                    out.push(StructureInfo {
                        id: StructureId::new(StructureKind::SsmModule, i),
                        alive: bl.block && bl.ssm,
                        param_count: m.ssm.as_ref().map_or(0, |s| s.param_count()),
                    });
                }
                Block::Transformer(t) => {
                    out.push(StructureInfo {
                        id: StructureId::new(StructureKind::TransformerBlock, i),
                        alive: bl.block,
                        param_count: 0,
                    });
                    out.push(StructureInfo {
                        id: StructureId::new(StructureKind::MhaModule, i),
                        alive: bl.block && bl.mha,
                        param_count: t.attn.as_ref().map_or(0, |a| a.mha.param_count() + a.norm.scale.numel()),
                    });
                    out.push(StructureInfo {
                        id: StructureId::new(StructureKind::MlpModule, i),
                        alive: bl.block && bl.mlp,
                        param_count: t.mlp.as_ref().map_or(0, |m| m.mlp.param_count() + m.norm.scale.numel()),
                    });
                }
            }
        }
        out
    }

    /// Structure that owns the named tensor; `None` for embedding, final norm
    /// and head.
    pub fn owner_of(&self, name: &str) -> Option<StructureId> {
        let rest = name.strip_prefix("blocks.")?;
        let (idx, tail) = rest.split_once('.')?;
        let block: usize = idx.parse().ok()?;
        let kind = self.desc.block_kinds.get(block)?;
        let sk = if tail.starts_with("ssm.") {
            StructureKind::SsmModule
        } else if tail.starts_with("attn.") {
            StructureKind::MhaModule
        } else if tail.starts_with("mlp.") {
            StructureKind::MlpModule
        } else if kind.is_mamba() {
            StructureKind::MambaBlock
        } else {
            StructureKind::TransformerBlock
        };
        Some(StructureId::new(sk, block))
    }

    /// Candidates of `kind` that can currently be removed (or, for channel
    /// groups, sliced by `g`), in id order.
    pub fn candidates(&self, live: &Liveness, kind: StructureKind, g: usize) -> Vec<StructureId> {
        (0..self.blocks.len())
            .filter(|&i| kind.applies_to(self.desc.block_kinds[i]))
            .map(|i| StructureId::new(kind, i))
            .filter(|&id| match kind {
                StructureKind::MlpChannelGroup => {
                    live.is_alive(id) && g > 0 && live.blocks[id.block].mlp_width >= g
                }
                _ => live.is_alive(id),
            })
            .collect()
    }

    // ----------------------------------------------------------------------
    // mutation
    // ----------------------------------------------------------------------

    /// Whether `s` exists in this architecture and is currently alive.
    pub fn is_alive(&self, s: StructureId) -> bool {
        s.block < self.blocks.len() && s.kind.applies_to(self.desc.block_kinds[s.block]) && self.live.is_alive(s)
    }

    /// Bypasses a structure. Its weights stay in place until [`Model::compact`].
    pub fn remove(&mut self, s: StructureId) -> Result<()> {
        if s.kind == StructureKind::MlpChannelGroup {
            return Err(Error::State("use slice_mlp for channel groups".into()));
        }
        if s.block >= self.blocks.len() || !s.kind.applies_to(self.desc.block_kinds[s.block]) {
            return Err(Error::State(format!("{s} does not exist in this model")));
        }
        self.live.remove(s)
    }

    /// Drops the trailing `g` intermediate channels of the MLP in `block`.
    pub fn slice_mlp(&mut self, block: usize, g: usize) -> Result<()> {
        let Some(Block::Transformer(t)) = self.blocks.get_mut(block) else {
            return Err(Error::State(format!("block {block} has no MLP")));
        };
        let id = StructureId::new(StructureKind::MlpModule, block);
        if !self.live.is_alive(id) {
            return Err(Error::State(format!("{id} is not alive")));
        }
        let width = self.live.blocks[block].mlp_width;
        let m = t.mlp.as_mut().ok_or_else(|| Error::State(format!("{id} is absent")))?;
        if width < g {
            return Err(Error::Capacity {
                block,
                available: width,
                requested: g,
            });
        }
        let physical = m.mlp.intermediate();
        m.mlp.slice_trailing(physical - (width - g))?;
        self.live.blocks[block].mlp_width = width - g;
        Ok(())
    }

    /// Removed fraction of the dense parameter count.
    pub fn prune_ratio(&self) -> f64 {
        prune_ratio_of(&self.desc, &self.live, self.dense_params)
    }

    pub fn alive_param_count(&self) -> usize {
        self.live.alive_params(&self.desc)
    }

    /// Physically drops every removed structure. The result has no bypassed
    /// work left and keeps the dense parameter count for ratio reporting.
    pub fn compact(&self) -> Result<Model> {
        let mut kinds = Vec::new();
        let mut blocks = Vec::new();
        let mut live = Vec::new();
        for (block, bl) in self.blocks.iter().zip(&self.live.blocks) {
            if !bl.block {
                continue;
            }
            let mut b = block.clone();
            match &mut b {
                Block::Mamba(m) => {
                    if !bl.ssm {
                        m.ssm = None;
                    }
                }
                Block::Transformer(t) => {
                    if !bl.mha {
                        t.attn = None;
                    }
                    if !bl.mlp {
                        t.mlp = None;
                    } else if let Some(m) = &mut t.mlp {
                        if bl.mlp_width < m.mlp.intermediate() {
                            m.mlp = m.mlp.narrowed(bl.mlp_width)?;
                        }
                    }
                }
            }
            kinds.push(b.kind());
            blocks.push(b);
            live.push(bl.clone());
        }
        let desc = ArchDescriptor {
            n_blocks: kinds.len(),
            block_kinds: kinds,
            ..self.desc.clone()
        };
        Model::from_parts(
            desc,
            self.embedding.clone(),
            blocks,
            self.final_norm.clone(),
            self.head.clone(),
            Liveness { blocks: live },
            self.dense_params,
        )
    }

    // ----------------------------------------------------------------------
    // parameters
    // ----------------------------------------------------------------------

    /// Every stored tensor with its canonical name, in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("embedding.table".into(), &self.embedding.table);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.final_norm.visit("final_norm", f);
        self.head.visit("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embedding.table".into(), &mut self.embedding.table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.final_norm.visit_mut("final_norm", f);
        self.head.visit_mut("head", f);
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn stored_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: BlockKind, n: usize) -> ArchDescriptor {
        ArchDescriptor {
            d_model: 16,
            ssm_state: 4,
            mlp_intermediate: 32,
            n_heads: 2,
            ..ArchDescriptor::toy(kind, n)
        }
    }

    fn hybrid() -> ArchDescriptor {
        small(BlockKind::Mamba2, 5).with_transformers_at(&[1, 3])
    }

    fn tokens(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 37 + 5) % TOY_VOCAB).collect()
    }

    fn max_diff(a: &[f32], b: &[f32]) -> f32 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    /// Parameter count from first principles, per block kind.
    fn count_oracle(d: &ArchDescriptor) -> usize {
        let (dm, v, n, w) = (d.d_model, d.vocab, d.ssm_state, d.conv_width);
        let di = 2 * dm;
        let mut total = v * dm /* embedding */ + dm /* final norm */ + dm * v /* head */;
        for &k in &d.block_kinds {
            total += match k {
                BlockKind::Mamba1 => dm + dm * 2 * di + di * (w + 1) + di * n + di * n * 2 + di * di + di * 2 + di * dm,
                BlockKind::Mamba2 => dm + dm * 2 * di + di * (w + 1) + di + di * n * 2 + di * di + di * 2 + di + di * dm,
                BlockKind::Transformer => (dm + 4 * dm * dm) + (dm + 3 * dm * d.mlp_intermediate),
            };
        }
        total
    }

    #[test]
    fn build_is_deterministic() {
        let d = hybrid();
        assert_eq!(Model::build(&d, 7).unwrap(), Model::build(&d, 7).unwrap());
        assert_ne!(Model::build(&d, 7).unwrap(), Model::build(&d, 8).unwrap());
    }

    #[test]
    fn parameter_counts_match_oracle() {
        for d in [small(BlockKind::Mamba1, 3), small(BlockKind::Mamba2, 3), hybrid(), ArchDescriptor::toy_hybrid()] {
            let m = Model::build(&d, 1).unwrap();
            assert_eq!(m.stored_param_count(), count_oracle(&d));
            assert_eq!(d.dense_params(), count_oracle(&d));
            assert_eq!(m.alive_param_count(), m.dense_param_count());
            assert_eq!(m.prune_ratio(), 0.0);
        }
    }

    #[test]
    fn empty_stack_is_embedding_norm_head() {
        let m = Model::build(&small(BlockKind::Mamba1, 0), 2).unwrap();
        let toks = tokens(5);
        let logits = m.forward(&toks).unwrap();
        for (t, &tok) in toks.iter().enumerate() {
            let x = m.embedding.lookup(tok).unwrap();
            let expect = m.head.apply_row(&m.final_norm.apply_row(&x));
            assert!(max_diff(logits.row(t), &expect) < 1e-5);
        }
    }

    #[test]
    fn removing_a_block_equals_omitting_it() {
        let d = hybrid();
        let full = Model::build(&d, 3).unwrap();
        for i in 0..d.n_blocks {
            let mut pruned = full.clone();
            let kind = if d.block_kinds[i].is_mamba() { StructureKind::MambaBlock } else { StructureKind::TransformerBlock };
            pruned.remove(StructureId::new(kind, i)).unwrap();
            let mut blocks = full.blocks.clone();
            blocks.remove(i);
            let mut kinds = d.block_kinds.clone();
            kinds.remove(i);
            let dd = ArchDescriptor { n_blocks: kinds.len(), block_kinds: kinds, ..d.clone() };
            let shorter = Model::from_parts(
                dd.clone(),
                full.embedding.clone(),
                blocks,
                full.final_norm.clone(),
                full.head.clone(),
                Liveness::dense(&dd),
                full.dense_param_count(),
            )
            .unwrap();
            let a = pruned.forward(&tokens(9)).unwrap();
            let b = shorter.forward(&tokens(9)).unwrap();
            assert_eq!(a, b, "block {i}");
        }
    }

    #[test]
    fn ssm_removal_is_passthrough() {
        let d = small(BlockKind::Mamba1, 1);
        let mut m = Model::build(&d, 4).unwrap();
        m.remove(StructureId::new(StructureKind::SsmModule, 0)).unwrap();
        let Block::Mamba(b) = &m.blocks[0] else { unreachable!() };
        let toks = tokens(6);
        let logits = m.forward(&toks).unwrap();
        // reconstruct: x + out_proj(conv-silu(x_a) ⊙ silu(z)) with eager layers
        let di = d.d_inner();
        let mut window = Vec::new();
        for (t, &tok) in toks.iter().enumerate() {
            let x = m.embedding.lookup(tok).unwrap();
            let h = b.in_proj.apply_row(&b.norm.apply_row(&x));
            let (xa, z) = h.split_at(di);
            let conv = b.conv.step(&mut window, xa);
            let gated: Vec<f32> = conv
                .iter()
                .zip(z)
                .map(|(&c, &z)| crate::numerics::kernels::silu(c) * crate::numerics::kernels::silu(z))
                .collect();
            let out = b.out_proj.apply_row(&gated);
            let y: Vec<f32> = x.iter().zip(&out).map(|(a, b)| a + b).collect();
            let expect = m.head.apply_row(&m.final_norm.apply_row(&y));
            assert!(max_diff(logits.row(t), &expect) < 1e-4, "t={t}");
        }
    }

    #[test]
    fn removal_errors() {
        let mut m = Model::build(&hybrid(), 5).unwrap();
        let id = StructureId::new(StructureKind::MhaModule, 1);
        m.remove(id).unwrap();
        assert!(matches!(m.remove(id), Err(Error::State(_))));
        assert!(m.remove(StructureId::new(StructureKind::SsmModule, 1)).is_err());
        assert!(m.remove(StructureId::new(StructureKind::MambaBlock, 99)).is_err());
        assert!(matches!(m.slice_mlp(3, 33), Err(Error::Capacity { available: 32, requested: 33, .. })));
        m.remove(StructureId::new(StructureKind::TransformerBlock, 3)).unwrap();
        assert!(m.slice_mlp(3, 1).is_err());
        // a removed block takes its sub-structures with it
        assert!(!m.liveness().is_alive(StructureId::new(StructureKind::MlpModule, 3)));
    }

    #[test]
    fn slicing_algebra() {
        let d = hybrid();
        let base = Model::build(&d, 6).unwrap();
        let toks = tokens(8);

        let mut full_slice = base.clone();
        full_slice.slice_mlp(1, 32).unwrap();
        let mut removed = base.clone();
        removed.remove(StructureId::new(StructureKind::MlpModule, 1)).unwrap();
        assert!(max_diff(full_slice.forward(&toks).unwrap().data(), removed.forward(&toks).unwrap().data()) <= 1e-6);
        // a zero-width MLP still owns its norm scale
        assert_eq!(full_slice.alive_param_count(), removed.alive_param_count() + d.mlp_params(0));

        let mut twice = base.clone();
        twice.slice_mlp(3, 2).unwrap();
        twice.slice_mlp(3, 2).unwrap();
        let mut once = base.clone();
        once.slice_mlp(3, 4).unwrap();
        assert_eq!(twice, once);
        assert_eq!(once.liveness().blocks[3].mlp_width, 28);
        assert_eq!(
            base.alive_param_count() - once.alive_param_count(),
            4 * 3 * d.d_model,
            "each channel owns one row of up and gate and one column of down"
        );
    }

    #[test]
    fn prune_ratio_counts_whole_model() {
        let d = small(BlockKind::Mamba1, 4);
        let mut m = Model::build(&d, 7).unwrap();
        m.remove(StructureId::new(StructureKind::MambaBlock, 2)).unwrap();
        let expect = d.block_params(BlockKind::Mamba1) as f64 / count_oracle(&d) as f64;
        assert!((m.prune_ratio() - expect).abs() < 1e-12);
        m.remove(StructureId::new(StructureKind::SsmModule, 0)).unwrap();
        let expect = (d.block_params(BlockKind::Mamba1) + d.ssm_params(BlockKind::Mamba1)) as f64 / count_oracle(&d) as f64;
        assert!((m.prune_ratio() - expect).abs() < 1e-12);
        // removing an SSM inside an already removed block is an error, not a double count
        assert!(m.remove(StructureId::new(StructureKind::SsmModule, 2)).is_err());
    }

    #[test]
    fn registry_is_complete() {
        let m = Model::build(&hybrid(), 8).unwrap();
        let reg = m.registry();
        let d = m.descriptor();
        let listed: usize = reg.iter().map(|s| s.param_count).sum();
        assert_eq!(listed + d.shared_params(), m.stored_param_count());
        assert!(reg.iter().all(|s| s.alive));
        let mut owned = std::collections::BTreeMap::new();
        for (name, t) in m.named_params() {
            match m.owner_of(&name) {
                Some(id) => *owned.entry(id).or_insert(0) += t.numel(),
                None => assert!(["embedding.table", "final_norm.scale", "head.weight"].contains(&name.as_str())),
            }
        }
        for s in &reg {
            assert_eq!(owned.get(&s.id).copied().unwrap_or(0), s.param_count, "{}", s.id);
        }
        let mut sorted = reg.clone();
        sorted.sort_by_key(|s| s.id);
        assert_eq!(sorted, reg);
    }

    #[test]
    fn candidates_follow_liveness() {
        let mut m = Model::build(&hybrid(), 9).unwrap();
        let blocks = m.candidates(m.liveness(), StructureKind::MambaBlock, 0);
        assert_eq!(blocks.iter().map(|s| s.block).collect::<Vec<_>>(), vec![0, 2, 4]);
        m.remove(StructureId::new(StructureKind::MambaBlock, 2)).unwrap();
        let ssm = m.candidates(m.liveness(), StructureKind::SsmModule, 0);
        assert_eq!(ssm.iter().map(|s| s.block).collect::<Vec<_>>(), vec![0, 4]);
        m.slice_mlp(1, 30).unwrap();
        let groups = m.candidates(m.liveness(), StructureKind::MlpChannelGroup, 4);
        assert_eq!(groups.iter().map(|s| s.block).collect::<Vec<_>>(), vec![3]);
    }

    #[test]
    fn compaction_preserves_logits() {
        let d = hybrid();
        let mut m = Model::build(&d, 10).unwrap();
        m.remove(StructureId::new(StructureKind::MambaBlock, 0)).unwrap();
        m.remove(StructureId::new(StructureKind::SsmModule, 2)).unwrap();
        m.remove(StructureId::new(StructureKind::MhaModule, 1)).unwrap();
        m.slice_mlp(3, 8).unwrap();
        let c = m.compact().unwrap();
        assert_eq!(c.descriptor().n_blocks, 4);
        assert_eq!(c.stored_param_count(), m.alive_param_count());
        assert_eq!(c.alive_param_count(), m.alive_param_count());
        assert!((c.prune_ratio() - m.prune_ratio()).abs() < 1e-12);
        let toks = tokens(12);
        let a = m.forward(&toks).unwrap();
        let b = c.forward(&toks).unwrap();
        assert!(max_diff(a.data(), b.data()) <= 1e-6);
    }

    #[test]
    fn decode_matches_prefill() {
        for d in [small(BlockKind::Mamba1, 2), hybrid()] {
            let mut m = Model::build(&d, 11).unwrap();
            m.remove(StructureId::new(StructureKind::SsmModule, 0)).unwrap();
            let toks = tokens(16);
            let batch = m.forward(&toks).unwrap();
            let mut st = m.new_decode_state();
            for (t, &tok) in toks.iter().enumerate() {
                let step = m.decode_step(&mut st, tok).unwrap();
                let err = max_diff(&step, batch.row(t));
                assert!(err <= 1e-4, "{:?} t={t}: {err}", d.block_kinds);
            }
        }
    }

    #[test]
    fn out_of_vocab_tokens_are_rejected() {
        let m = Model::build(&small(BlockKind::Mamba1, 1), 12).unwrap();
        assert!(matches!(m.forward(&[1, 96]), Err(Error::Input { token: 96, .. })));
        let mut st = m.new_decode_state();
        m.decode_step(&mut st, 3).unwrap();
        assert!(matches!(m.decode_step(&mut st, 500), Err(Error::Input { position: 1, token: 500, .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = Model::build(&hybrid(), 13).unwrap();
        let meta = serde_json::json!({"seed": 13});
        let bytes = checkpoint::to_bytes(&m, Some(&meta)).unwrap();
        let (back, meta2) = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, Some(meta));
        assert_eq!(checkpoint::to_bytes(&back, meta2.as_ref()).unwrap(), bytes);

        m.remove(StructureId::new(StructureKind::MhaModule, 3)).unwrap();
        m.slice_mlp(1, 4).unwrap();
        let c = m.compact().unwrap();
        for model in [&m, &c] {
            let bytes = checkpoint::to_bytes(model, None).unwrap();
            let (back, meta) = checkpoint::from_bytes(&bytes).unwrap();
            assert!(meta.is_none());
            assert_eq!(&back, model);
            assert_eq!(back.forward(&tokens(5)).unwrap(), model.forward(&tokens(5)).unwrap());
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        checkpoint::save(&c, &path, None).unwrap();
        assert_eq!(checkpoint::load(&path).unwrap().0, c);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = Model::build(&small(BlockKind::Mamba2, 1), 14).unwrap();
        let bytes = checkpoint::to_bytes(&m, None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn descriptor_json_rejects_unknown_fields() {
        let d = hybrid();
        assert_eq!(ArchDescriptor::from_json(&d.to_json()).unwrap(), d);
        let mut v: serde_json::Value = serde_json::from_str(&d.to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(ArchDescriptor::from_json(&v.to_string()).is_err());
        let bad = ArchDescriptor { n_blocks: 7, ..d };
        assert!(matches!(Model::build(&bad, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn structure_kind_parsing() {
        for k in StructureKind::ALL {
            assert_eq!(k.name().parse::<StructureKind>().unwrap(), k);
        }
        assert_eq!("ssm".parse::<StructureKind>().unwrap(), StructureKind::SsmModule);
        assert!("nope".parse::<StructureKind>().is_err());
        assert_eq!(StructureId::new(StructureKind::MhaModule, 3).to_string(), "MhaModule[3]");
    }
}
