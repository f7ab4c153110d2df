use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Binder, CausalConv1d, GatedMlp, KvCache, Linear, MultiHeadAttention, RmsNorm};
use crate::numerics::{Tape, Tensor, Var};
use crate::ssm::{scan_step, ScanState, SsmParams, StateMatrix};

use super::arch::{ArchDescriptor, BlockKind, BlockLiveness};

/// Mamba block: `out_proj(ssm(silu(conv(x))) ∘ silu(z))` where `x, z` come
/// from one input projection. Mamba-2 blocks normalize the gated product
/// before the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlock {
    pub norm: RmsNorm,
    pub in_proj: Linear,
    pub conv: CausalConv1d,
    /// `None` once physically removed.
    pub ssm: Option<SsmParams>,
    pub out_norm: Option<RmsNorm>,
    pub out_proj: Linear,
}

/// Attention residual sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSub {
    pub norm: RmsNorm,
    pub mha: MultiHeadAttention,
}

/// MLP residual sub-block.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSub {
    pub norm: RmsNorm,
    pub mlp: GatedMlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub attn: Option<AttnSub>,
    pub mlp: Option<MlpSub>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Mamba(MambaBlock),
    Transformer(TransformerBlock),
}

/// Per-block decode state.
#[derive(Clone, Debug)]
pub enum BlockState {
    Mamba {
        window: Vec<Vec<f32>>,
        scan: Option<ScanState>,
    },
    Transformer {
        kv: KvCache,
    },
}

impl MambaBlock {
    pub fn init<R: Rng + ?Sized>(desc: &ArchDescriptor, kind: BlockKind, out_gain: f32, rng: &mut R) -> Self {
        let (d, di) = (desc.d_model, desc.d_inner());
        let matrix = if kind == BlockKind::Mamba2 {
            StateMatrix::ScalarIdentity
        } else {
            StateMatrix::Diagonal
        };
        Self {
            norm: RmsNorm::new(d),
            in_proj: Linear::init(d, 2 * di, false, 1.0, rng),
            conv: CausalConv1d::init(di, desc.conv_width, rng),
            ssm: Some(SsmParams::init(di, desc.ssm_state, matrix, rng)),
            out_norm: (kind == BlockKind::Mamba2).then(|| RmsNorm::new(di)),
            out_proj: Linear::init(di, d, false, out_gain, rng),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.conv.channels()
    }

    /// Residual-branch output (before the skip connection is added).
    pub fn branch(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var, ssm_alive: bool, seq_len: usize) -> Result<Var> {
        let di = self.d_inner();
        let h = self.norm.forward(tape, binder, &format!("{prefix}.norm"), x)?;
        let xz = self.in_proj.forward(tape, binder, &format!("{prefix}.in_proj"), h)?;
        let xs = tape.slice_cols(xz, 0, di)?;
        let z = tape.slice_cols(xz, di, di)?;
        let xc = self.conv.forward(tape, binder, &format!("{prefix}.conv"), xs, seq_len)?;
        let xa = tape.silu(xc);
        let y = if ssm_alive {
            let ssm = self.ssm.as_ref().ok_or_else(|| Error::State(format!("{prefix}: SSM marked alive but absent")))?;
            ssm.forward(tape, binder, &format!("{prefix}.ssm"), xa, seq_len)?
        } else {
            xa
        };
        let gz = tape.silu(z);
        let mut g = tape.mul(y, gz)?;
        if let Some(norm) = &self.out_norm {
            g = norm.forward(tape, binder, &format!("{prefix}.out_norm"), g)?;
        }
        self.out_proj.forward(tape, binder, &format!("{prefix}.out_proj"), g)
    }

    pub fn step(&self, window: &mut Vec<Vec<f32>>, scan: &mut Option<ScanState>, ssm_alive: bool, x: &[f32]) -> Result<Vec<f32>> {
        let di = self.d_inner();
        let h = self.norm.apply_row(x);
        let xz = self.in_proj.apply_row(&h);
        let (xs, z) = xz.split_at(di);
        let xc = self.conv.step(window, xs);
        let xa: Vec<f32> = xc.iter().map(|&v| crate::numerics::kernels::silu(v)).collect();
        let y = if ssm_alive {
            let ssm = self.ssm.as_ref().ok_or_else(|| Error::State("SSM marked alive but absent".into()))?;
            let state = scan.get_or_insert_with(|| ScanState::zeros(ssm.channels(), ssm.state_size()));
            let (y, next) = scan_step(ssm, state, &xa)?;
            *state = next;
            y
        } else {
            xa
        };
        let mut g: Vec<f32> = y.iter().zip(z).map(|(&y, &z)| y * crate::numerics::kernels::silu(z)).collect();
        if let Some(norm) = &self.out_norm {
            g = norm.apply_row(&g);
        }
        Ok(self.out_proj.apply_row(&g))
    }

    pub fn visit_shell<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        self.conv.visit(&format!("{prefix}.conv"), f);
        if let Some(n) = &self.out_norm {
            n.visit(&format!("{prefix}.out_norm"), f);
        }
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }

    pub fn visit_shell_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.in_proj.visit_mut(&format!("{prefix}.in_proj"), f);
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        if let Some(n) = &mut self.out_norm {
            n.visit_mut(&format!("{prefix}.out_norm"), f);
        }
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }
}

impl TransformerBlock {
    pub fn init<R: Rng + ?Sized>(desc: &ArchDescriptor, out_gain: f32, rng: &mut R) -> Result<Self> {
        let d = desc.d_model;
        Ok(Self {
            attn: Some(AttnSub {
                norm: RmsNorm::new(d),
                mha: MultiHeadAttention::init(d, desc.n_heads, out_gain, rng)?,
            }),
            mlp: Some(MlpSub {
                norm: RmsNorm::new(d),
                mlp: GatedMlp::init(d, desc.mlp_intermediate, out_gain, rng),
            }),
        })
    }

    /// Physical MLP width, zero when the MLP is absent.
    pub fn mlp_width(&self) -> usize {
        self.mlp.as_ref().map_or(0, |m| m.mlp.intermediate())
    }
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Mamba(m) if m.out_norm.is_some() => BlockKind::Mamba2,
            Block::Mamba(_) => BlockKind::Mamba1,
            Block::Transformer(_) => BlockKind::Transformer,
        }
    }

    /// `x + f(norm(x))` for every alive residual branch of this block.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var, live: &BlockLiveness, seq_len: usize) -> Result<Var> {
        if !live.block {
            return Ok(x);
        }
        match self {
            Block::Mamba(m) => {
                let out = m.branch(tape, binder, prefix, x, live.ssm, seq_len)?;
                tape.add(x, out)
            }
            Block::Transformer(t) => {
                let mut x = x;
                if live.mha {
                    let a = t.attn.as_ref().ok_or_else(|| Error::State(format!("{prefix}: MHA alive but absent")))?;
                    let h = a.norm.forward(tape, binder, &format!("{prefix}.attn.norm"), x)?;
                    let out = a.mha.forward(tape, binder, &format!("{prefix}.attn"), h, seq_len)?;
                    x = tape.add(x, out)?;
                }
                if live.mlp && live.mlp_width > 0 {
                    let m = t.mlp.as_ref().ok_or_else(|| Error::State(format!("{prefix}: MLP alive but absent")))?;
                    if live.mlp_width > m.mlp.intermediate() {
                        return Err(Error::State(format!(
                            "{prefix}: overlay width {} exceeds physical width {}",
                            live.mlp_width,
                            m.mlp.intermediate()
                        )));
                    }
                    let h = m.norm.forward(tape, binder, &format!("{prefix}.mlp.norm"), x)?;
                    let out = m.mlp.forward(tape, binder, &format!("{prefix}.mlp"), h, Some(live.mlp_width))?;
                    x = tape.add(x, out)?;
                }
                Ok(x)
            }
        }
    }

    pub fn new_state(&self) -> BlockState {
        match self {
            Block::Mamba(_) => BlockState::Mamba {
                window: Vec::new(),
                scan: None,
            },
            Block::Transformer(_) => BlockState::Transformer { kv: KvCache::default() },
        }
    }

    pub fn step(&self, state: &mut BlockState, live: &BlockLiveness, x: &mut [f32]) -> Result<()> {
        if !live.block {
            return Ok(());
        }
        match (self, state) {
            (Block::Mamba(m), BlockState::Mamba { window, scan }) => {
                let out = m.step(window, scan, live.ssm, x)?;
                x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
            }
            (Block::Transformer(t), BlockState::Transformer { kv }) => {
                if live.mha {
                    let a = t.attn.as_ref().ok_or_else(|| Error::State("MHA alive but absent".into()))?;
                    let out = a.mha.step(kv, &a.norm.apply_row(x));
                    x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
                }
                if live.mlp && live.mlp_width > 0 {
                    let m = t.mlp.as_ref().ok_or_else(|| Error::State("MLP alive but absent".into()))?;
                    let h = m.norm.apply_row(x);
                    let out = if live.mlp_width < m.mlp.intermediate() {
                        m.mlp.narrowed(live.mlp_width)?.apply_row(&h)
                    } else {
                        m.mlp.apply_row(&h)
                    };
                    x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
                }
            }
            _ => return Err(Error::State("decode state does not match block kind".into())),
        }
        Ok(())
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Block::Mamba(m) => {
                m.visit_shell(prefix, f);
                if let Some(s) = &m.ssm {
                    s.visit(&format!("{prefix}.ssm"), f);
                }
            }
            Block::Transformer(t) => {
                if let Some(a) = &t.attn {
                    a.norm.visit(&format!("{prefix}.attn.norm"), f);
                    a.mha.visit(&format!("{prefix}.attn"), f);
                }
                if let Some(m) = &t.mlp {
                    m.norm.visit(&format!("{prefix}.mlp.norm"), f);
                    m.mlp.visit(&format!("{prefix}.mlp"), f);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Block::Mamba(m) => {
                m.visit_shell_mut(prefix, f);
                if let Some(s) = &mut m.ssm {
                    s.visit_mut(&format!("{prefix}.ssm"), f);
                }
            }
            Block::Transformer(t) => {
                if let Some(a) = &mut t.attn {
                    a.norm.visit_mut(&format!("{prefix}.attn.norm"), f);
                    a.mha.visit_mut(&format!("{prefix}.attn"), f);
                }
                if let Some(m) = &mut t.mlp {
                    m.norm.visit_mut(&format!("{prefix}.mlp.norm"), f);
                    m.mlp.visit_mut(&format!("{prefix}.mlp"), f);
                }
            }
        }
    }
}
