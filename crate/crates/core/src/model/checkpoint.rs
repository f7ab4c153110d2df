//! Binary checkpoint format. All integers little-endian.
//!
//! ```text
//! magic        8 bytes   "SSMSHED\0"
//! version      u32       1
//! dense_params u64       parameter count of the unpruned model
//! desc         u32 len + UTF-8 JSON ArchDescriptor
//! n_blocks     u32
//!   per block  u8 flags (1 block, 2 ssm, 4 mha, 8 mlp alive) + u32 mlp width
//! meta         u32 len + UTF-8 JSON provenance (empty when absent)
//! n_tensors    u32
//!   per tensor u32 name len + name, u32 ndim, u32 dims..., f32 data (row-major)
//! ```
//!
//! Tensors of physically removed structures are simply absent.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{CausalConv1d, Embedding, GatedMlp, Linear, MultiHeadAttention, RmsNorm};
use crate::numerics::Tensor;
use crate::ssm::SsmParams;

use super::{
    ArchDescriptor, AttnSub, Block, BlockKind, BlockLiveness, Liveness, MambaBlock, MlpSub, Model, TransformerBlock,
};

pub const MAGIC: &[u8; 8] = b"SSMSHED\0";
pub const VERSION: u32 = 1;

pub fn save(model: &Model, path: impl AsRef<Path>, meta: Option<&serde_json::Value>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Model, Option<serde_json::Value>)> {
    from_bytes(&fs::read(path)?)
}

pub fn to_bytes(model: &Model, meta: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.dense_param_count() as u64).to_le_bytes());
    put_str(&mut out, &model.descriptor().to_json());
    let live = model.liveness();
    put_u32(&mut out, live.blocks.len());
    for b in &live.blocks {
        let flags = b.block as u8 | (b.ssm as u8) << 1 | (b.mha as u8) << 2 | (b.mlp as u8) << 3;
        out.push(flags);
        put_u32(&mut out, b.mlp_width);
    }
    let meta = match meta {
        Some(m) => serde_json::to_string(m)?,
        None => String::new(),
    };
    put_str(&mut out, &meta);
    let params = model.named_params();
    put_u32(&mut out, params.len());
    for (name, t) in params {
        put_str(&mut out, &name);
        put_u32(&mut out, t.ndim());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(Model, Option<serde_json::Value>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let dense_params = r.u64()? as usize;
    let desc = ArchDescriptor::from_json(&r.string()?)?;
    let n_blocks = r.u32()?;
    let mut live = Liveness { blocks: Vec::with_capacity(n_blocks) };
    for _ in 0..n_blocks {
        let flags = r.u8()?;
        let mlp_width = r.u32()?;
        live.blocks.push(BlockLiveness {
            block: flags & 1 != 0,
            ssm: flags & 2 != 0,
            mha: flags & 4 != 0,
            mlp: flags & 8 != 0,
            mlp_width,
        });
    }
    let meta = r.string()?;
    let meta = if meta.is_empty() { None } else { Some(serde_json::from_str(&meta)?) };
    let n_tensors = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let model = assemble(desc, live, dense_params, tensors)?;
    Ok((model, meta))
}

struct Store(BTreeMap<String, Tensor>);

impl Store {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear> {
        let w = self.take(&format!("{prefix}.weight"))?;
        let b = self.0.remove(&format!("{prefix}.bias"));
        Linear::new(w, b)
    }

    fn norm(&mut self, prefix: &str) -> Result<RmsNorm> {
        Ok(RmsNorm {
            scale: self.take(&format!("{prefix}.scale"))?,
        })
    }
}

fn assemble(desc: ArchDescriptor, live: Liveness, dense_params: usize, tensors: BTreeMap<String, Tensor>) -> Result<Model> {
    desc.validate()?;
    let mut st = Store(tensors);
    let embedding = Embedding {
        table: st.take("embedding.table")?,
    };
    let mut blocks = Vec::with_capacity(desc.n_blocks);
    for (i, &kind) in desc.block_kinds.iter().enumerate() {
        let p = format!("blocks.{i}");
        let bl = live
            .blocks
            .get(i)
            .ok_or_else(|| Error::Format(format!("no liveness entry for block {i}")))?;
        let block = match kind {
            BlockKind::Mamba1 | BlockKind::Mamba2 => {
                let ssm = if st.has(&format!("{p}.ssm.a_log")) {
                    let s = SsmParams {
                        a_log: st.take(&format!("{p}.ssm.a_log"))?,
                        x_to_b: st.linear(&format!("{p}.ssm.x_to_b"))?,
                        x_to_c: st.linear(&format!("{p}.ssm.x_to_c"))?,
                        x_to_dt: st.linear(&format!("{p}.ssm.x_to_dt"))?,
                        dt_bias: st.take(&format!("{p}.ssm.dt_bias"))?,
                        d_skip: st.take(&format!("{p}.ssm.d_skip"))?,
                    };
                    s.validate()?;
                    Some(s)
                } else {
                    None
                };
                if ssm.is_none() && bl.block && bl.ssm {
                    return Err(Error::Format(format!("{p}: SSM alive but tensors missing")));
                }
                Block::Mamba(MambaBlock {
                    norm: st.norm(&format!("{p}.norm"))?,
                    in_proj: st.linear(&format!("{p}.in_proj"))?,
                    conv: CausalConv1d {
                        kernel: st.take(&format!("{p}.conv.kernel"))?,
                        bias: st.take(&format!("{p}.conv.bias"))?,
                    },
                    ssm,
                    out_norm: if kind == BlockKind::Mamba2 {
                        Some(st.norm(&format!("{p}.out_norm"))?)
                    } else {
                        None
                    },
                    out_proj: st.linear(&format!("{p}.out_proj"))?,
                })
            }
            BlockKind::Transformer => {
                let attn = if st.has(&format!("{p}.attn.q.weight")) {
                    Some(AttnSub {
                        norm: st.norm(&format!("{p}.attn.norm"))?,
                        mha: MultiHeadAttention {
                            q: st.linear(&format!("{p}.attn.q"))?,
                            k: st.linear(&format!("{p}.attn.k"))?,
                            v: st.linear(&format!("{p}.attn.v"))?,
                            o: st.linear(&format!("{p}.attn.o"))?,
                            n_heads: desc.n_heads,
                        },
                    })
                } else {
                    None
                };
                let mlp = if st.has(&format!("{p}.mlp.up.weight")) {
                    Some(MlpSub {
                        norm: st.norm(&format!("{p}.mlp.norm"))?,
                        mlp: GatedMlp::from_parts(
                            st.linear(&format!("{p}.mlp.up"))?,
                            st.linear(&format!("{p}.mlp.gate"))?,
                            st.linear(&format!("{p}.mlp.down"))?,
                        )?,
                    })
                } else {
                    None
                };
                if bl.block && ((bl.mha && attn.is_none()) || (bl.mlp && mlp.is_none())) {
                    return Err(Error::Format(format!("{p}: alive sub-block without tensors")));
                }
                if let Some(m) = &mlp {
                    if bl.mlp && bl.mlp_width > m.mlp.intermediate() {
                        return Err(Error::Format(format!("{p}: MLP width exceeds stored channels")));
                    }
                }
                Block::Transformer(TransformerBlock { attn, mlp })
            }
        };
        blocks.push(block);
    }
    let final_norm = st.norm("final_norm")?;
    let head = st.linear("head")?;
    if let Some(extra) = st.0.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Model::from_parts(desc, embedding, blocks, final_norm, head, live, dense_params)
}
