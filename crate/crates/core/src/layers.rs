//! Building blocks shared by every architecture: linear maps, RMS
//! normalization, depthwise causal convolution, gated MLP, causal multi-head
//! attention and the token embedding.
//!
//! Each layer has a tape forward (`forward`) operating on `[rows × width]`
//! activations, where rows are `batch` sequences of `seq_len` tokens laid out
//! back to back, and a single-token decode path operating on plain slices.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{kernels, CustomOp, Tape, Tensor, Var};

pub const RMS_EPS: f64 = 1e-5;
pub const DEFAULT_CONV_WIDTH: usize = 4;

/// Maps named parameters onto tape leaves. In training mode every bound
/// tensor collects gradients and is remembered by name.
#[derive(Debug, Default)]
pub struct Binder {
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl Binder {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training() -> Self {
        Self {
            trainable: true,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> Var {
        if self.trainable {
            let v = tape.param(t);
            self.bound.push((name.to_string(), v));
            v
        } else {
            tape.constant(t.clone())
        }
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Uniform in `±1/sqrt(in)`, scaled by `gain`.
    pub fn init<R: Rng + ?Sized>(inp: usize, out: usize, bias: bool, gain: f32, rng: &mut R) -> Self {
        let bound = gain / (inp as f32).sqrt();
        Self {
            weight: Tensor::uniform([out, inp], -bound, bound, rng),
            bias: bias.then(|| Tensor::zeros([out])),
        }
    }

    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if weight.ndim() != 2 {
            return Err(Error::Contract(format!("linear weight must be a matrix, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(dim_err("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let w = binder.bind(tape, &join(prefix, "weight"), &self.weight);
        let b = self.bias.as_ref().map(|b| binder.bind(tape, &join(prefix, "bias"), b));
        tape.linear(x, w, b)
    }

    pub fn apply_row(&self, x: &[f32]) -> Vec<f32> {
        let mut y = kernels::matvec(self.weight.data(), x, self.out_features());
        if let Some(b) = &self.bias {
            y.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
        y
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// RMS normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RmsNorm {
    pub scale: Tensor,
}

impl RmsNorm {
    pub fn new(d: usize) -> Self {
        Self {
            scale: Tensor::full([d], 1.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let s = binder.bind(tape, &join(prefix, "scale"), &self.scale);
        rmsnorm(tape, x, s)
    }

    pub fn apply_row(&self, x: &[f32]) -> Vec<f32> {
        let inv = inv_rms(x);
        x.iter()
            .zip(self.scale.data())
            .map(|(&v, &s)| (v as f64 * inv) as f32 * s)
            .collect()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "scale"), &self.scale);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "scale"), &mut self.scale);
    }
}

fn inv_rms(row: &[f32]) -> f64 {
    let ms = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// `x / sqrt(mean(x²) + ε) ∘ scale`, row-wise.
pub fn rmsnorm(tape: &mut Tape, x: Var, scale: Var) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    if tape.value(scale).shape() != [d] {
        return Err(dim_err("rmsnorm", tape.shape(x), tape.shape(scale)));
    }
    let xs = tape.value(x);
    let sc = tape.value(scale).data();
    let mut out = Vec::with_capacity(xs.numel());
    for row in xs.data().chunks_exact(d) {
        let inv = inv_rms(row);
        out.extend(row.iter().zip(sc).map(|(&v, &s)| (v as f64 * inv) as f32 * s));
    }
    let out = Tensor::new(xs.shape().to_vec(), out)?;
    Ok(tape.custom(&[x, scale], out, Box::new(RmsNormOp)))
}

struct RmsNormOp;

impl CustomOp for RmsNormOp {
    fn name(&self) -> &'static str {
        "rmsnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let (x, scale) = (inputs[0], inputs[1].data());
        let d = scale.len();
        let mut gx = vec![0.0f32; x.numel()];
        let mut gs = vec![0.0f64; d];
        for ((row, grow), gxr) in x.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
            let inv = inv_rms(row);
            let mut dot = 0.0f64;
            for j in 0..d {
                let xhat = row[j] as f64 * inv;
                let gxhat = grow[j] as f64 * scale[j] as f64;
                gs[j] += grow[j] as f64 * xhat;
                dot += gxhat * xhat;
            }
            let mean = dot / d as f64;
            for j in 0..d {
                let xhat = row[j] as f64 * inv;
                let gxhat = grow[j] as f64 * scale[j] as f64;
                gxr[j] = (inv * (gxhat - xhat * mean)) as f32;
            }
        }
        Ok(vec![Some(gx), Some(gs.into_iter().map(|v| v as f32).collect())])
    }
}

// ---------------------------------------------------------------------------
// Depthwise causal convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct CausalConv1d {
    /// `[channels × width]`; tap `width − 1` multiplies the current token.
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl CausalConv1d {
    pub fn init<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f32).sqrt();
        Self {
            kernel: Tensor::uniform([channels, width], -bound, bound, rng),
            bias: Tensor::zeros([channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var, seq_len: usize) -> Result<Var> {
        let k = binder.bind(tape, &join(prefix, "kernel"), &self.kernel);
        let b = binder.bind(tape, &join(prefix, "bias"), &self.bias);
        causal_conv(tape, x, k, b, seq_len)
    }

    /// One decode step; `window` holds the previous `width − 1` inputs, oldest
    /// first.
    pub fn step(&self, window: &mut Vec<Vec<f32>>, x: &[f32]) -> Vec<f32> {
        let (c, w) = (self.channels(), self.width());
        window.push(x.to_vec());
        while window.len() > w {
            window.remove(0);
        }
        let kern = self.kernel.data();
        let offset = w - window.len();
        let mut y = vec![0.0f32; c];
        for ch in 0..c {
            let mut acc = self.bias.data()[ch] as f64;
            for (j, past) in window.iter().enumerate() {
                acc += kern[ch * w + offset + j] as f64 * past[ch] as f64;
            }
            y[ch] = acc as f32;
        }
        if window.len() == w {
            window.remove(0);
        }
        y
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `y[t,c] = bias[c] + Σ_j kernel[c,j] · x[t − (w−1) + j, c]`, zero-padded at
/// the start of every sequence.
pub fn causal_conv(tape: &mut Tape, x: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
    let (rows, c) = tape.value(x).dims2()?;
    let (kc, w) = tape.value(kernel).dims2()?;
    if kc != c || tape.value(bias).numel() != c {
        return Err(dim_err("causal_conv", tape.shape(x), tape.shape(kernel)));
    }
    check_seq(rows, seq_len)?;
    let xs = tape.value(x).data();
    let ks = tape.value(kernel).data();
    let bs = tape.value(bias).data();
    let mut out = vec![0.0f32; rows * c];
    for s in 0..rows / seq_len {
        let base = s * seq_len;
        for t in 0..seq_len {
            let orow = &mut out[(base + t) * c..(base + t + 1) * c];
            for ch in 0..c {
                let mut acc = bs[ch] as f64;
                for j in 0..w {
                    let back = w - 1 - j;
                    if back <= t {
                        acc += ks[ch * w + j] as f64 * xs[(base + t - back) * c + ch] as f64;
                    }
                }
                orow[ch] = acc as f32;
            }
        }
    }
    let out = Tensor::new([rows, c], out)?;
    Ok(tape.custom(&[x, kernel, bias], out, Box::new(ConvOp { seq_len })))
}

struct ConvOp {
    seq_len: usize,
}

impl CustomOp for ConvOp {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let (x, k) = (inputs[0], inputs[1]);
        let (rows, c) = x.dims2()?;
        let (_, w) = k.dims2()?;
        let (xs, ks) = (x.data(), k.data());
        let mut gx = vec![0.0f32; rows * c];
        let mut gk = vec![0.0f64; c * w];
        let mut gb = vec![0.0f64; c];
        let t_len = self.seq_len;
        for s in 0..rows / t_len {
            let base = s * t_len;
            for t in 0..t_len {
                for ch in 0..c {
                    let gy = g[(base + t) * c + ch];
                    gb[ch] += gy as f64;
                    for j in 0..w {
                        let back = w - 1 - j;
                        if back <= t {
                            let src = (base + t - back) * c + ch;
                            gk[ch * w + j] += gy as f64 * xs[src] as f64;
                            gx[src] += gy * ks[ch * w + j];
                        }
                    }
                }
            }
        }
        Ok(vec![
            Some(gx),
            Some(gk.into_iter().map(|v| v as f32).collect()),
            Some(gb.into_iter().map(|v| v as f32).collect()),
        ])
    }
}

pub(crate) fn check_seq(rows: usize, seq_len: usize) -> Result<()> {
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::Contract(format!(
            "{rows} rows do not split into sequences of length {seq_len}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gated MLP
// ---------------------------------------------------------------------------

/// `down(silu(gate(x)) ∘ up(x))` with intermediate width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedMlp {
    pub up: Linear,
    pub gate: Linear,
    pub down: Linear,
}

impl GatedMlp {
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, out_gain: f32, rng: &mut R) -> Self {
        Self {
            up: Linear::init(d, hidden, false, 1.0, rng),
            gate: Linear::init(d, hidden, false, 1.0, rng),
            down: Linear::init(hidden, d, false, out_gain, rng),
        }
    }

    pub fn from_parts(up: Linear, gate: Linear, down: Linear) -> Result<Self> {
        let m = Self { up, gate, down };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let d = self.intermediate();
        if self.gate.out_features() != d || self.down.in_features() != d || self.up.in_features() != self.gate.in_features() {
            return Err(dim_err("gated_mlp", self.up.weight.shape(), self.down.weight.shape()));
        }
        Ok(())
    }

    /// Current intermediate width `D`.
    pub fn intermediate(&self) -> usize {
        self.up.out_features()
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.gate.param_count() + self.down.param_count()
    }

    /// Parameters owned by `g` intermediate channels.
    pub fn channel_params(&self, g: usize) -> usize {
        g * (self.up.in_features() + self.gate.in_features() + self.down.out_features())
    }

    /// Drops the trailing `g` intermediate channels: rows of `up`/`gate`,
    /// columns of `down`.
    pub fn slice_trailing(&mut self, g: usize) -> Result<()> {
        let d = self.intermediate();
        if g > d {
            return Err(Error::Contract(format!("cannot slice {g} of {d} channels")));
        }
        *self = self.narrowed(d - g)?;
        Ok(())
    }

    /// Copy restricted to the first `width` channels.
    pub fn narrowed(&self, width: usize) -> Result<GatedMlp> {
        Ok(GatedMlp {
            up: Linear::new(self.up.weight.take_rows(width)?, None)?,
            gate: Linear::new(self.gate.weight.take_rows(width)?, None)?,
            down: Linear::new(self.down.weight.take_cols(width)?, None)?,
        })
    }

    /// Tape forward using only the first `width` channels (all when `None`).
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var, width: Option<usize>) -> Result<Var> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.up.in_features() {
            return Err(dim_err("gated_mlp", tape.shape(x), self.up.weight.shape()));
        }
        match width {
            Some(w) if w < self.intermediate() => {
                let narrow = self.narrowed(w)?;
                narrow.forward_full(tape, binder, prefix, x)
            }
            _ => self.forward_full(tape, binder, prefix, x),
        }
    }

    fn forward_full(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let u = self.up.forward(tape, binder, &join(prefix, "up"), x)?;
        let g = self.gate.forward(tape, binder, &join(prefix, "gate"), x)?;
        let g = tape.silu(g);
        let h = tape.mul(g, u)?;
        self.down.forward(tape, binder, &join(prefix, "down"), h)
    }

    pub fn apply_row(&self, x: &[f32]) -> Vec<f32> {
        let u = self.up.apply_row(x);
        let g = self.gate.apply_row(x);
        let h: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| kernels::silu(g) * u).collect();
        self.down.apply_row(&h)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.up.visit(&join(prefix, "up"), f);
        self.gate.visit(&join(prefix, "gate"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Eager gated-MLP forward on a `[T × d]` matrix.
pub fn gated_mlp_forward(m: &GatedMlp, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let mut binder = Binder::inference();
    let xv = tape.constant(x.clone());
    let y = m.forward(&mut tape, &mut binder, "", xv, None)?;
    Ok(tape.take(y))
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

/// Per-layer key/value cache for decoding.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

impl MultiHeadAttention {
    pub fn init<R: Rng + ?Sized>(d: usize, n_heads: usize, out_gain: f32, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Validation(vec![format!(
                "d_model {d} is not divisible by n_heads {n_heads}"
            )]));
        }
        Ok(Self {
            q: Linear::init(d, d, false, 1.0, rng),
            k: Linear::init(d, d, false, 1.0, rng),
            v: Linear::init(d, d, false, 1.0, rng),
            o: Linear::init(d, d, false, out_gain, rng),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.q.in_features()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.o.param_count()
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var, seq_len: usize) -> Result<Var> {
        let q = self.q.forward(tape, binder, &join(prefix, "q"), x)?;
        let k = self.k.forward(tape, binder, &join(prefix, "k"), x)?;
        let v = self.v.forward(tape, binder, &join(prefix, "v"), x)?;
        let a = causal_attention(tape, q, k, v, self.n_heads, seq_len)?;
        self.o.forward(tape, binder, &join(prefix, "o"), a)
    }

    pub fn step(&self, cache: &mut KvCache, x: &[f32]) -> Vec<f32> {
        let q = self.q.apply_row(x);
        cache.keys.push(self.k.apply_row(x));
        cache.values.push(self.v.apply_row(x));
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0f32; self.d_model()];
        let mut scores = vec![0.0f64; cache.keys.len()];
        for h in 0..self.n_heads {
            let r = h * hd..(h + 1) * hd;
            for (s, key) in scores.iter_mut().zip(&cache.keys) {
                *s = kernels::dot(&q[r.clone()], &key[r.clone()]) * scale;
            }
            softmax_in_place(&mut scores);
            for j in r.clone() {
                let acc: f64 = scores.iter().zip(&cache.values).map(|(p, v)| p * v[j] as f64).sum();
                out[j] = acc as f32;
            }
        }
        self.o.apply_row(&out)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

/// Eager attention forward on a single `[T × d]` sequence.
pub fn mha_forward(a: &MultiHeadAttention, x: &Tensor) -> Result<Tensor> {
    let (t, _) = x.dims2()?;
    if t == 0 {
        return Err(Error::Contract("attention needs at least one token".into()));
    }
    let mut tape = Tape::inference();
    let mut binder = Binder::inference();
    let xv = tape.constant(x.clone());
    let y = a.forward(&mut tape, &mut binder, "", xv, t)?;
    Ok(tape.take(y))
}

fn softmax_in_place(s: &mut [f64]) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    s.iter_mut().for_each(|v| *v /= z);
}

/// Causal softmax attention per head over `[rows × d]` projections.
pub fn causal_attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize, seq_len: usize) -> Result<Var> {
    let (rows, d) = tape.value(q).dims2()?;
    if tape.shape(k) != tape.shape(q) || tape.shape(v) != tape.shape(q) {
        return Err(dim_err("attention", tape.shape(q), tape.shape(k)));
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Contract(format!("{d} channels do not split into {n_heads} heads")));
    }
    check_seq(rows, seq_len)?;
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qs, ks, vs) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let keep = tape.is_recording();
    let n_seq = rows / seq_len;
    // probs[seq][head][i][j], lower triangle only meaningful
    let mut probs = if keep { vec![0.0f32; n_seq * n_heads * seq_len * seq_len] } else { Vec::new() };
    let mut out = vec![0.0f32; rows * d];
    let mut p = vec![0.0f64; seq_len];
    for s in 0..n_seq {
        let base = s * seq_len;
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..seq_len {
                let qi = &qs[(base + i) * d..][cols.clone()];
                for j in 0..=i {
                    let kj = &ks[(base + j) * d..][cols.clone()];
                    p[j] = kernels::dot(qi, kj) * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let orow = &mut out[(base + i) * d..][cols.clone()];
                for (c, o) in orow.iter_mut().enumerate() {
                    let acc: f64 = (0..=i).map(|j| p[j] * vs[(base + j) * d + h * hd + c] as f64).sum();
                    *o = acc as f32;
                }
                if keep {
                    let off = ((s * n_heads + h) * seq_len + i) * seq_len;
                    for j in 0..=i {
                        probs[off + j] = p[j] as f32;
                    }
                }
            }
        }
    }
    let out = Tensor::new([rows, d], out)?;
    Ok(tape.custom(
        &[q, k, v],
        out,
        Box::new(AttentionOp {
            n_heads,
            seq_len,
            probs,
        }),
    ))
}

struct AttentionOp {
    n_heads: usize,
    seq_len: usize,
    probs: Vec<f32>,
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let (qs, ks, vs) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (rows, d) = inputs[0].dims2()?;
        let (nh, tl) = (self.n_heads, self.seq_len);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = vec![0.0f32; rows * d];
        let mut gk = vec![0.0f32; rows * d];
        let mut gv = vec![0.0f32; rows * d];
        let mut gp = vec![0.0f64; tl];
        for s in 0..rows / tl {
            let base = s * tl;
            for h in 0..nh {
                let c0 = h * hd;
                for i in 0..tl {
                    let off = ((s * nh + h) * tl + i) * tl;
                    let p = &self.probs[off..off + i + 1];
                    let go = &g[(base + i) * d + c0..(base + i) * d + c0 + hd];
                    let mut inner = 0.0f64;
                    for j in 0..=i {
                        let vj = &vs[(base + j) * d + c0..(base + j) * d + c0 + hd];
                        gp[j] = kernels::dot(go, vj);
                        inner += p[j] as f64 * gp[j];
                        let gvj = &mut gv[(base + j) * d + c0..(base + j) * d + c0 + hd];
                        gvj.iter_mut().zip(go).for_each(|(a, b)| *a += p[j] * b);
                    }
                    for j in 0..=i {
                        let gs = (p[j] as f64 * (gp[j] - inner) * scale) as f32;
                        if gs == 0.0 {
                            continue;
                        }
                        for c in 0..hd {
                            gq[(base + i) * d + c0 + c] += gs * ks[(base + j) * d + c0 + c];
                            gk[(base + j) * d + c0 + c] += gs * qs[(base + i) * d + c0 + c];
                        }
                    }
                }
            }
        }
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn init<R: Rng + ?Sized>(vocab: usize, d: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::randn([vocab, d], 1.0, rng),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, ids: &[usize]) -> Result<Var> {
        let t = binder.bind(tape, &join(prefix, "table"), &self.table);
        tape.embedding(t, ids)
    }

    pub fn lookup(&self, id: usize) -> Result<Vec<f32>> {
        if id >= self.vocab() {
            return Err(Error::Input {
                position: 0,
                token: id,
                vocab: self.vocab(),
            });
        }
        Ok(self.table.row(id).to_vec())
    }
}

/// Eager RMS normalization of each row of `x`.
pub fn rmsnorm_forward(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let sv = tape.constant(scale.clone());
    let y = rmsnorm(&mut tape, xv, sv)?;
    Ok(tape.take(y))
}
