//! Recorded-graph reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the nodes once in reverse order and accumulates gradients into the
//! leaves that were registered with `requires_grad`.

use std::fmt;

use crate::error::{dim_err, Error, Result};

use super::kernels;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of an operation implemented outside the tape
/// (scan, attention, convolution, normalization).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in the order the inputs were recorded.
    /// `None` means "no gradient flows to this input".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f32]) -> Result<Vec<Option<Vec<f32>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Softplus,
    Exp,
    Neg,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Unary(_, x) | Op::SliceCols { x, .. } | Op::Sum(x) | Op::Mean(x) => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("recording", &self.recording)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records enough state to run `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape for inference: values only, no gradient caches.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take(self, v: Var) -> Tensor {
        let mut nodes = self.nodes;
        nodes.swap_remove(v.0).value
    }

    /// Registers a tensor; its `requires_grad` flag decides whether it collects
    /// gradients.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = self.recording && t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.zero_grad();
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let needs = self.needs(&op.inputs());
        let op = if needs { op } else { Op::Leaf };
        self.push(value, op, needs)
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.record(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 || self.value(a).ndim() != 2 || self.value(b).ndim() != 2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.record(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    /// `x[r×in] · w[out×in]ᵀ (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (r, inp) = self.value(x).dims2()?;
        let (out, win) = self.value(w).dims2()?;
        if inp != win {
            return Err(dim_err("linear", self.shape(x), self.shape(w)));
        }
        let mut y = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), r, inp, out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != out {
                return Err(dim_err("linear bias", self.shape(w), self.shape(b)));
            }
            for row in y.chunks_exact_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        Ok(self.record(Tensor::new([r, out], y)?, Op::Linear { x, w, b }))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(dim_err("elementwise", ta.shape(), tb.shape()));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let f = match kind {
            Binary::Add => |x: f32, y: f32| x + y,
            Binary::Sub => |x: f32, y: f32| x - y,
            Binary::Mul => |x: f32, y: f32| x * y,
        };
        let out: Vec<f32> = (0..n).map(|i| f(at(i), bt(i))).collect();
        Ok(self.record(Tensor::new(shape, out)?, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let t = self.value(x);
        let f: fn(f32) -> f32 = match kind {
            Unary::Silu => kernels::silu,
            Unary::Softplus => kernels::softplus,
            Unary::Exp => f32::exp,
            Unary::Neg => |v| -v,
            Unary::Sigmoid => kernels::sigmoid,
        };
        let out = Tensor::from_fn(t.shape().to_vec(), |i| f(t.data()[i]));
        self.record(out, Op::Unary(kind, x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.record(Tensor::new([r, len], out)?, Op::SliceCols { x, start }))
    }

    /// Row gather from `table[v×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Input {
                    position: pos,
                    token: id,
                    vocab: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.record(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.numel().max(1) as f64;
        self.record(Tensor::scalar(m as f32), Op::Mean(x))
    }

    /// Mean next-token negative log-likelihood of `logits[r×v]` against
    /// `targets[r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, v) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let keep = self.needs(&[logits]);
        let data = self.value(logits).data();
        let mut probs = if keep { Vec::with_capacity(r * v) } else { Vec::new() };
        let mut total = 0.0f64;
        for (row, &t) in data.chunks_exact(v).zip(targets) {
            if t >= v {
                return Err(Error::Contract(format!("target {t} outside vocabulary {v}")));
            }
            let (lse, max) = log_sum_exp(row);
            total += lse - row[t] as f64;
            if keep {
                probs.extend(row.iter().map(|&z| ((z as f64 - max).exp() / (lse - max).exp()) as f32));
            }
        }
        let loss = total / r.max(1) as f64;
        Ok(self.record(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar. Gradients accumulate into leaves across
    /// calls until the tape is dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    node.value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt_acc(g, val(*b).data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn_acc(val(*a).data(), g, m, k, n, &mut gb);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Linear { x, w, b } => {
                let (r, inp) = val(*x).dims2()?;
                let (o, _) = val(*w).dims2()?;
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![0.0; r * inp];
                    kernels::matmul_acc(g, val(*w).data(), r, o, inp, &mut gx);
                    out.push((*x, gx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut gw = vec![0.0; o * inp];
                    kernels::matmul_tn_acc(g, val(*x).data(), r, o, inp, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0f64; o];
                    for row in g.chunks_exact(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
                    }
                    out.push((*b, gb.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ga, gb): (Vec<f32>, Vec<f32>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => {
                        let at = |j: usize| if ta.numel() == 1 { ta.data()[0] } else { ta.data()[j] };
                        let bt = |j: usize| if tb.numel() == 1 { tb.data()[0] } else { tb.data()[j] };
                        (
                            g.iter().enumerate().map(|(j, v)| v * bt(j)).collect(),
                            g.iter().enumerate().map(|(j, v)| v * at(j)).collect(),
                        )
                    }
                };
                out.push((*a, reduce_broadcast(ga, ta.numel())));
                out.push((*b, reduce_broadcast(gb, tb.numel())));
            }
            Op::Unary(kind, x) => {
                let xs = val(*x).data();
                let ys = node.value.data();
                let gx = match kind {
                    Unary::Silu => g.iter().zip(xs).map(|(g, &x)| g * kernels::silu_grad(x)).collect(),
                    Unary::Softplus => g.iter().zip(xs).map(|(g, &x)| g * kernels::sigmoid(x)).collect(),
                    Unary::Exp => g.iter().zip(ys).map(|(g, y)| g * y).collect(),
                    Unary::Neg => g.iter().map(|g| -g).collect(),
                    Unary::Sigmoid => g.iter().zip(ys).map(|(g, y)| g * y * (1.0 - y)).collect(),
                };
                out.push((*x, gx));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; r * c];
                for (dst, src) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                out.push((*x, gx));
            }
            Op::Embedding { table, ids } => {
                let (v, d) = val(*table).dims2()?;
                let mut gt = vec![0.0; v * d];
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((*table, gt));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / n.max(1) as f32; n]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, v) = val(*logits).dims2()?;
                let scale = g[0] / r.max(1) as f32;
                let mut gl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    gl[row * v + t] -= scale;
                }
                out.push((*logits, gl));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn reduce_broadcast(g: Vec<f32>, numel: usize) -> Vec<f32> {
    if numel == 1 && g.len() != 1 {
        vec![g.iter().map(|&v| v as f64).sum::<f64>() as f32]
    } else {
        g
    }
}

/// `(log Σ exp(row), max(row))` in 64-bit.
pub fn log_sum_exp(row: &[f32]) -> (f64, f64) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let s: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
    (max + s.ln(), max)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::inference();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]));
        let b = tape.constant(Tensor::from_rows(&[[3.0], [4.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut r = rng();
        let a = Tensor::uniform([5, 7], -2.0, 2.0, &mut r).with_requires_grad();
        let b = Tensor::uniform([7, 3], -2.0, 2.0, &mut r).with_requires_grad();
        let w = Tensor::uniform([5, 3], -1.0, 1.0, &mut r);
        let reports = gradcheck::check(&[a, b, w], 1e-3, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.mul(y, v[2])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(reports.len(), 2);
        for r in reports {
            assert!(r.relative_error() < 1e-3, "input {} rel {}", r.input, r.relative_error());
        }
    }

    #[test]
    fn elementwise_closed_forms() {
        let mut tape = Tape::inference();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.silu(z);
        let p = tape.softplus(z);
        assert_eq!(tape.value(s).data()[0], 0.0);
        assert!((tape.value(p).data()[0] - std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn elementwise_rejects_incompatible_shapes() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        let s = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad());
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad());
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0]);
        // a second pass accumulates
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros([3]).with_requires_grad());
        let y = tape.exp(w);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let mut inf = Tape::inference();
        let w = inf.leaf(Tensor::zeros([1]).with_requires_grad());
        assert!(inf.backward(w).is_err());
    }

    #[test]
    fn two_layer_cross_entropy_gradients() {
        let mut r = rng();
        let x = Tensor::uniform([6, 5], -2.0, 2.0, &mut r);
        let w1 = Tensor::uniform([8, 5], -1.0, 1.0, &mut r).with_requires_grad();
        let b1 = Tensor::uniform([8], -0.5, 0.5, &mut r).with_requires_grad();
        let w2 = Tensor::uniform([4, 8], -1.0, 1.0, &mut r).with_requires_grad();
        let targets = [0usize, 3, 1, 2, 2, 0];
        let reports = gradcheck::check(&[x, w1, b1, w2], 1e-3, |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2]))?;
            let h = t.silu(h);
            let logits = t.linear(h, v[3], None)?;
            t.cross_entropy(logits, &targets)
        })
        .unwrap();
        assert_eq!(reports.len(), 3);
        for r in reports {
            assert!(r.relative_error() < 1e-3, "input {} rel {}", r.input, r.relative_error());
        }
    }

    #[test]
    fn slice_embedding_mean_gradients() {
        let mut r = rng();
        let table = Tensor::uniform([5, 6], -2.0, 2.0, &mut r).with_requires_grad();
        let wts = Tensor::uniform([4, 3], -1.0, 1.0, &mut r);
        let ids = [1usize, 4, 1, 0];
        let reports = gradcheck::check(&[table, wts], 1e-3, |t, v| {
            let e = t.embedding(v[0], &ids)?;
            let s = t.slice_cols(e, 2, 3)?;
            let y = t.mul(s, v[1])?;
            let n = t.neg(y);
            Ok(t.mean(n))
        })
        .unwrap();
        assert!(reports[0].relative_error() < 1e-3);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut r = rng();
        let a = Tensor::uniform([9, 11], -2.0, 2.0, &mut r);
        let b = Tensor::uniform([11, 4], -2.0, 2.0, &mut r);
        let run = || {
            let mut t = Tape::inference();
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.matmul(va, vb).unwrap();
            let y = t.softplus(y);
            t.take(y)
        };
        assert_eq!(run().data(), run().data());
    }

    fn unary_case(kind: Unary) -> impl Fn(&mut Tape, &[Var]) -> crate::Result<Var> {
        move |t, v| {
            let y = t.unary(kind, v[0]);
            let y = t.mul(y, v[1])?;
            Ok(t.sum(y))
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn unary_gradients_match_finite_differences(seed in 0u64..1000, which in 0usize..5) {
            let kind = [Unary::Silu, Unary::Softplus, Unary::Exp, Unary::Neg, Unary::Sigmoid][which];
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::uniform([12], -2.0, 2.0, &mut r).with_requires_grad();
            let w = Tensor::uniform([12], -1.0, 1.0, &mut r);
            let rep = gradcheck::check(&[x, w], 1e-3, unary_case(kind)).unwrap();
            prop_assert!(rep[0].relative_error() < 1e-3, "{:?}: {}", kind, rep[0].relative_error());
        }

        #[test]
        fn binary_gradients_match_finite_differences(seed in 0u64..1000, which in 0usize..3, scalar_rhs in any::<bool>()) {
            let kind = [Binary::Add, Binary::Sub, Binary::Mul][which];
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::uniform([3, 4], -2.0, 2.0, &mut r).with_requires_grad();
            let b = if scalar_rhs {
                Tensor::uniform([1], -2.0, 2.0, &mut r).with_requires_grad()
            } else {
                Tensor::uniform([3, 4], -2.0, 2.0, &mut r).with_requires_grad()
            };
            let w = Tensor::uniform([3, 4], -1.0, 1.0, &mut r);
            // Each op is linear in each input, so central differences are
            // exact for any step; a large one keeps f32 rounding out of a
            // broadcast gradient that can be a near-cancelling sum.
            let rep = gradcheck::check(&[a.clone(), b, w.clone()], 1e-1, |t, v| {
                let y = t.binary(kind, v[0], v[1])?;
                let y = t.mul(y, v[2])?;
                Ok(t.sum(y))
            }).unwrap();
            if scalar_rhs {
                let exact: f64 = a.data().iter().zip(w.data()).map(|(&a, &w)| match kind {
                    Binary::Add => w as f64,
                    Binary::Sub => -(w as f64),
                    _ => a as f64 * w as f64,
                }).sum();
                prop_assert!((rep[1].analytic[0] as f64 - exact).abs() < 1e-5, "{:?}: {} vs {}", kind, rep[1].analytic[0], exact);
            }
            for r in rep {
                prop_assert!(r.relative_error() < 1e-3, "{:?} input {}: {}", kind, r.input, r.relative_error());
            }
        }
    }
}
