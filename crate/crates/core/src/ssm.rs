//! Selective state-space cores.
//!
//! Per token `t` and channel `c` the recurrence is
//!
//! ```text
//! dt      = softplus(x_to_dt(x_t) + dt_bias)
//! Ā[c,n]  = exp(dt[c] · A[c,n]),   B̄[c,n] = dt[c] · B_t[n]
//! h[c,n]  = Ā[c,n] · h[c,n] + B̄[c,n] · x_t[c]
//! y_t[c]  = Σ_n C_t[n] · h[c,n] + D[c] · x_t[c]
//! ```
//!
//! with `A = −exp(A_log)`. The diagonal variant keeps one `A` per
//! `(channel, state)` pair; the scalar-identity variant ties all `N` entries
//! of a channel to one value.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{check_seq, Binder, Linear};
use crate::numerics::{kernels, CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateMatrix {
    /// `A_log: [channels × N]`.
    Diagonal,
    /// `A_log: [channels]`, one scalar times identity per channel.
    ScalarIdentity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// Stores `log(−A)`.
    pub a_log: Tensor,
    pub x_to_b: Linear,
    pub x_to_c: Linear,
    pub x_to_dt: Linear,
    pub dt_bias: Tensor,
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, state: usize, kind: StateMatrix, rng: &mut R) -> Self {
        let a_log = match kind {
            StateMatrix::Diagonal => Tensor::from_fn([channels, state], |i| ((i % state) as f32 + 1.0).ln()),
            StateMatrix::ScalarIdentity => {
                let mut t = Tensor::uniform([channels], 1.0, 16.0, rng);
                t.data_mut().iter_mut().for_each(|v| *v = v.ln());
                t
            }
        };
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let dt_bias = Tensor::from_fn([channels], |_| {
            let dt = rng.gen_range(lo..hi).exp();
            // inverse softplus
            (dt + (-(-dt).exp_m1()).ln()) as f32
        });
        Self {
            a_log,
            x_to_b: Linear::init(channels, state, false, 1.0, rng),
            x_to_c: Linear::init(channels, state, false, 1.0, rng),
            x_to_dt: Linear::init(channels, channels, false, 0.5, rng),
            dt_bias,
            d_skip: Tensor::full([channels], 1.0),
        }
    }

    pub fn kind(&self) -> StateMatrix {
        if self.a_log.ndim() == 1 {
            StateMatrix::ScalarIdentity
        } else {
            StateMatrix::Diagonal
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.x_to_b.out_features()
    }

    pub fn param_count(&self) -> usize {
        self.a_log.numel()
            + self.x_to_b.param_count()
            + self.x_to_c.param_count()
            + self.x_to_dt.param_count()
            + self.dt_bias.numel()
            + self.d_skip.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let n = self.state_size();
        let a_ok = match self.kind() {
            StateMatrix::Diagonal => self.a_log.shape() == [c, n],
            StateMatrix::ScalarIdentity => true,
        };
        let ok = a_ok
            && self.x_to_b.in_features() == c
            && self.x_to_c.in_features() == c
            && self.x_to_c.out_features() == n
            && self.x_to_dt.in_features() == c
            && self.x_to_dt.out_features() == c
            && self.dt_bias.shape() == [c]
            && self.d_skip.shape() == [c];
        if ok {
            Ok(())
        } else {
            Err(dim_err("ssm params", self.a_log.shape(), self.x_to_b.weight.shape()))
        }
    }

    /// `A = −exp(A_log)` expanded to `[channels × N]`.
    pub fn a_matrix(&self) -> Vec<f64> {
        let n = self.state_size();
        match self.kind() {
            StateMatrix::Diagonal => self.a_log.data().iter().map(|&v| -(v as f64).exp()).collect(),
            StateMatrix::ScalarIdentity => self
                .a_log
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(-(v as f64).exp(), n))
                .collect(),
        }
    }

    /// Tape forward over `[rows × channels]`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, prefix: &str, x: Var, seq_len: usize) -> Result<Var> {
        let dt_bias = binder.bind(tape, &format!("{prefix}.dt_bias"), &self.dt_bias);
        let w_dt = binder.bind(tape, &format!("{prefix}.x_to_dt.weight"), &self.x_to_dt.weight);
        let dt = tape.linear(x, w_dt, Some(dt_bias))?;
        let dt = tape.softplus(dt);
        let b = self.x_to_b.forward(tape, binder, &format!("{prefix}.x_to_b"), x)?;
        let c = self.x_to_c.forward(tape, binder, &format!("{prefix}.x_to_c"), x)?;
        let a_log = binder.bind(tape, &format!("{prefix}.a_log"), &self.a_log);
        let d = binder.bind(tape, &format!("{prefix}.d_skip"), &self.d_skip);
        scan(tape, ScanInputs { x, dt, a_log, b, c, d }, seq_len)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.a_log"), &self.a_log);
        self.x_to_b.visit(&format!("{prefix}.x_to_b"), f);
        self.x_to_c.visit(&format!("{prefix}.x_to_c"), f);
        self.x_to_dt.visit(&format!("{prefix}.x_to_dt"), f);
        f(format!("{prefix}.dt_bias"), &self.dt_bias);
        f(format!("{prefix}.d_skip"), &self.d_skip);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.a_log"), &mut self.a_log);
        self.x_to_b.visit_mut(&format!("{prefix}.x_to_b"), f);
        self.x_to_c.visit_mut(&format!("{prefix}.x_to_c"), f);
        self.x_to_dt.visit_mut(&format!("{prefix}.x_to_dt"), f);
        f(format!("{prefix}.dt_bias"), &mut self.dt_bias);
        f(format!("{prefix}.d_skip"), &mut self.d_skip);
    }
}

/// Zero-order hold for `A`, Euler for `B`: `(exp(dt·A), dt·B)`.
pub fn discretize(a: &[f32], b: &[f32], dt: f32) -> (Vec<f32>, Vec<f32>) {
    let dt = dt as f64;
    let a_bar = a.iter().map(|&a| (dt * a as f64).exp() as f32).collect();
    let b_bar = b.iter().map(|&b| (dt * b as f64) as f32).collect();
    (a_bar, b_bar)
}

/// Recurrent state of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    /// `[channels × N]`.
    pub h: Tensor,
    pub position: usize,
}

impl ScanState {
    pub fn zeros(channels: usize, state: usize) -> Self {
        Self {
            h: Tensor::zeros([channels, state]),
            position: 0,
        }
    }
}

/// Eager selective scan of one sequence `x: [T × channels]` from a zero
/// state.
pub fn selective_scan(p: &SsmParams, x: &Tensor) -> Result<Tensor> {
    let (t, c) = x.dims2()?;
    if t == 0 {
        return Err(Error::Contract("scan needs at least one token".into()));
    }
    if c != p.channels() {
        return Err(dim_err("selective_scan", x.shape(), p.a_log.shape()));
    }
    let mut tape = Tape::inference();
    let mut binder = Binder::inference();
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &mut binder, "ssm", xv, t)?;
    Ok(tape.take(y))
}

/// One recurrence step; `T` calls reproduce [`selective_scan`].
pub fn scan_step(p: &SsmParams, s: &ScanState, x_t: &[f32]) -> Result<(Vec<f32>, ScanState)> {
    let c = p.channels();
    let n = p.state_size();
    if x_t.len() != c || s.h.shape() != [c, n] {
        return Err(dim_err("scan_step", &[x_t.len()], s.h.shape()));
    }
    let mut dt = p.x_to_dt.apply_row(x_t);
    dt.iter_mut()
        .zip(p.dt_bias.data())
        .for_each(|(v, b)| *v = kernels::softplus(*v + b));
    let b = p.x_to_b.apply_row(x_t);
    let cc = p.x_to_c.apply_row(x_t);
    let a = p.a_matrix();
    let mut next = s.h.clone();
    let h = next.data_mut();
    let mut y = vec![0.0f32; c];
    for ch in 0..c {
        let dtc = dt[ch] as f64;
        let xc = x_t[ch] as f64;
        let mut acc = 0.0f64;
        for k in 0..n {
            let i = ch * n + k;
            let abar = (dtc * a[i]).exp();
            let hv = abar * h[i] as f64 + dtc * b[k] as f64 * xc;
            h[i] = hv as f32;
            acc += cc[k] as f64 * hv;
        }
        let out = acc + p.d_skip.data()[ch] as f64 * xc;
        if !out.is_finite() {
            return Err(Error::Numeric {
                what: "scan_step",
                token: s.position,
            });
        }
        y[ch] = out as f32;
    }
    Ok((
        y,
        ScanState {
            h: next,
            position: s.position + 1,
        },
    ))
}

/// Vars consumed by the scan primitive.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    /// `[rows × C]`
    pub x: Var,
    /// `[rows × C]`, strictly positive
    pub dt: Var,
    /// `[C × N]` or `[C]`
    pub a_log: Var,
    /// `[rows × N]`
    pub b: Var,
    /// `[rows × N]`
    pub c: Var,
    /// `[C]`
    pub d: Var,
}

/// The selective-scan primitive with a reverse-replay backward rule.
pub fn scan(tape: &mut Tape, inp: ScanInputs, seq_len: usize) -> Result<Var> {
    let (rows, ch) = tape.value(inp.x).dims2()?;
    let (_, n) = tape.value(inp.b).dims2()?;
    if tape.shape(inp.dt) != tape.shape(inp.x) {
        return Err(dim_err("scan dt", tape.shape(inp.x), tape.shape(inp.dt)));
    }
    if tape.shape(inp.c) != tape.shape(inp.b) || tape.value(inp.b).shape()[0] != rows {
        return Err(dim_err("scan B/C", tape.shape(inp.b), tape.shape(inp.c)));
    }
    let tied = match tape.shape(inp.a_log) {
        [c] if *c == ch => true,
        [c, k] if *c == ch && *k == n => false,
        other => return Err(dim_err("scan A", other, &[ch, n])),
    };
    if tape.shape(inp.d) != [ch] {
        return Err(dim_err("scan D", tape.shape(inp.d), &[ch]));
    }
    check_seq(rows, seq_len)?;
    let keep = tape.is_recording();
    let a = expand_a(tape.value(inp.a_log).data(), tied, ch, n);
    let (y, saved) = scan_kernel(
        ScanData {
            x: tape.value(inp.x).data(),
            dt: tape.value(inp.dt).data(),
            a: &a,
            b: tape.value(inp.b).data(),
            c: tape.value(inp.c).data(),
            d: tape.value(inp.d).data(),
            ch,
            n,
            seq_len,
            tied,
        },
        keep,
    )?;
    let out = Tensor::new([rows, ch], y)?;
    let ScanInputs { x, dt, a_log, b, c, d } = inp;
    Ok(tape.custom(
        &[x, dt, a_log, b, c, d],
        out,
        Box::new(ScanOp {
            saved,
            tied,
            ch,
            n,
            seq_len,
        }),
    ))
}

fn expand_a(a_log: &[f32], tied: bool, ch: usize, n: usize) -> Vec<f64> {
    if tied {
        (0..ch * n).map(|i| -(a_log[i / n] as f64).exp()).collect()
    } else {
        a_log.iter().map(|&v| -(v as f64).exp()).collect()
    }
}

struct ScanData<'a> {
    x: &'a [f32],
    dt: &'a [f32],
    a: &'a [f64],
    b: &'a [f32],
    c: &'a [f32],
    d: &'a [f32],
    ch: usize,
    n: usize,
    seq_len: usize,
    tied: bool,
}

/// Returns outputs and, when `keep`, every post-update state and every
/// discretized `Ā`, both `[rows × C × N]`.
fn scan_kernel(s: ScanData<'_>, keep: bool) -> Result<(Vec<f32>, Saved)> {
    let (ch, n) = (s.ch, s.n);
    let rows = s.x.len() / ch;
    let mut y = vec![0.0f32; rows * ch];
    let mut saved = Saved {
        states: if keep { vec![0.0f64; rows * ch * n] } else { Vec::new() },
        abar: if keep { vec![0.0f64; rows * ch * n] } else { Vec::new() },
    };
    let mut h = vec![0.0f64; ch * n];
    let mut abar = vec![0.0f64; ch * n];
    let mut b = vec![0.0f64; n];
    let mut c = vec![0.0f64; n];
    for r in 0..rows {
        let t = r % s.seq_len;
        if t == 0 {
            h.fill(0.0);
        }
        b.iter_mut().zip(&s.b[r * n..(r + 1) * n]).for_each(|(d, &v)| *d = v as f64);
        c.iter_mut().zip(&s.c[r * n..(r + 1) * n]).for_each(|(d, &v)| *d = v as f64);
        let dts = &s.dt[r * ch..(r + 1) * ch];
        let xs = &s.x[r * ch..(r + 1) * ch];
        for k in 0..ch {
            let dt = dts[k] as f64;
            let xv = xs[k] as f64;
            let ab = &mut abar[k * n..(k + 1) * n];
            if s.tied {
                ab.fill((dt * s.a[k * n]).exp());
            } else {
                ab.iter_mut().zip(&s.a[k * n..(k + 1) * n]).for_each(|(o, &a)| *o = (dt * a).exp());
            }
            let hk = &mut h[k * n..(k + 1) * n];
            let dx = dt * xv;
            let mut acc = 0.0f64;
            for ((hv, &a), (&bj, &cj)) in hk.iter_mut().zip(ab.iter()).zip(b.iter().zip(&c)) {
                *hv = a * *hv + dx * bj;
                acc += cj * *hv;
            }
            let out = acc + s.d[k] as f64 * xv;
            if !out.is_finite() {
                return Err(Error::Numeric { what: "selective_scan", token: t });
            }
            y[r * ch + k] = out as f32;
        }
        if keep {
            saved.states[r * ch * n..(r + 1) * ch * n].copy_from_slice(&h);
            saved.abar[r * ch * n..(r + 1) * ch * n].copy_from_slice(&abar);
        }
    }
    Ok((y, saved))
}

struct Saved {
    states: Vec<f64>,
    abar: Vec<f64>,
}

struct ScanOp {
    saved: Saved,
    tied: bool,
    ch: usize,
    n: usize,
    seq_len: usize,
}

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let (ch, n) = (self.ch, self.n);
        let x = inputs[0].data();
        let dt = inputs[1].data();
        let a_log = inputs[2].data();
        let b = inputs[3].data();
        let c = inputs[4].data();
        let d = inputs[5].data();
        let a = expand_a(a_log, self.tied, ch, n);
        let rows = x.len() / ch;
        let (states, abars) = (&self.saved.states, &self.saved.abar);

        let mut gx = vec![0.0f32; rows * ch];
        let mut gdt = vec![0.0f32; rows * ch];
        let mut ga = vec![0.0f64; ch * n];
        let mut gb = vec![0.0f64; rows * n];
        let mut gc = vec![0.0f64; rows * n];
        let mut gd = vec![0.0f64; ch];
        let mut carry = vec![0.0f64; ch * n];
        let zeros = vec![0.0f64; ch * n];
        let mut bj = vec![0.0f64; n];
        let mut cj = vec![0.0f64; n];

        for r in (0..rows).rev() {
            let t = r % self.seq_len;
            if t == self.seq_len - 1 {
                carry.fill(0.0);
            }
            let h_now = &states[r * ch * n..(r + 1) * ch * n];
            let h_prev = if t > 0 { &states[(r - 1) * ch * n..r * ch * n] } else { &zeros[..] };
            let ab_now = &abars[r * ch * n..(r + 1) * ch * n];
            bj.iter_mut().zip(&b[r * n..(r + 1) * n]).for_each(|(o, &v)| *o = v as f64);
            cj.iter_mut().zip(&c[r * n..(r + 1) * n]).for_each(|(o, &v)| *o = v as f64);
            let gcr = &mut gc[r * n..(r + 1) * n];
            let gbr = &mut gb[r * n..(r + 1) * n];
            for k in 0..ch {
                let gy = g[r * ch + k] as f64;
                let xv = x[r * ch + k] as f64;
                let dtv = dt[r * ch + k] as f64;
                gd[k] += gy * xv;
                let dx = dtv * xv;
                let mut gxv = gy * d[k] as f64;
                let mut gdtv = 0.0f64;
                let span = k * n..(k + 1) * n;
                let (hn, hp, ab, ak) = (&h_now[span.clone()], &h_prev[span.clone()], &ab_now[span.clone()], &a[span.clone()]);
                let (cr, gak) = (&mut carry[span.clone()], &mut ga[span]);
                for j in 0..n {
                    let gh = cr[j] + gy * cj[j];
                    gcr[j] += gy * hn[j];
                    let g_abar = gh * hp[j] * ab[j];
                    gdtv += g_abar * ak[j] + gh * bj[j] * xv;
                    gak[j] += g_abar * dtv;
                    gbr[j] += gh * dx;
                    gxv += gh * dtv * bj[j];
                    cr[j] = gh * ab[j];
                }
                gx[r * ch + k] = gxv as f32;
                gdt[r * ch + k] = gdtv as f32;
            }
        }

        // dA/dA_log = A
        let ga_log: Vec<f32> = if self.tied {
            (0..ch)
                .map(|k| (0..n).map(|j| ga[k * n + j] * a[k * n + j]).sum::<f64>() as f32)
                .collect()
        } else {
            ga.iter().zip(&a).map(|(g, a)| (g * a) as f32).collect()
        };
        let f = |v: Vec<f64>| Some(v.into_iter().map(|x| x as f32).collect());
        Ok(vec![Some(gx), Some(gdt), Some(ga_log), f(gb), f(gc), f(gd)])
    }
}
