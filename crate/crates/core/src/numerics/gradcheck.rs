//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on an inference tape,
//! so it shares no code with the backward rules it checks.

use crate::error::Result;

use super::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradReport {
    pub input: usize,
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
}

impl GradReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`, zero when both
    /// gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let mut diff = 0.0f64;
        let mut na = 0.0f64;
        let mut nn = 0.0f64;
        for (&a, &n) in self.analytic.iter().zip(&self.numeric) {
            diff += (a as f64 - n as f64).powi(2);
            na += (a as f64).powi(2);
            nn += (n as f64).powi(2);
        }
        let denom = na.sqrt().max(nn.sqrt());
        if denom == 0.0 {
            0.0
        } else {
            diff.sqrt() / denom
        }
    }

    pub fn max_abs_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &n)| (a as f64 - n as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences
/// of step `h`, for every input flagged `requires_grad`.
pub fn check<F>(inputs: &[Tensor], h: f32, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0] as f64)
    };

    let mut reports = Vec::new();
    for (idx, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = tape
            .grad(vars[idx])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut work = inputs.to_vec();
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let x = t.data()[j];
            let (xp, xm) = (x + h, x - h);
            work[idx].data_mut()[j] = xp;
            let fp = eval(&work)?;
            work[idx].data_mut()[j] = xm;
            let fm = eval(&work)?;
            work[idx].data_mut()[j] = x;
            numeric.push(((fp - fm) / (xp as f64 - xm as f64)) as f32);
        }
        reports.push(GradReport {
            input: idx,
            analytic,
            numeric,
        });
    }
    Ok(reports)
}
