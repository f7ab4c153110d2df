//! Character-level language-model training, perplexity evaluation and
//! post-pruning recovery tuning.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Binder;
use crate::model::{Liveness, Model, TOY_VOCAB};
use crate::numerics::{log_sum_exp, Tape, Tensor};

/// Public-domain text bundled with the crate.
pub const BUNDLED_TEXT: &str = include_str!("../data/alice.txt");

/// `'\n'` → 0, printable ASCII `' '..='~'` → 1..=95.
pub fn encode_char(c: char) -> Option<usize> {
    match c {
        '\n' => Some(0),
        ' '..='~' => Some(c as usize - ' ' as usize + 1),
        _ => None,
    }
}

pub fn decode_id(id: usize) -> Option<char> {
    match id {
        0 => Some('\n'),
        1..=95 => char::from_u32((id - 1 + ' ' as usize) as u32),
        _ => None,
    }
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .enumerate()
        .map(|(i, c)| {
            encode_char(c).ok_or(Error::Input {
                position: i,
                token: c as usize,
                vocab: TOY_VOCAB,
            })
        })
        .collect()
}

pub fn decode(ids: &[usize]) -> String {
    ids.iter().map(|&i| decode_id(i).unwrap_or('?')).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Calibration,
}

/// Encoded text cut 80/10/10 into train, validation and calibration spans.
#[derive(Clone, Debug)]
pub struct Corpus {
    ids: Vec<usize>,
    bounds: [usize; 4],
}

impl Corpus {
    pub fn bundled() -> Self {
        Self::from_text(BUNDLED_TEXT).expect("bundled text is in the charset")
    }

    /// Carriage returns are dropped and tabs become spaces; anything else
    /// outside the charset is an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let cleaned: String = text.chars().filter(|&c| c != '\r').map(|c| if c == '\t' { ' ' } else { c }).collect();
        let ids = encode(&cleaned)?;
        if ids.len() < 100 {
            return Err(Error::Contract(format!("corpus of {} characters is too small to split", ids.len())));
        }
        let n = ids.len();
        Ok(Self {
            bounds: [0, n * 8 / 10, n * 9 / 10, n],
            ids,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn split(&self, s: Split) -> &[usize] {
        let i = s as usize;
        &self.ids[self.bounds[i]..self.bounds[i + 1]]
    }

    /// Up to `max_count` non-overlapping windows of `len` tokens from the
    /// start of the split.
    pub fn windows(&self, s: Split, len: usize, max_count: usize) -> Vec<Vec<usize>> {
        self.split(s).chunks_exact(len.max(2)).take(max_count).map(<[usize]>::to_vec).collect()
    }

    /// `count` evenly spaced windows of `len` tokens from the calibration
    /// split. Windows overlap once the split holds fewer than `count · len`
    /// tokens.
    pub fn calibration(&self, count: usize, len: usize) -> Result<Vec<Vec<usize>>> {
        let data = self.split(Split::Calibration);
        if count == 0 || len < 2 || len > data.len() {
            return Err(Error::Contract(format!(
                "cannot cut {count} calibration windows of {len} tokens from {} tokens",
                data.len()
            )));
        }
        let span = data.len() - len;
        Ok((0..count)
            .map(|i| {
                let start = if count == 1 { 0 } else { i * span / (count - 1) };
                data[start..start + len].to_vec()
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// perplexity
// ---------------------------------------------------------------------------

/// Summed next-token NLL (f64) and predicted-position count for `logits`
/// rows against `targets`.
pub fn nll_sum(logits: &Tensor, targets: &[usize]) -> Result<(f64, usize)> {
    let (rows, v) = logits.dims2()?;
    if rows != targets.len() {
        return Err(Error::Contract(format!("{rows} logit rows for {} targets", targets.len())));
    }
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Input {
                position: r,
                token: t,
                vocab: v,
            });
        }
        let row = logits.row(r);
        let (lse, _) = log_sum_exp(row);
        total += lse - row[t] as f64;
    }
    Ok((total, rows))
}

pub fn perplexity_from_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (s, n) = nll_sum(logits, targets)?;
    Ok((s / n as f64).exp())
}

/// Sequences per forward pass while evaluating.
const EVAL_BATCH: usize = 8;

/// `exp(mean NLL)` over every predicted position of `data` under the
/// model's own liveness.
pub fn perplexity(model: &Model, data: &[Vec<usize>]) -> Result<f64> {
    perplexity_with(model, model.liveness(), data)
}

/// Perplexity under an arbitrary liveness overlay. Sequences of equal
/// length are batched.
pub fn perplexity_with(model: &Model, live: &Liveness, data: &[Vec<usize>]) -> Result<f64> {
    if data.is_empty() || data.iter().any(|s| s.len() < 2) {
        return Err(Error::Contract("perplexity needs sequences of at least 2 tokens".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut i = 0;
    while i < data.len() {
        let len = data[i].len();
        let mut j = i;
        while j < data.len() && j - i < EVAL_BATCH && data[j].len() == len {
            j += 1;
        }
        let mut inputs = Vec::with_capacity((j - i) * (len - 1));
        let mut targets = Vec::with_capacity(inputs.capacity());
        for s in &data[i..j] {
            inputs.extend_from_slice(&s[..len - 1]);
            targets.extend_from_slice(&s[1..]);
        }
        let logits = model.forward_with(live, &inputs, len - 1)?;
        let (s, n) = nll_sum(&logits, &targets)?;
        total += s;
        count += n;
        i = j;
    }
    Ok((total / count as f64).exp())
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            min_lr_frac: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive");
        }
        if self.seq_len < 2 {
            bad.push("seq_len must be at least 2");
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            bad.push("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            bad.push("eps and clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            bad.push("min_lr_frac must lie in [0, 1]");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Cosine decay from `lr` to `min_lr_frac · lr` over `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr,grad_norm\n");
        for l in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", l.step, l.loss, l.lr, l.grad_norm);
        }
        s
    }
}

#[derive(Default)]
struct Adam {
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
    t: i32,
}

/// Next-token cross-entropy training with Adam, global-norm clipping and a
/// cosine schedule. Only structures alive in the model's liveness are bound
/// to the tape, so removed parameters never change.
pub fn train(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, corpus.split(Split::Train), cfg, |_| {})
}

/// [`train`] over an explicit token stream, calling `on_step` after every
/// update.
pub fn train_with(
    model: &mut Model,
    data: &[usize],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.len() <= cfg.seq_len + 1 {
        return Err(Error::Contract(format!(
            "training stream of {} tokens is shorter than seq_len {}",
            data.len(),
            cfg.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let mut report = TrainReport::default();
    let live = model.liveness().clone();
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size * cfg.seq_len);
        let mut targets = Vec::with_capacity(inputs.capacity());
        for _ in 0..cfg.batch_size {
            let start = rng.gen_range(0..data.len() - cfg.seq_len - 1);
            inputs.extend_from_slice(&data[start..start + cfg.seq_len]);
            targets.extend_from_slice(&data[start + 1..start + cfg.seq_len + 1]);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::training();
        let logits = model.forward_tape(&mut tape, &mut binder, &live, &inputs, cfg.seq_len)?;
        let loss_var = tape.cross_entropy(logits, &targets)?;
        let loss = tape.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        tape.backward(loss_var)?;

        let mut grads: HashMap<&str, &[f32]> = HashMap::new();
        let mut sq = 0.0f64;
        for (name, var) in binder.bound() {
            if let Some(g) = tape.grad(*var) {
                sq += g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
                grads.insert(name.as_str(), g);
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, loss: grad_norm });
        }
        let scale = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
        let lr = cfg.lr_at(step);
        adam.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(adam.t);
        let bc2 = 1.0 - cfg.beta2.powi(adam.t);
        let moments = &mut adam.moments;
        model.visit_params_mut(&mut |name, t| {
            let Some(g) = grads.get(name.as_str()) else { return };
            let (m, v) = moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; t.numel()], vec![0.0; t.numel()]));
            for (((w, &g), m), v) in t.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64 * scale;
                *m = (cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g) as f32;
                *v = (cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g) as f32;
                let upd = lr * (*m as f64 / bc1) / ((*v as f64 / bc2).sqrt() + cfg.eps);
                *w = (*w as f64 - upd) as f32;
            }
        });
        let log = StepLog {
            step,
            loss,
            lr,
            grad_norm,
        };
        on_step(&log);
        report.steps.push(log);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub ppl_before: f64,
    pub ppl_after: f64,
    pub steps: usize,
}

/// Fine-tunes the surviving parameters of a pruned model and reports
/// validation perplexity before and after.
pub fn recovery_tune(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    eval: &[Vec<usize>],
) -> Result<(RecoveryReport, TrainReport)> {
    let before = perplexity(model, eval)?;
    let curve = train(model, corpus, cfg)?;
    let after = perplexity(model, eval)?;
    Ok((
        RecoveryReport {
            ppl_before: before,
            ppl_after: after,
            steps: cfg.steps,
        },
        curve,
    ))
}

/// Tuning steps equivalent to `epochs` passes over the train split.
pub fn steps_for_epochs(corpus: &Corpus, cfg: &TrainConfig, epochs: f64) -> usize {
    let per_step = (cfg.batch_size * cfg.seq_len).max(1) as f64;
    (epochs * corpus.split(Split::Train).len() as f64 / per_step).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchDescriptor, BlockKind, StructureId, StructureKind};

    fn tiny() -> Model {
        let d = ArchDescriptor {
            d_model: 16,
            ssm_state: 4,
            mlp_intermediate: 32,
            n_heads: 2,
            ..ArchDescriptor::toy(BlockKind::Mamba1, 2).with_transformers_at(&[1])
        };
        Model::build(&d, 3).unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seq_len: 16,
            lr: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn charset_round_trip() {
        let s = "Alice said: \"~Hello\"\nok";
        assert_eq!(decode(&encode(s).unwrap()), s);
        assert_eq!(encode_char('\n'), Some(0));
        assert_eq!(encode_char(' '), Some(1));
        assert_eq!(encode_char('~'), Some(95));
        assert!(matches!(encode("ab\u{e9}"), Err(Error::Input { position: 2, .. })));
        for id in 0..TOY_VOCAB {
            assert_eq!(encode_char(decode_id(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn bundled_corpus_splits() {
        let c = Corpus::bundled();
        let (a, b, d) = (c.split(Split::Train), c.split(Split::Validation), c.split(Split::Calibration));
        assert_eq!(a.len() + b.len() + d.len(), c.len());
        assert!(a.len() > 7 * c.len() / 10 && b.len() > c.len() / 20 && d.len() > c.len() / 20);
        assert!(c.split(Split::Train).iter().all(|&t| t < TOY_VOCAB));
        let cal = c.calibration(256, 256).unwrap();
        assert_eq!(cal.len(), 256);
        assert!(cal.iter().all(|s| s.len() == 256));
        assert_eq!(cal[0], d[..256].to_vec());
        assert_eq!(cal[255], d[d.len() - 256..].to_vec());
        assert!(c.calibration(1, d.len() + 1).is_err());
        let w = c.windows(Split::Validation, 100, 3);
        assert_eq!(w.len(), 3);
        assert_eq!(w[1], b[100..200].to_vec());
        assert_eq!(Corpus::from_text("a\r\nb\tc".repeat(40).as_str()).unwrap().len(), 5 * 40);
    }

    #[test]
    fn perplexity_closed_forms() {
        let uniform = Tensor::zeros([5, 96]);
        let p = perplexity_from_logits(&uniform, &[0, 1, 2, 3, 95]).unwrap();
        assert!((p - 96.0).abs() < 1e-9);
        let mut sharp = Tensor::zeros([3, 96]);
        for (r, t) in [(0, 4), (1, 9), (2, 0)] {
            sharp.data_mut()[r * 96 + t] = 60.0;
        }
        let p = perplexity_from_logits(&sharp, &[4, 9, 0]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
        assert!(matches!(perplexity_from_logits(&uniform, &[0, 1, 2, 3, 96]), Err(Error::Input { .. })));
    }

    #[test]
    fn perplexity_matches_direct_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::uniform([40, 96], -8.0, 8.0, &mut rng);
        let targets: Vec<usize> = (0..40).map(|_| rng.gen_range(0..96)).collect();
        let mut nll = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            nll -= (row[t].exp() / z).ln();
        }
        let oracle = (nll / 40.0).exp();
        let p = perplexity_from_logits(&logits, &targets).unwrap();
        assert!(((p - oracle) / oracle).abs() < 1e-6);
    }

    #[test]
    fn model_perplexity_batches_and_permutes() {
        let m = tiny();
        let c = Corpus::bundled();
        let mut data = c.windows(Split::Validation, 20, 11);
        data.push(c.split(Split::Validation)[500..530].to_vec());
        let p = perplexity(&m, &data).unwrap();
        // one sequence at a time, by hand
        let (mut s, mut n) = (0.0, 0);
        for seq in &data {
            let logits = m.forward(&seq[..seq.len() - 1]).unwrap();
            let (a, b) = nll_sum(&logits, &seq[1..]).unwrap();
            s += a;
            n += b;
        }
        assert!(((p - (s / n as f64).exp()) / p).abs() < 1e-9);
        data.reverse();
        assert!(((perplexity(&m, &data).unwrap() - p) / p).abs() < 1e-12);
        assert!(perplexity(&m, &[]).is_err());
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = tiny();
        let before = m.clone();
        let cfg = TrainConfig { lr: 0.0, ..quick(1) };
        let r = train(&mut m, &Corpus::bundled(), &cfg).unwrap();
        assert_eq!(r.steps.len(), 1);
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let c = Corpus::bundled();
        let mut a = tiny();
        let mut b = tiny();
        let ra = train(&mut a, &c, &quick(120)).unwrap();
        let rb = train(&mut b, &c, &quick(120)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let l = ra.losses();
        let head: f64 = l[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = l[100..].iter().sum::<f64>() / 20.0;
        assert!(tail < head - 0.3, "loss {head} -> {tail}");
        assert!(ra.to_csv().starts_with("step,loss,lr,grad_norm\n0,"));
    }

    #[test]
    fn nan_weights_abort_with_step() {
        let mut m = tiny();
        m.head.weight.data_mut()[0] = f32::NAN;
        match train(&mut m, &Corpus::bundled(), &quick(3)) {
            Err(Error::Divergence { step: 0, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig { steps: 11, lr: 1.0, min_lr_frac: 0.1, ..TrainConfig::default() };
        assert!((cfg.lr_at(0) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(5) - 0.55).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 0.1).abs() < 1e-12);
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn recovery_leaves_removed_structures_alone() {
        let c = Corpus::bundled();
        let mut m = tiny();
        m.remove(StructureId::new(StructureKind::MhaModule, 1)).unwrap();
        m.remove(StructureId::new(StructureKind::SsmModule, 0)).unwrap();
        let eval = c.windows(Split::Validation, 32, 4);

        let mut z = m.clone();
        let (rep, _) = recovery_tune(&mut z, &c, &quick(0), &eval).unwrap();
        assert_eq!(rep.ppl_before, rep.ppl_after);
        assert_eq!(z, m);

        let frozen = |m: &Model| -> Vec<(String, Tensor)> {
            m.named_params()
                .into_iter()
                .filter(|(n, _)| n.starts_with("blocks.1.attn.") || n.starts_with("blocks.0.ssm."))
                .map(|(n, t)| (n, t.clone()))
                .collect()
        };
        let before = frozen(&m);
        assert_eq!(before.len(), 5 + 6);
        let mut tuned = m.clone();
        recovery_tune(&mut tuned, &c, &quick(5), &eval).unwrap();
        assert_eq!(frozen(&tuned), before);
        assert_eq!(tuned.liveness(), m.liveness());
        assert_ne!(tuned.head, m.head);
    }
}
