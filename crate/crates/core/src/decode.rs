//! Label-sequence decoders.
//!
//! Decoders work against [`StepScorer`], which yields per-step log-probabilities
//! given the labels already chosen. Model-backed scorers wrap an unconditional
//! network (context-free, evaluated once) or a conditioned one (re-evaluated
//! per step on the window of positions that can see the new label).

use rayon::prelude::*;

use crate::config::{CONTEXT_CHANNELS, NUM_CLASSES};
use crate::data::{make_batch, ProteinRecord};
use crate::error::{Error, Result};
use crate::metrics::{confusion, EvalReport};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_BEAM: usize = 8;
/// Weight on the conditional model's log-probabilities.
pub const DEFAULT_BLEND: f64 = 0.45;
/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

const EVAL_BATCH: usize = 16;

/// Floored log-softmax of one row of logits.
pub fn log_probs_from_logits(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / z).max(LOG_FLOOR).ln()).collect()
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub trait StepScorer {
    fn num_labels(&self) -> usize;
    /// Sequence length to decode.
    fn len(&self) -> usize;
    /// `log p(y_pos = k | x, prefix)` for each prefix (all of length `pos`).
    fn log_probs(&self, pos: usize, prefixes: &[&[u8]]) -> Result<Vec<Vec<f64>>>;
}

impl<S: StepScorer + ?Sized> StepScorer for &S {
    fn num_labels(&self) -> usize {
        (**self).num_labels()
    }
    fn len(&self) -> usize {
        (**self).len()
    }
    fn log_probs(&self, pos: usize, prefixes: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        (**self).log_probs(pos, prefixes)
    }
}

/// Scorer defined by a function of `(pos, prefix)` returning log-probabilities.
pub struct FnScorer<F> {
    num_labels: usize,
    len: usize,
    f: F,
}

impl<F: Fn(usize, &[u8]) -> Vec<f64>> FnScorer<F> {
    pub fn new(num_labels: usize, len: usize, f: F) -> Self {
        FnScorer { num_labels, len, f }
    }
}

impl<F: Fn(usize, &[u8]) -> Vec<f64>> StepScorer for FnScorer<F> {
    fn num_labels(&self) -> usize {
        self.num_labels
    }
    fn len(&self) -> usize {
        self.len
    }
    fn log_probs(&self, pos: usize, prefixes: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| (self.f)(pos, p)).collect())
    }
}

/// Per-step convex combination `(1 − λ)·uncond + λ·cond` of two scorers' log-probabilities.
pub struct Blend<A, B> {
    uncond: A,
    cond: B,
    lambda: f64,
}

impl<A: StepScorer, B: StepScorer> Blend<A, B> {
    pub fn new(uncond: A, cond: B, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!("blend factor {lambda} must lie in [0, 1]")));
        }
        if uncond.num_labels() != cond.num_labels() || uncond.len() != cond.len() {
            return Err(Error::dim("blended scorers disagree on labels or length"));
        }
        Ok(Blend { uncond, cond, lambda })
    }
}

impl<A: StepScorer, B: StepScorer> StepScorer for Blend<A, B> {
    fn num_labels(&self) -> usize {
        self.uncond.num_labels()
    }
    fn len(&self) -> usize {
        self.uncond.len()
    }
    fn log_probs(&self, pos: usize, prefixes: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        let a = self.uncond.log_probs(pos, prefixes)?;
        let b = self.cond.log_probs(pos, prefixes)?;
        Ok(a.iter()
            .zip(&b)
            .map(|(ra, rb)| {
                ra.iter()
                    .zip(rb)
                    .map(|(x, y)| (1.0 - self.lambda) * x + self.lambda * y)
                    .collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<u8>,
    pub score: f64,
}

/// Left-to-right beam search. Candidates are ranked by score, then by the
/// lexicographically smaller label sequence.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, beam: usize) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let k = scorer.num_labels();
    let mut hyps = vec![Hypothesis {
        labels: Vec::new(),
        score: 0.0,
    }];
    for pos in 0..scorer.len() {
        let prefixes: Vec<&[u8]> = hyps.iter().map(|h| h.labels.as_slice()).collect();
        let rows = scorer.log_probs(pos, &prefixes)?;
        let mut cands = Vec::with_capacity(hyps.len() * k);
        for (h, row) in hyps.iter().zip(&rows) {
            for (label, &lp) in row.iter().enumerate().take(k) {
                let mut labels = h.labels.clone();
                labels.push(label as u8);
                cands.push(Hypothesis {
                    labels,
                    score: h.score + lp,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.labels.cmp(&b.labels)));
        cands.truncate(beam);
        hyps = cands;
    }
    Ok(hyps.swap_remove(0))
}

/// Chain-rule objective `Σ_t log p(y_t | y_<t)` of a full sequence.
pub fn sequence_score<S: StepScorer + ?Sized>(scorer: &S, labels: &[u8]) -> Result<f64> {
    let mut total = 0.0;
    for pos in 0..labels.len() {
        total += scorer.log_probs(pos, &[&labels[..pos]])?[0][usize::from(labels[pos])];
    }
    Ok(total)
}

/// Exhaustive search over all `K^L` sequences (small problems only).
pub fn exhaustive_argmax<S: StepScorer + ?Sized>(scorer: &S) -> Result<Hypothesis> {
    let (k, len) = (scorer.num_labels(), scorer.len());
    let total = k.checked_pow(len as u32).filter(|&n| n <= 1 << 22).ok_or_else(|| {
        Error::config(format!("exhaustive search over {k}^{len} sequences is too large"))
    })?;
    let mut best = Hypothesis {
        labels: Vec::new(),
        score: f64::NEG_INFINITY,
    };
    let mut labels = vec![0u8; len];
    for code in 0..total {
        let mut c = code;
        for slot in labels.iter_mut().rev() {
            *slot = (c % k) as u8;
            c /= k;
        }
        let score = sequence_score(scorer, &labels)?;
        if score > best.score {
            best = Hypothesis {
                labels: labels.clone(),
                score,
            };
        }
    }
    Ok(best)
}

fn single_input(record: &ProteinRecord) -> Result<Tensor> {
    record.features.clone().reshape(vec![1, record.grid_len(), record.features.last_dim()])
}

/// Context-free scorer holding one pass of an unconditional model.
pub struct UnconditionalScorer {
    rows: Vec<Vec<f64>>,
}

impl UnconditionalScorer {
    pub fn new(model: &Model, record: &ProteinRecord) -> Result<Self> {
        if model.config().conditioned {
            return Err(Error::config("expected an unconditional model"));
        }
        let logits = model.logits(&single_input(record)?)?;
        let rows = logits
            .data()
            .chunks(NUM_CLASSES)
            .take(record.length)
            .map(log_probs_from_logits)
            .collect();
        Ok(UnconditionalScorer { rows })
    }

    pub fn from_log_probs(rows: Vec<Vec<f64>>) -> Self {
        UnconditionalScorer { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

impl StepScorer for UnconditionalScorer {
    fn num_labels(&self) -> usize {
        self.rows.first().map_or(NUM_CLASSES, Vec::len)
    }
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn log_probs(&self, pos: usize, prefixes: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.rows[pos].clone(); prefixes.len()])
    }
}

/// Conditioned model evaluated on the crop of positions whose receptive
/// field contains position `pos`, with label context taken from each prefix.
pub struct ConditionalScorer<'a> {
    model: &'a Model,
    record: &'a ProteinRecord,
    shift: usize,
    radius: usize,
}

impl<'a> ConditionalScorer<'a> {
    pub fn new(model: &'a Model, record: &'a ProteinRecord) -> Result<Self> {
        let cfg = model.config();
        if !cfg.conditioned {
            return Err(Error::config("expected a conditioned model"));
        }
        Ok(ConditionalScorer {
            model,
            record,
            shift: cfg.context_shift_amount(),
            radius: cfg.receptive_radius(),
        })
    }
}

impl StepScorer for ConditionalScorer<'_> {
    fn num_labels(&self) -> usize {
        NUM_CLASSES
    }
    fn len(&self) -> usize {
        self.record.length
    }
    fn log_probs(&self, pos: usize, prefixes: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        let grid = self.record.grid_len();
        let lo = pos.saturating_sub(self.radius);
        let hi = (pos + self.radius + 1).min(grid);
        let span = hi - lo;
        let d = self.record.features.last_dim();
        let out_d = d + CONTEXT_CHANNELS;
        let mut input = vec![0.0f32; prefixes.len() * span * out_d];
        for (h, prefix) in prefixes.iter().enumerate() {
            if prefix.len() != pos {
                return Err(Error::Contract(format!("prefix of length {} at step {pos}", prefix.len())));
            }
            for j in lo..hi {
                let row = &mut input[(h * span + j - lo) * out_d..(h * span + j - lo + 1) * out_d];
                row[..d].copy_from_slice(&self.record.features.data()[j * d..(j + 1) * d]);
                let ch = j
                    .checked_sub(self.shift)
                    .and_then(|src| prefix.get(src))
                    .map_or(NUM_CLASSES, |&y| usize::from(y));
                row[d + ch] = 1.0;
            }
        }
        let logits = self.model.logits(&Tensor::new(vec![prefixes.len(), span, out_d], input)?)?;
        Ok((0..prefixes.len())
            .map(|h| {
                let at = (h * span + pos - lo) * NUM_CLASSES;
                log_probs_from_logits(&logits.data()[at..at + NUM_CLASSES])
            })
            .collect())
    }
}

/// Per-position argmax of an unconditional model over the valid residues.
pub fn greedy_decode(model: &Model, record: &ProteinRecord) -> Result<Vec<u8>> {
    let s = UnconditionalScorer::new(model, record)?;
    Ok(s.rows.iter().map(|r| argmax(r) as u8).collect())
}

/// Beam search under a conditioned model.
pub fn conditional_beam_search(model: &Model, record: &ProteinRecord, beam: usize) -> Result<Vec<u8>> {
    Ok(beam_search(&ConditionalScorer::new(model, record)?, beam)?.labels)
}

/// Beam search on `(1 − λ)·log p_uncond + λ·log p_cond`.
pub fn ensemble_beam_search(
    uncond: &Model,
    cond: &Model,
    record: &ProteinRecord,
    beam: usize,
    lambda: f64,
) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("blend factor {lambda} must lie in [0, 1]")));
    }
    let blend = Blend::new(
        UnconditionalScorer::new(uncond, record)?,
        ConditionalScorer::new(cond, record)?,
        lambda,
    )?;
    Ok(beam_search(&blend, beam)?.labels)
}

/// Equal-weight ensemble of two unconditional models.
pub fn ensemble_pair_uniform(a: &Model, b: &Model, record: &ProteinRecord) -> Result<Vec<u8>> {
    let sa = UnconditionalScorer::new(a, record)?;
    let sb = UnconditionalScorer::new(b, record)?;
    Ok(sa
        .rows
        .iter()
        .zip(&sb.rows)
        .map(|(x, y)| {
            let mean: Vec<f64> = x.iter().zip(y).map(|(p, q)| (p + q) / 2.0).collect();
            argmax(&mean) as u8
        })
        .collect())
}

/// Per-position argmax over the full grid of every record. Conditioned models
/// see the ground-truth labels as context.
pub fn teacher_forced_predictions(model: &Model, records: &[ProteinRecord]) -> Result<Vec<Vec<u8>>> {
    let cfg = model.config();
    let shift = cfg.conditioned.then(|| cfg.context_shift_amount());
    let indices: Vec<usize> = (0..records.len()).collect();
    let chunks: Vec<Vec<Vec<u8>>> = indices
        .chunks(EVAL_BATCH)
        .map(|idx| {
            let batch = make_batch(records, idx)?;
            let logits = model.logits(&batch.model_input(shift)?)?;
            let grid = batch.grid_len();
            Ok(logits
                .data()
                .chunks(grid * NUM_CLASSES)
                .map(|protein| {
                    protein
                        .chunks(NUM_CLASSES)
                        .map(|row| argmax(&log_probs_from_logits(row)) as u8)
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Q8 report of [`teacher_forced_predictions`] over the valid residues.
pub fn evaluate(model: &Model, records: &[ProteinRecord]) -> Result<EvalReport> {
    let preds = teacher_forced_predictions(model, records)?;
    let mut total = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (r, p) in records.iter().zip(&preds) {
        let c = confusion(p, &r.labels, &r.mask)?;
        for (row, crow) in total.iter_mut().zip(c) {
            for (x, y) in row.iter_mut().zip(crow) {
                *x += y;
            }
        }
    }
    EvalReport::from_confusion(total)
}

/// Next-step accuracy of a conditioned model fed ground-truth context.
pub fn teacher_forced_accuracy(model: &Model, records: &[ProteinRecord]) -> Result<f64> {
    Ok(evaluate(model, records)?.q8)
}

/// Q8 of decoded label prefixes against each record's labels.
pub fn decoded_report(records: &[ProteinRecord], decoded: &[Vec<u8>]) -> Result<EvalReport> {
    let (mut pred, mut truth, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (r, d) in records.iter().zip(decoded) {
        if d.len() != r.length {
            return Err(Error::dim(format!("decoded {} labels for {} residues", d.len(), r.length)));
        }
        pred.extend_from_slice(d);
        truth.extend_from_slice(&r.labels[..r.length]);
        mask.extend_from_slice(&r.mask[..r.length]);
    }
    EvalReport::new(&pred, &truth, &mask)
}

/// Decodes every record in parallel with `f`.
pub fn decode_all<F>(records: &[ProteinRecord], f: F) -> Result<Vec<Vec<u8>>>
where
    F: Fn(&ProteinRecord) -> Result<Vec<u8>> + Sync + Send,
{
    records.par_iter().map(f).collect()
}
