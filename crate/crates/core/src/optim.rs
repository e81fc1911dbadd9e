//! Adam, learning-rate schedule, max-norm projection and the training loop.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_batch, ProteinRecord};
use crate::decode::evaluate;
use crate::error::{Error, Result};
use crate::model::{Model, ParamMap};
use crate::ops::Mode;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// `base · 0.5^floor(t / decay_every)`.
pub fn lr_schedule(t: u64, base: f64, decay_every: u64) -> f64 {
    decayed(t, base, decay_every, 0.5)
}

fn decayed(t: u64, base: f64, decay_every: u64, factor: f64) -> f64 {
    base * factor.powi((t / decay_every.max(1)).min(i32::MAX as u64) as i32)
}

#[derive(Debug, Clone, Default)]
pub struct Adam {
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// Number of steps taken.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    /// One bias-corrected update of every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamMap, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - BETA2.powi(self.t.min(i32::MAX as u64) as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = std::sync::Arc::make_mut(p).data_mut();
            for i in 0..n {
                let gi = f64::from(g.data()[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] = (f64::from(data[i]) - lr * mhat / (vhat.sqrt() + ADAM_EPSILON)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales every unit whose incoming weights exceed `cap` in L2 norm back
/// onto the ball. `unit_axis` is the axis of a rank-2 weight that indexes
/// units (1 for `[Din, Dout]` dense weights).
pub fn maxnorm_project(weight: &Tensor, cap: f64, unit_axis: usize) -> Result<Tensor> {
    let mut w = weight.clone();
    maxnorm_project_in_place(&mut w, cap, unit_axis)?;
    Ok(w)
}

pub fn maxnorm_project_in_place(weight: &mut Tensor, cap: f64, unit_axis: usize) -> Result<()> {
    if weight.rank() != 2 || unit_axis > 1 {
        return Err(Error::dim(format!("max-norm needs a rank-2 weight, got {:?}", weight.shape())));
    }
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    let (units, fan) = if unit_axis == 1 { (cols, rows) } else { (rows, cols) };
    let at = |u: usize, k: usize| if unit_axis == 1 { k * cols + u } else { u * cols + k };
    let data = weight.data_mut();
    for u in 0..units {
        let norm = (0..fan).map(|k| f64::from(data[at(u, k)]).powi(2)).sum::<f64>().sqrt();
        if norm > cap {
            let s = cap / norm;
            for k in 0..fan {
                let i = at(u, k);
                data[i] = (f64::from(data[i]) * s) as f32;
            }
        }
    }
    Ok(())
}

/// Largest per-unit incoming-weight norm of a `[Din, Dout]` weight.
pub fn max_unit_norm(weight: &Tensor) -> f64 {
    let cols = weight.last_dim();
    (0..cols)
        .map(|u| {
            weight
                .data()
                .iter()
                .skip(u)
                .step_by(cols)
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub base_lr: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            base_lr: 3.357e-4,
            decay_every: 100_000,
            decay_factor: 0.5,
            batch_size: 54,
            max_iterations: 500_000,
            eval_every: 1_000,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.decay_every == 0 || self.eval_every == 0 || self.max_iterations == 0 {
            return Err(Error::config("decay_every, eval_every and max_iterations must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("base_lr must be positive and decay_factor in (0, 1]"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate for zero-based iteration `t`.
    pub fn lr(&self, t: u64) -> f64 {
        decayed(t, self.base_lr, self.decay_every, self.decay_factor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive evaluations without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, metric: f64) -> Observation {
        let improved = self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val_q8: f64,
}

pub const CSV_HEADER: &str = "iter,lr,train_loss,val_q8";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:e},{:.6},{:.6}", self.iter, self.lr, self.train_loss, self.val_q8)
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation evaluation.
    pub best: Model,
    pub best_val_q8: f64,
    pub best_iteration: u64,
    pub iterations: u64,
    pub stopped_early: bool,
    pub log: Vec<LogRow>,
}

/// Optional observers of a training run.
#[derive(Default)]
pub struct Sinks<'a> {
    /// Receives the CSV header and one row per evaluation.
    pub csv: Option<&'a mut dyn Write>,
    /// Called with `(model, iteration, val_q8)` whenever validation Q8 improves.
    pub on_improvement: Option<&'a mut dyn FnMut(&Model, u64, f64) -> Result<()>>,
}

/// Mini-batch loss and gradient step on one sampled batch; returns the loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    records: &[ProteinRecord],
    indices: &[usize],
    lr: f64,
    dropout_rng: &RngStream,
    iteration: u64,
) -> Result<f64> {
    let diverged = |loss: f64| Error::Divergence { iteration, loss };
    let batch = make_batch(records, indices)?;
    let cfg = model.config().clone();
    let input = batch.model_input(cfg.conditioned.then(|| cfg.context_shift_amount()))?;
    let mut tape = Tape::new();
    let x = tape.input(input);
    let out = match model.forward(&mut tape, x, Some(&batch.mask), Mode::Train, dropout_rng) {
        Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
        other => other?,
    };
    let loss = match tape.softmax_xent(out.logits, &batch.labels, &batch.mask) {
        Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
        other => other?,
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(diverged(value));
    }
    let grads = match tape.backward(loss) {
        Err(Error::NonFinite(_)) => return Err(diverged(value)),
        other => other?,
    };
    adam.step(model.params_mut(), &grads.by_name(), lr)?;
    if let Some(cap) = cfg.maxnorm_cap {
        for name in model.constrained_params() {
            let slot = model.params_mut().get_mut(&name).expect("constrained parameter exists");
            maxnorm_project_in_place(std::sync::Arc::make_mut(slot), cap, 1)?;
        }
    }
    model.apply_bn_stats(&out.bn_stats);
    Ok(value)
}

/// Trains `model` on `train` with uniformly sampled mini-batches, evaluating
/// validation Q8 every `plan.eval_every` iterations (and after the last one).
pub fn train_loop(
    mut model: Model,
    train: &[ProteinRecord],
    val: &[ProteinRecord],
    plan: &TrainPlan,
    mut sinks: Sinks<'_>,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("training and validation sets must both be non-empty"));
    }
    if let Some(w) = sinks.csv.as_mut() {
        writeln!(w, "{CSV_HEADER}")?;
    }
    let root = RngStream::new(plan.seed);
    let mut sampler = root.derive(1);
    let dropout_root = root.derive(2);
    let mut adam = Adam::new();
    let mut stopper = EarlyStopper::new(plan.patience);
    let mut best = model.clone();
    let mut best_iteration = 0;
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let mut stopped_early = false;
    let mut it = 0;
    while it < plan.max_iterations {
        let lr = plan.lr(it);
        it += 1;
        let indices: Vec<usize> = (0..plan.batch_size).map(|_| sampler.below(train.len())).collect();
        loss_sum += train_step(&mut model, &mut adam, train, &indices, lr, &dropout_root.derive(it), it)?;
        loss_n += 1;
        if it % plan.eval_every == 0 || it == plan.max_iterations {
            let q8 = evaluate(&model, val)?.q8;
            let row = LogRow {
                iter: it,
                lr,
                train_loss: loss_sum / loss_n as f64,
                val_q8: q8,
            };
            (loss_sum, loss_n) = (0.0, 0);
            log::info!("iter {it} lr {lr:e} loss {:.4} val_q8 {q8:.4}", row.train_loss);
            if let Some(w) = sinks.csv.as_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            log.push(row);
            let obs = stopper.observe(q8);
            if obs.improved {
                best = model.clone();
                best_iteration = it;
                if let Some(cb) = sinks.on_improvement.as_mut() {
                    cb(&model, it, q8)?;
                }
            }
            if obs.stop {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_val_q8: stopper.best().unwrap_or(0.0),
        best_iteration,
        iterations: it,
        stopped_early,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn schedule_halves() {
        assert_eq!(lr_schedule(0, 3.357e-4, 100_000), 3.357e-4);
        assert!((lr_schedule(100_000, 3.357e-4, 100_000) - 1.6785e-4).abs() < 1e-15);
        assert!((lr_schedule(200_000, 3.357e-4, 100_000) - 8.3925e-5).abs() < 1e-15);
        assert_eq!(lr_schedule(99_999, 1.0, 100_000), 1.0);
    }

    fn one(name: &str, value: f32) -> (ParamMap, IndexMap<String, Tensor>) {
        let mut p = ParamMap::new();
        p.insert(name.into(), Arc::new(Tensor::filled(&[1], f64::from(value))));
        (p, IndexMap::new())
    }

    #[test]
    fn first_adam_step() {
        let (mut p, mut g) = one("p", 0.5);
        g.insert("p".into(), Tensor::filled(&[1], 0.1));
        let mut adam = Adam::new();
        adam.step(&mut p, &g, 1e-3).unwrap();
        assert!((f64::from(p["p"].data()[0]) - 0.499).abs() < 1e-6);
        assert_eq!(adam.iteration(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut g) = one("p", 0.5);
        g.insert("p".into(), Tensor::zeros(&[1]));
        let mut adam = Adam::new();
        for _ in 0..3 {
            adam.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p["p"].data()[0], 0.5);
    }

    #[test]
    fn adam_shape_mismatch() {
        let (mut p, mut g) = one("p", 0.5);
        g.insert("p".into(), Tensor::zeros(&[2]));
        assert!(matches!(Adam::new().step(&mut p, &g, 1e-3), Err(Error::Contract(_))));
        let (mut p, g) = one("p", 0.5);
        assert!(matches!(Adam::new().step(&mut p, &g, 1e-3), Err(Error::Contract(_))));
    }

    #[test]
    fn maxnorm_examples() {
        let w = Tensor::from_f64(vec![2, 1], &[0.3, 0.4]).unwrap();
        let out = maxnorm_project(&w, 0.1503, 1).unwrap();
        assert!((f64::from(out.data()[0]) - 0.09018).abs() < 1e-6);
        assert!((f64::from(out.data()[1]) - 0.12024).abs() < 1e-6);
        let small = Tensor::from_f64(vec![2, 1], &[0.03, 0.04]).unwrap();
        assert_eq!(maxnorm_project(&small, 0.1503, 1).unwrap(), small);
        let zero = Tensor::zeros(&[3, 2]);
        assert_eq!(maxnorm_project(&zero, 0.1, 1).unwrap(), zero);
        let rows = Tensor::from_f64(vec![1, 2], &[0.3, 0.4]).unwrap();
        assert!((max_unit_norm(&maxnorm_project(&rows, 0.1503, 0).unwrap().reshape(vec![2, 1]).unwrap()) - 0.1503).abs() < 1e-6);
    }

    #[test]
    fn early_stop_after_patience() {
        let mut s = EarlyStopper::new(3);
        let q = [0.5, 0.4, 0.3, 0.2, 0.1];
        let stops: Vec<bool> = q.iter().map(|&v| s.observe(v).stop).collect();
        assert_eq!(stops, vec![false, false, false, true, true]);
        let mut s = EarlyStopper::new(2);
        assert!(s.observe(0.5).improved);
        assert!(!s.observe(0.5).improved);
        assert!(s.observe(0.6).improved);
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        let bad = TrainPlan {
            batch_size: 0,
            ..TrainPlan::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainPlan {
            decay_every: 0,
            ..TrainPlan::default()
        };
        assert!(bad.validate().is_err());
    }
}
