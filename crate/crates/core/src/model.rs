//! Model instantiation and forward evaluation.
//!
//! Parameter naming schema (`b` is the 1-based block index, `K` a bank width,
//! `j` the 1-based fully-connected layer index):
//!
//! | name                         | shape                |
//! |------------------------------|----------------------|
//! | `block{b}.ms.w{K}`           | `[K, Din, depth]`    |
//! | `block{b}.ms.b{K}`           | `[depth]`            |
//! | `block{b}.ms.bn.{gamma,beta}`| `[Σ depths]`         |
//! | `block{b}.conv.{w,b}`        | `[C, Din, depth]`    |
//! | `block{b}.conv.bn.{gamma,beta}` | `[depth]`         |
//! | `block{b}.res.{w,b}`         | `[1, Din, P]`        |
//! | `fc{j}.{weight,bias}`        | `[Din, width]`       |
//! | `out.{weight,bias}`          | `[width, 8]`         |
//!
//! Every batch-norm prefix `p` also owns the buffers `p.running_mean` and
//! `p.running_var`. The projection `block{b}.res` exists for every block but
//! the last when residual connections are enabled; its output is
//! depth-concatenated after block `b`'s output to form block `b+1`'s input.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::config::{ArchitectureConfig, ResidualSource, CONTEXT_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, Mode};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Exponential moving-average factor for running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;

pub type ParamMap = IndexMap<String, Arc<Tensor>>;

#[derive(Debug, Clone)]
pub struct Model {
    config: ArchitectureConfig,
    params: ParamMap,
    buffers: ParamMap,
}

/// Batch-norm statistics observed by one train-mode forward pass, keyed by
/// batch-norm prefix.
pub type BnUpdates = Vec<(String, BatchStats)>;

pub struct ForwardOutput {
    pub logits: Var,
    pub bn_stats: BnUpdates,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = rng.uniforms(n).into_iter().map(|u| (2.0 * u - 1.0) * bound).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

impl Model {
    /// Instantiates every parameter of `cfg` with fan-in scaled uniform weights
    /// (bound `sqrt(6 / fan_in)`), zero biases, unit gamma and zero beta.
    pub fn build(cfg: &ArchitectureConfig, rng: &RngStream) -> Result<Model> {
        cfg.validate()?;
        let mut b = Builder {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            rng: *rng,
        };
        let mut depth = cfg.model_input_depth();
        for blk in 1..=cfg.num_blocks {
            let block_in = depth;
            if !cfg.multiscale_banks.is_empty() {
                let mut out = 0;
                for bank in &cfg.multiscale_banks {
                    b.conv(&format!("block{blk}.ms.w{}", bank.width), &format!("block{blk}.ms.b{}", bank.width), bank.width, depth, bank.depth);
                    out += bank.depth;
                }
                b.bn(&format!("block{blk}.ms.bn"), out);
                depth = out;
            }
            if let Some(c) = cfg.single_conv {
                b.conv(&format!("block{blk}.conv.w"), &format!("block{blk}.conv.b"), c.width, depth, c.depth);
                b.bn(&format!("block{blk}.conv.bn"), c.depth);
                depth = c.depth;
            }
            if cfg.residual_connections && blk < cfg.num_blocks {
                let src = match cfg.residual_source {
                    ResidualSource::BlockInput => block_in,
                    ResidualSource::BlockOutput => depth,
                };
                let p = cfg.residual_projection_depth;
                b.conv(&format!("block{blk}.res.w"), &format!("block{blk}.res.b"), 1, src, p);
                depth += p;
            }
        }
        let mut width = cfg.fc_window * depth;
        for j in 1..=cfg.fc_layers {
            b.dense(&format!("fc{j}.weight"), &format!("fc{j}.bias"), width, cfg.fc_width);
            width = cfg.fc_width;
        }
        b.dense("out.weight", "out.bias", width, NUM_CLASSES);
        Ok(Model {
            config: cfg.clone(),
            params: b.params,
            buffers: b.buffers,
        })
    }

    /// Reassembles a model from stored tensors, checking names and shapes
    /// against a freshly built schema.
    pub fn from_parts(cfg: ArchitectureConfig, tensors: IndexMap<String, Tensor>) -> Result<Model> {
        let mut model = Model::build(&cfg, &RngStream::new(0))?;
        let mut tensors = tensors;
        for (name, slot) in model.params.iter_mut().chain(model.buffers.iter_mut()) {
            let t = tensors
                .shift_remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    /// Trainable parameters in schema order.
    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    /// Running batch-norm statistics.
    pub fn buffers(&self) -> &ParamMap {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    /// Replaces one trainable tensor (shape must match).
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!("{name}: shape {:?} vs {:?}", value.shape(), slot.shape())));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Every stored tensor, parameters first then buffers.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.buffers.iter()).map(|(n, t)| (n, t.as_ref()))
    }

    /// Exact number of trainable scalars (batch-norm gamma/beta included,
    /// running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Names of the weights subject to the max-norm constraint: the hidden
    /// fully-connected layers.
    pub fn constrained_params(&self) -> Vec<String> {
        (1..=self.config.fc_layers).map(|j| format!("fc{j}.weight")).collect()
    }

    /// Records the network on `tape`. `input` is `[B, L, model_input_depth]`;
    /// `valid` (length `B·L`) restricts train-mode batch statistics to real
    /// residues. Dropout streams are derived from `rng` per layer.
    pub fn forward(&self, tape: &mut Tape, input: Var, valid: Option<&[bool]>, mode: Mode, rng: &RngStream) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let x = tape.value(input);
        if x.rank() != 3 || x.last_dim() != cfg.model_input_depth() {
            return Err(Error::dim(format!(
                "model expects [B, L, {}] input, got {:?}",
                cfg.model_input_depth(),
                x.shape()
            )));
        }
        let mut layer_key = 0u64;
        let mut bn_stats = Vec::new();
        let mut drop = |tape: &mut Tape, v: Var| -> Result<Var> {
            layer_key += 1;
            let mut stream = rng.derive(layer_key);
            tape.dropout(v, cfg.dropout_rate, mode, &mut stream)
        };

        let mut h = input;
        for blk in 1..=cfg.num_blocks {
            let block_in = h;
            if !cfg.multiscale_banks.is_empty() {
                let banks = cfg
                    .multiscale_banks
                    .iter()
                    .map(|bank| {
                        Ok((
                            self.leaf(tape, &format!("block{blk}.ms.w{}", bank.width))?,
                            self.leaf(tape, &format!("block{blk}.ms.b{}", bank.width))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let y = tape.multiscale(h, &banks)?;
                let y = self.bn_relu(tape, y, &format!("block{blk}.ms.bn"), valid, mode, &mut bn_stats)?;
                h = drop(tape, y)?;
            }
            if cfg.single_conv.is_some() {
                let w = self.leaf(tape, &format!("block{blk}.conv.w"))?;
                let b = self.leaf(tape, &format!("block{blk}.conv.b"))?;
                let y = tape.conv1d(h, w, b)?;
                let y = self.bn_relu(tape, y, &format!("block{blk}.conv.bn"), valid, mode, &mut bn_stats)?;
                h = drop(tape, y)?;
            }
            if cfg.residual_connections && blk < cfg.num_blocks {
                let src = match cfg.residual_source {
                    ResidualSource::BlockInput => block_in,
                    ResidualSource::BlockOutput => h,
                };
                let w = self.leaf(tape, &format!("block{blk}.res.w"))?;
                let b = self.leaf(tape, &format!("block{blk}.res.b"))?;
                let proj = tape.conv1d(src, w, b)?;
                h = tape.concat(&[h, proj])?;
            }
        }

        h = tape.window(h, cfg.fc_window)?;
        for j in 1..=cfg.fc_layers {
            let w = self.leaf(tape, &format!("fc{j}.weight"))?;
            let b = self.leaf(tape, &format!("fc{j}.bias"))?;
            let y = tape.dense(h, w, b)?;
            let y = tape.relu(y)?;
            h = drop(tape, y)?;
        }
        let w = self.leaf(tape, "out.weight")?;
        let b = self.leaf(tape, "out.bias")?;
        let logits = tape.dense(h, w, b)?;
        Ok(ForwardOutput { logits, bn_stats })
    }

    fn leaf(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        tape.param(name, Arc::clone(t))
    }

    fn bn_relu(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        valid: Option<&[bool]>,
        mode: Mode,
        stats: &mut BnUpdates,
    ) -> Result<Var> {
        let gamma = self.leaf(tape, &format!("{prefix}.gamma"))?;
        let beta = self.leaf(tape, &format!("{prefix}.beta"))?;
        let y = match mode {
            Mode::Train => {
                let (y, s) = tape.batchnorm_train(x, gamma, beta, valid)?;
                stats.push((prefix.to_string(), s));
                y
            }
            Mode::Infer => {
                let mean = &self.buffers[&format!("{prefix}.running_mean")];
                let var = &self.buffers[&format!("{prefix}.running_var")];
                tape.batchnorm_infer(x, gamma, beta, mean, var)?
            }
        };
        tape.relu(y)
    }

    /// Infer-mode logits `[B, L, 8]` for `input: [B, L, model_input_depth]`.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let out = self.forward(&mut tape, x, None, Mode::Infer, &RngStream::new(0))?;
        Ok(tape.value(out.logits).clone())
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn apply_bn_stats(&mut self, updates: &BnUpdates) {
        for (prefix, s) in updates {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let slot = self.buffers.get_mut(&format!("{prefix}.{suffix}")).expect("known prefix");
                let t = Arc::make_mut(slot);
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (BN_MOMENTUM * f64::from(*r) + (1.0 - BN_MOMENTUM) * b) as f32;
                }
            }
        }
    }
}

struct Builder {
    params: ParamMap,
    buffers: ParamMap,
    rng: RngStream,
}

impl Builder {
    fn stream(&self) -> RngStream {
        self.rng.derive(self.params.len() as u64)
    }

    fn conv(&mut self, w: &str, b: &str, width: usize, din: usize, dout: usize) {
        let mut s = self.stream();
        self.params.insert(w.into(), Arc::new(uniform_init(&[width, din, dout], width * din, &mut s)));
        self.params.insert(b.into(), Arc::new(Tensor::zeros(&[dout])));
    }

    fn dense(&mut self, w: &str, b: &str, din: usize, dout: usize) {
        let mut s = self.stream();
        self.params.insert(w.into(), Arc::new(uniform_init(&[din, dout], din, &mut s)));
        self.params.insert(b.into(), Arc::new(Tensor::zeros(&[dout])));
    }

    fn bn(&mut self, prefix: &str, depth: usize) {
        self.params.insert(format!("{prefix}.gamma"), Arc::new(Tensor::filled(&[depth], 1.0)));
        self.params.insert(format!("{prefix}.beta"), Arc::new(Tensor::zeros(&[depth])));
        self.buffers.insert(format!("{prefix}.running_mean"), Arc::new(Tensor::zeros(&[depth])));
        self.buffers.insert(format!("{prefix}.running_var"), Arc::new(Tensor::filled(&[depth], 1.0)));
    }
}

/// Appends the label-context channels to `features: [B, L, D]`.
///
/// Channel `D + c` at position `t` is the one-hot of `labels[t - shift]` when
/// `t >= shift` and that position is valid; otherwise channel `D + 8`, the
/// unknown/before-start marker, is set.
pub fn append_label_context(features: &Tensor, labels: &[u8], mask: &[bool], shift: usize) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::dim(format!("features must be [B, L, D], got {:?}", features.shape())));
    }
    let (batch, len, d) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if labels.len() != batch * len || mask.len() != batch * len {
        return Err(Error::dim("labels and mask must have B·L entries"));
    }
    let out_d = d + CONTEXT_CHANNELS;
    let mut out = vec![0.0f32; batch * len * out_d];
    for b in 0..batch {
        for t in 0..len {
            let row = (b * len + t) * out_d;
            out[row..row + d].copy_from_slice(&features.data()[(b * len + t) * d..(b * len + t + 1) * d]);
            let ch = match t.checked_sub(shift) {
                Some(s) if mask[b * len + s] => usize::from(labels[b * len + s]),
                _ => NUM_CLASSES,
            };
            if ch > NUM_CLASSES {
                return Err(Error::Contract(format!("label {ch} out of range")));
            }
            out[row + d + ch] = 1.0;
        }
    }
    Tensor::new(vec![batch, len, out_d], out)
}
