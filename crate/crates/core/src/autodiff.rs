//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output and whatever context the
//! backward pass needs. Nodes only reference earlier nodes, so the tape is a
//! DAG in topological order and a single reverse sweep visits each node once.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, BnSaved, Mode};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T: Element> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var },
    Concat { inputs: Vec<Var> },
    Relu { x: Var },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: BnSaved<T> },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, mean: Tensor<T>, var: Tensor<T> },
    Dropout { x: Var, mask: Option<Vec<f64>> },
    Window { x: Var, window: usize },
    SoftmaxXent { logits: Var, probs: Tensor<T>, labels: Vec<u8>, mask: Vec<bool> },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Tensor<T> },
}

struct Node<T: Element> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value: Arc::new(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Unnamed leaf (data, or anything whose gradient is read via [`Gradients::wrt`]).
    pub fn input(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf; names must be unique on a tape.
    pub fn param(&mut self, name: &str, value: impl Into<Arc<Tensor<T>>>) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let v = self.input(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Dense { x, w, b }, "dense")
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::conv1d_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Conv1d { x, w, b }, "conv1d")
    }

    /// Convolution banks over `x`, depth-concatenated in bank order.
    pub fn multiscale(&mut self, x: Var, banks: &[(Var, Var)]) -> Result<Var> {
        if banks.is_empty() {
            return Err(Error::dim("multi-scale layer needs at least one bank"));
        }
        let outs = banks
            .iter()
            .map(|&(w, b)| self.conv1d(x, w, b))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        self.concat(&outs)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let y = {
            let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
            ops::depth_concat(&vals)?
        };
        self.push(y, Op::Concat { inputs: xs.to_vec() }, "depth_concat")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x }, "relu")
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, valid: Option<&[bool]>) -> Result<(Var, BatchStats)> {
        let (y, saved, stats) = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), valid)?;
        let v = self.push(y, Op::BatchNormTrain { x, gamma, beta, saved }, "batchnorm")?;
        Ok((v, stats))
    }

    pub fn batchnorm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>) -> Result<Var> {
        let y = ops::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), mean, var)?;
        let op = Op::BatchNormInfer {
            x,
            gamma,
            beta,
            mean: mean.clone(),
            var: var.clone(),
        };
        self.push(y, op, "batchnorm")
    }

    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut RngStream) -> Result<Var> {
        let (y, mask) = ops::dropout(self.value(x), rate, mode, rng)?;
        self.push(y, Op::Dropout { x, mask }, "dropout")
    }

    /// Dropout with caller-supplied multipliers (one per element).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim("dropout mask length differs from input"));
        }
        let y = ops::apply_mask(self.value(x), &mask);
        self.push(y, Op::Dropout { x, mask: Some(mask) }, "dropout")
    }

    pub fn window(&mut self, x: Var, window: usize) -> Result<Var> {
        let y = ops::window_gather(self.value(x), window)?;
        self.push(y, Op::Window { x, window }, "window_gather")
    }

    /// Masked mean cross-entropy; the result is a scalar node.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[u8], mask: &[bool]) -> Result<Var> {
        let (loss, probs) = ops::softmax_xent_masked(self.value(logits), labels, mask)?;
        let op = Op::SoftmaxXent {
            logits,
            probs,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, "softmax_xent")
    }

    /// Softmax probabilities saved by a [`Tape::softmax_xent`] node.
    pub fn probs(&self, loss: Var) -> Option<&Tensor<T>> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxXent { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// `Σ weights ⊙ x`, a scalar probe used to check vector-valued ops.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.numel() != self.value(x).numel() {
            return Err(Error::dim("weighted_sum weights differ in size from input"));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a.to_f64() * b.to_f64())
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, "weighted_sum")
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Conv1d { x, w, b } => {
                    let (dx, dw, db) = ops::conv1d_backward(self.value(*x), self.value(*w), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Concat { inputs } => {
                    let depths: Vec<usize> = inputs.iter().map(|&v| self.value(v).last_dim()).collect();
                    for (v, part) in inputs.iter().zip(ops::depth_split(&g, &depths)?) {
                        accumulate(&mut grads, *v, part);
                    }
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNormTrain { x, gamma, beta, saved } => {
                    let (dx, dg, db) = ops::batchnorm_train_backward(saved, self.value(*gamma), &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::BatchNormInfer { x, gamma, beta, mean, var } => {
                    let (dx, dg, db) = ops::batchnorm_infer_backward(self.value(*x), self.value(*gamma), mean, var, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Dropout { x, mask } => {
                    let dx = match mask {
                        Some(m) => ops::apply_mask(&g, m),
                        None => g,
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Window { x, window } => {
                    let dx = ops::window_gather_backward(&g, *window, self.value(*x).last_dim());
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxXent { logits, probs, labels, mask } => {
                    let dl = ops::softmax_xent_backward(probs, labels, mask, g.item());
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum { x } => {
                    let dx = Tensor::filled(self.value(*x).shape(), g.item());
                    accumulate(&mut grads, *x, dx);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.item();
                    let data: Vec<f64> = weights.data().iter().map(|w| w.to_f64() * s).collect();
                    accumulate(&mut grads, *x, Tensor::from_f64(weights.shape().to_vec(), &data)?);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = T::from_f64(a.to_f64() + b.to_f64());
            }
        }
        slot => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient of every named parameter, in registration order.
    pub fn by_name(&self) -> IndexMap<String, Tensor<T>> {
        self.params.iter().map(|(n, &v)| (n.clone(), self.wrt(v))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::from_f64(vec![2, 3], &[1., -2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dense_chain_rule_2x2() {
        // loss = sum(x·W + b); dL/dW[i,j] = sum_rows x[r,i]; dL/dx[r,i] = sum_j W[i,j]
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap());
        let w = tape.param("w", Tensor::from_f64(vec![2, 2], &[0.5, -1., 2., 0.25]).unwrap()).unwrap();
        let b = tape.param("b", Tensor::from_f64(vec![2], &[0., 0.]).unwrap()).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[4., 4., 6., 6.]);
        assert_eq!(g.wrt(b).data(), &[2., 2.]);
        assert_eq!(g.wrt(x).data(), &[-0.5, 2.25, -0.5, 2.25]);
    }

    #[test]
    fn infer_dropout_passes_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(vec![3], &[1., 2., 3.]).unwrap());
        let y = tape.dropout(x, 0.5, Mode::Infer, &mut RngStream::new(0)).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[1., 1., 1.]);
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::from_f64(vec![2], &[1., 2.]).unwrap()).unwrap();
        tape.param("unused", Tensor::from_f64(vec![3], &[1., 2., 3.]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        let by_name = tape.backward(s).unwrap().by_name();
        assert_eq!(by_name["unused"].data(), &[0., 0., 0.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(vec![2], &[1., 2.]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut tape = Tape::<f32>::new();
        tape.param("a", Tensor::zeros(&[1])).unwrap();
        assert!(tape.param("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::from_f64(vec![1, 2, 1], &[1., 2.]).unwrap());
        let b = tape.input(Tensor::from_f64(vec![1, 2, 2], &[3., 4., 5., 6.]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        let w = Tensor::from_f64(vec![1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let s = tape.weighted_sum(c, w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[1., 4.]);
        assert_eq!(g.wrt(b).data(), &[2., 3., 5., 6.]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::new(vec![1, 1], vec![f32::MAX]).unwrap());
        let w = tape.input(Tensor::new(vec![1, 1], vec![f32::MAX]).unwrap());
        let b = tape.input(Tensor::zeros(&[1]));
        assert!(matches!(tape.dense(x, w, b), Err(Error::NonFinite("dense"))));
    }
}
