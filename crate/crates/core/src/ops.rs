//! Forward and backward kernels for every primitive layer.
//!
//! Kernels are pure functions of their inputs. Dot products and reductions
//! accumulate in `f64` and results are rounded to the storage type once.
//! Work is split over batch items (or fixed-size row chunks) and partial
//! reductions are summed in index order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Epsilon added to the variance in batch normalization.
pub const BN_EPSILON: f64 = 1e-5;

/// Train/infer switch for dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

// Upper bound on the number of partial weight-gradient buffers in dense backward.
const MAX_ROW_CHUNKS: usize = 32;

fn row_chunk(rows: usize) -> usize {
    rows.div_ceil(MAX_ROW_CHUNKS).max(1)
}

fn sum_partials(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn to_tensor<T: Element>(shape: Vec<usize>, v: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, v).expect("kernel output shape is consistent")
}

// ---------------------------------------------------------------------------
// Dense

/// `y = x·W + b` over the trailing axis of `x`; leading axes are batch axes.
pub fn dense_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || b.rank() != 1 {
        return Err(Error::dim("dense weight must be [Din, Dout] and bias [Dout]"));
    }
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    if x.rank() < 2 || x.last_dim() != din {
        return Err(Error::dim(format!(
            "dense input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if b.numel() != dout {
        return Err(Error::dim(format!("dense bias {:?} does not match Dout {dout}", b.shape())));
    }
    let rows = x.rows();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::default(); rows * dout];
    out.par_chunks_mut(dout).enumerate().for_each(|(r, orow)| {
        let mut acc: Vec<f64> = bd.iter().map(|v| v.to_f64()).collect();
        let xrow = &xd[r * din..(r + 1) * din];
        for (i, xv) in xrow.iter().enumerate() {
            let xv = xv.to_f64();
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[i * dout..(i + 1) * dout];
            for (a, wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv.to_f64();
            }
        }
        for (o, a) in orow.iter_mut().zip(&acc) {
            *o = T::from_f64(*a);
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(shape, out)
}

/// Gradients of [`dense_forward`] with respect to `(x, W, b)`.
pub fn dense_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());

    let mut dx = vec![T::default(); rows * din];
    dx.par_chunks_mut(din).enumerate().for_each(|(r, dxrow)| {
        let grow = &gd[r * dout..(r + 1) * dout];
        for (i, d) in dxrow.iter_mut().enumerate() {
            let wrow = &wd[i * dout..(i + 1) * dout];
            let s: f64 = grow.iter().zip(wrow).map(|(g, w)| g.to_f64() * w.to_f64()).sum();
            *d = T::from_f64(s);
        }
    });

    let chunk = row_chunk(rows);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..rows.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut dw = vec![0.0; din * dout];
            let mut db = vec![0.0; dout];
            for r in c * chunk..((c + 1) * chunk).min(rows) {
                let grow: Vec<f64> = gd[r * dout..(r + 1) * dout].iter().map(|g| g.to_f64()).collect();
                for (a, g) in db.iter_mut().zip(&grow) {
                    *a += g;
                }
                for i in 0..din {
                    let xv = xd[r * din + i].to_f64();
                    if xv == 0.0 {
                        continue;
                    }
                    for (a, g) in dw[i * dout..(i + 1) * dout].iter_mut().zip(&grow) {
                        *a += xv * g;
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let (dws, dbs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    (
        to_tensor(x.shape().to_vec(), &dx.iter().map(|v| v.to_f64()).collect::<Vec<_>>()),
        to_tensor(vec![din, dout], &sum_partials(dws, din * dout)),
        to_tensor(vec![dout], &sum_partials(dbs, dout)),
    )
}

// ---------------------------------------------------------------------------
// Temporal convolution

fn conv_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    if w.rank() != 3 {
        return Err(Error::dim(format!("conv filters must be [K, Din, Dout], got {:?}", w.shape())));
    }
    let (k, din, dout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if k % 2 == 0 {
        return Err(Error::UnsupportedFilterWidth(k));
    }
    if x.rank() != 3 || x.shape()[2] != din {
        return Err(Error::dim(format!(
            "conv input {:?} does not match filters {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if b.numel() != dout {
        return Err(Error::dim(format!("conv bias {:?} does not match Dout {dout}", b.shape())));
    }
    Ok((x.shape()[0], x.shape()[1], k, din, dout))
}

/// Same-length 1-D convolution along the sequence axis of `x: [B, L, Din]`
/// with filters `[K, Din, Dout]` and symmetric zero padding of `(K-1)/2`.
pub fn conv1d_forward<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, len, k, din, dout) = conv_dims(x, w, b)?;
    let half = (k - 1) / 2;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::default(); batch * len * dout];
    out.par_chunks_mut(len * dout).enumerate().for_each(|(bi, ob)| {
        let xs = &xd[bi * len * din..(bi + 1) * len * din];
        let mut acc = vec![0.0f64; dout];
        for t in 0..len {
            for (a, bv) in acc.iter_mut().zip(bd) {
                *a = bv.to_f64();
            }
            for kk in 0..k {
                let Some(s) = (t + kk).checked_sub(half).filter(|&s| s < len) else {
                    continue;
                };
                let xrow = &xs[s * din..(s + 1) * din];
                for (i, xv) in xrow.iter().enumerate() {
                    let xv = xv.to_f64();
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[(kk * din + i) * dout..(kk * din + i + 1) * dout];
                    for (a, wv) in acc.iter_mut().zip(wrow) {
                        *a += xv * wv.to_f64();
                    }
                }
            }
            for (o, a) in ob[t * dout..(t + 1) * dout].iter_mut().zip(&acc) {
                *o = T::from_f64(*a);
            }
        }
    });
    Tensor::new(vec![batch, len, dout], out)
}

/// Gradients of [`conv1d_forward`] with respect to `(x, filters, bias)`.
pub fn conv1d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, len, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, dout) = (w.shape()[0], w.shape()[2]);
    let half = (k - 1) / 2;
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());

    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let xs = &xd[bi * len * din..(bi + 1) * len * din];
            let gs = &gd[bi * len * dout..(bi + 1) * len * dout];
            let mut dx = vec![0.0; len * din];
            let mut dw = vec![0.0; k * din * dout];
            let mut db = vec![0.0; dout];
            let mut grow = vec![0.0; dout];
            for t in 0..len {
                for (g, v) in grow.iter_mut().zip(&gs[t * dout..(t + 1) * dout]) {
                    *g = v.to_f64();
                }
                for (a, g) in db.iter_mut().zip(&grow) {
                    *a += g;
                }
                for kk in 0..k {
                    let Some(s) = (t + kk).checked_sub(half).filter(|&s| s < len) else {
                        continue;
                    };
                    for i in 0..din {
                        let base = (kk * din + i) * dout;
                        let wrow = &wd[base..base + dout];
                        dx[s * din + i] += grow.iter().zip(wrow).map(|(g, w)| g * w.to_f64()).sum::<f64>();
                        let xv = xs[s * din + i].to_f64();
                        if xv != 0.0 {
                            for (a, g) in dw[base..base + dout].iter_mut().zip(&grow) {
                                *a += xv * g;
                            }
                        }
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut dx_all = Vec::with_capacity(batch * len * din);
    let mut dws = Vec::with_capacity(batch);
    let mut dbs = Vec::with_capacity(batch);
    for (dx, dw, db) in parts {
        dx_all.extend(dx);
        dws.push(dw);
        dbs.push(db);
    }
    (
        to_tensor(x.shape().to_vec(), &dx_all),
        to_tensor(w.shape().to_vec(), &sum_partials(dws, k * din * dout)),
        to_tensor(vec![dout], &sum_partials(dbs, dout)),
    )
}

/// Parallel convolution banks over the same input, depth-concatenated in bank order.
pub fn multiscale_forward<T: Element>(x: &Tensor<T>, banks: &[(&Tensor<T>, &Tensor<T>)]) -> Result<Tensor<T>> {
    if banks.is_empty() {
        return Err(Error::dim("multi-scale layer needs at least one bank"));
    }
    let outs = banks
        .iter()
        .map(|(w, b)| conv1d_forward(x, w, b))
        .collect::<Result<Vec<_>>>()?;
    depth_concat(&outs.iter().collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// Depth concatenation

/// Stacks tensors along the trailing (depth) axis in argument order.
pub fn depth_concat<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::dim("depth_concat of zero tensors"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for x in xs {
        if x.rank() != first.rank() || &x.shape()[..x.rank() - 1] != lead {
            return Err(Error::dim(format!(
                "depth_concat leading dims differ: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
    }
    let rows = first.rows();
    let total: usize = xs.iter().map(|x| x.last_dim()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for x in xs {
            let d = x.last_dim();
            out.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

/// Inverse of [`depth_concat`]: splits the trailing axis into the given depths.
pub fn depth_split<T: Element>(x: &Tensor<T>, depths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = depths.iter().sum();
    if total != x.last_dim() {
        return Err(Error::dim(format!("cannot split depth {} into {depths:?}", x.last_dim())));
    }
    let rows = x.rows();
    let mut parts: Vec<Vec<T>> = depths.iter().map(|d| Vec::with_capacity(rows * d)).collect();
    for r in 0..rows {
        let row = &x.data()[r * total..(r + 1) * total];
        let mut off = 0;
        for (p, d) in parts.iter_mut().zip(depths) {
            p.extend_from_slice(&row[off..off + d]);
            off += d;
        }
    }
    let lead = &x.shape()[..x.rank() - 1];
    parts
        .into_iter()
        .zip(depths)
        .map(|(p, &d)| {
            let mut shape = lead.to_vec();
            shape.push(d);
            Tensor::new(shape, p)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Activation

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let zero = T::default();
    let data = x.data().iter().map(|&v| if v > zero { v } else { zero }).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Passes the gradient where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let zero = T::default();
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > zero { g } else { zero })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Context saved by [`batchnorm_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T: Element> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub valid: Option<Vec<bool>>,
    pub count: usize,
}

fn bn_check<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim(format!(
            "batch-norm parameters {:?}/{:?} do not match depth {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(d)
}

/// Train-mode batch normalization over every row of `x` viewed as `[N, D]`.
///
/// Statistics use only rows where `valid` is true (all rows when `None`);
/// the normalization is applied to every row.
pub fn batchnorm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    valid: Option<&[bool]>,
) -> Result<(Tensor<T>, BnSaved<T>, BatchStats)> {
    let d = bn_check(x, gamma, beta)?;
    let rows = x.rows();
    if let Some(v) = valid {
        if v.len() != rows {
            return Err(Error::dim(format!("batch-norm mask has {} entries for {rows} rows", v.len())));
        }
    }
    let is_valid = |r: usize| valid.is_none_or(|v| v[r]);
    let count = (0..rows).filter(|&r| is_valid(r)).count();
    if count < 2 {
        return Err(Error::InsufficientStatistics(count));
    }
    let xd = x.data();
    let mut mean = vec![0.0; d];
    for r in (0..rows).filter(|&r| is_valid(r)) {
        for (m, v) in mean.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
            *m += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut ss = vec![0.0; d];
    for r in (0..rows).filter(|&r| is_valid(r)) {
        for ((s, v), m) in ss.iter_mut().zip(&xd[r * d..(r + 1) * d]).zip(&mean) {
            let c = v.to_f64() - m;
            *s += c * c;
        }
    }
    let biased: Vec<f64> = ss.iter().map(|s| s / count as f64).collect();
    let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = Vec::with_capacity(rows * d);
    let mut y = Vec::with_capacity(rows * d);
    for r in 0..rows {
        for c in 0..d {
            let h = (xd[r * d + c].to_f64() - mean[c]) * inv_std[c];
            xhat.push(T::from_f64(h));
            y.push(T::from_f64(gd[c].to_f64() * h + bd[c].to_f64()));
        }
    }
    let stats = BatchStats {
        var: ss.iter().map(|s| s / (count - 1) as f64).collect(),
        mean,
        count,
    };
    let saved = BnSaved {
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        valid: valid.map(|v| v.to_vec()),
        count,
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, saved, stats))
}

/// Gradients of [`batchnorm_train`] with respect to `(x, gamma, beta)`,
/// including the dependence of the batch statistics on `x`.
pub fn batchnorm_train_backward<T: Element>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let rows = grad.rows();
    let (gd, hd) = (grad.data(), saved.xhat.data());
    let mut gsum = vec![0.0; d];
    let mut hsum = vec![0.0; d];
    for r in 0..rows {
        for c in 0..d {
            let g = gd[r * d + c].to_f64();
            gsum[c] += g;
            hsum[c] += g * hd[r * d + c].to_f64();
        }
    }
    let n = saved.count as f64;
    let mut dx = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let in_stats = saved.valid.as_ref().is_none_or(|v| v[r]);
        for c in 0..d {
            let g = gd[r * d + c].to_f64();
            let mut v = g;
            if in_stats {
                v -= gsum[c] / n + hd[r * d + c].to_f64() * hsum[c] / n;
            }
            dx.push(gamma.data()[c].to_f64() * saved.inv_std[c] * v);
        }
    }
    (
        to_tensor(grad.shape().to_vec(), &dx),
        to_tensor(gamma.shape().to_vec(), &hsum),
        to_tensor(gamma.shape().to_vec(), &gsum),
    )
}

/// Infer-mode batch normalization with fixed running statistics.
pub fn batchnorm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = bn_check(x, gamma, beta)?;
    if running_mean.numel() != d || running_var.numel() != d {
        return Err(Error::dim("running statistics do not match depth"));
    }
    let scale: Vec<f64> = (0..d)
        .map(|c| gamma.data()[c].to_f64() / (running_var.data()[c].to_f64() + BN_EPSILON).sqrt())
        .collect();
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter().enumerate().map(|(c, v)| {
                T::from_f64((v.to_f64() - running_mean.data()[c].to_f64()) * scale[c] + beta.data()[c].to_f64())
            })
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Gradients of [`batchnorm_infer`] with respect to `(x, gamma, beta)`.
pub fn batchnorm_infer_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let inv: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v.to_f64() + BN_EPSILON).sqrt()).collect();
    let mut dx = Vec::with_capacity(x.numel());
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for (i, (xv, g)) in x.data().iter().zip(grad.data()).enumerate() {
        let c = i % d;
        let g = g.to_f64();
        let h = (xv.to_f64() - running_mean.data()[c].to_f64()) * inv[c];
        dx.push(g * gamma.data()[c].to_f64() * inv[c]);
        dgamma[c] += g * h;
        dbeta[c] += g;
    }
    (
        to_tensor(x.shape().to_vec(), &dx),
        to_tensor(vec![d], &dgamma),
        to_tensor(vec![d], &dbeta),
    )
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    let keep = 1.0 / (1.0 - rate);
    if rate == 0.0 {
        return Ok(vec![1.0; n]);
    }
    Ok(rng.uniforms(n).into_iter().map(|u| if u < rate { 0.0 } else { keep }).collect())
}

/// Inverted dropout. Infer mode (or rate 0) is the identity and returns no mask.
pub fn dropout<T: Element>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor<T>, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mask = dropout_mask(x.numel(), rate, rng)?;
    Ok((apply_mask(x, &mask), Some(mask)))
}

pub fn apply_mask<T: Element>(x: &Tensor<T>, mask: &[f64]) -> Tensor<T> {
    let data = x.data().iter().zip(mask).map(|(v, m)| T::from_f64(v.to_f64() * m)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// Fixed-context window gather

/// Concatenates the feature vectors of `window` consecutive positions centred
/// on each position: `[B, L, D] -> [B, L, window·D]`, zeros beyond the ends.
pub fn window_gather<T: Element>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if window.is_multiple_of(2) {
        return Err(Error::UnsupportedFilterWidth(window));
    }
    if x.rank() != 3 {
        return Err(Error::dim(format!("window gather needs [B, L, D], got {:?}", x.shape())));
    }
    let (batch, len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = (window - 1) / 2;
    let mut out = vec![T::default(); batch * len * window * d];
    out.par_chunks_mut(len * window * d).enumerate().for_each(|(b, ob)| {
        let xs = &x.data()[b * len * d..(b + 1) * len * d];
        for t in 0..len {
            for j in 0..window {
                if let Some(s) = (t + j).checked_sub(half).filter(|&s| s < len) {
                    let dst = (t * window + j) * d;
                    ob[dst..dst + d].copy_from_slice(&xs[s * d..(s + 1) * d]);
                }
            }
        }
    });
    Tensor::new(vec![batch, len, window * d], out)
}

pub fn window_gather_backward<T: Element>(grad: &Tensor<T>, window: usize, depth: usize) -> Tensor<T> {
    let (batch, len) = (grad.shape()[0], grad.shape()[1]);
    let half = (window - 1) / 2;
    let mut dx = vec![0.0f64; batch * len * depth];
    dx.par_chunks_mut(len * depth).enumerate().for_each(|(b, db)| {
        let gs = &grad.data()[b * len * window * depth..(b + 1) * len * window * depth];
        for t in 0..len {
            for j in 0..window {
                if let Some(s) = (t + j).checked_sub(half).filter(|&s| s < len) {
                    let src = (t * window + j) * depth;
                    for (a, g) in db[s * depth..(s + 1) * depth].iter_mut().zip(&gs[src..src + depth]) {
                        *a += g.to_f64();
                    }
                }
            }
        }
    });
    to_tensor(vec![batch, len, depth], &dx)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

/// Numerically stable softmax over the trailing axis, in `f64`.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.last_dim();
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Mean cross-entropy over positions with `mask == true`.
///
/// Returns `(loss, probs)`; `probs` has the shape of `logits`.
pub fn softmax_xent_masked<T: Element>(
    logits: &Tensor<T>,
    labels: &[u8],
    mask: &[bool],
) -> Result<(f64, Tensor<T>)> {
    let c = logits.last_dim();
    let rows = logits.rows();
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "{rows} logit rows but {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let c_max = labels.iter().zip(mask).filter(|(_, &m)| m).map(|(&l, _)| l).max().unwrap();
    if usize::from(c_max) >= c {
        return Err(Error::Contract(format!("label {c_max} out of range for {c} classes")));
    }
    let mut loss = 0.0;
    for (r, row) in logits.data().chunks(c).enumerate() {
        if !mask[r] {
            continue;
        }
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[usize::from(labels[r])].to_f64();
    }
    let probs = softmax_rows(logits);
    Ok((loss / count as f64, to_tensor(logits.shape().to_vec(), &probs)))
}

/// Gradient of [`softmax_xent_masked`] with respect to the logits, scaled by `upstream`.
pub fn softmax_xent_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &[u8],
    mask: &[bool],
    upstream: f64,
) -> Tensor<T> {
    let c = probs.last_dim();
    let count = mask.iter().filter(|&&m| m).count() as f64;
    let mut g = vec![0.0; probs.numel()];
    for (r, row) in probs.data().chunks(c).enumerate() {
        if !mask[r] {
            continue;
        }
        for (k, p) in row.iter().enumerate() {
            let target = if k == usize::from(labels[r]) { 1.0 } else { 0.0 };
            g[r * c + k] = upstream * (p.to_f64() - target) / count;
        }
    }
    to_tensor(probs.shape().to_vec(), &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn dense_identity_weights() {
        let y = dense_forward(&t(&[1, 2], &[1., 2.]), &t(&[2, 2], &[1., 0., 0., 1.]), &t(&[2], &[0., 0.])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_multiply() {
        let y = dense_forward(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[1., 1.]), &t(&[1], &[3.])).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn dense_window17_shape() {
        let x = Tensor::<f32>::zeros(&[54, 714]);
        let y = dense_forward(&x, &Tensor::zeros(&[714, 455]), &Tensor::zeros(&[455])).unwrap();
        assert_eq!(y.shape(), &[54, 455]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let r = dense_forward(&t(&[1, 3], &[1., 2., 3.]), &t(&[2, 1], &[1., 1.]), &t(&[1], &[0.]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_width1_identity() {
        let x = t(&[1, 3, 2], &[1., 2., 3., 4., 5., 6.]);
        let w = t(&[1, 2, 2], &[1., 0., 0., 1.]);
        let y = conv1d_forward(&x, &w, &t(&[2], &[0., 0.])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_hand_example() {
        // zero pads [0,1,2,3,4,0] with filter [1,0,-1]
        let x = t(&[1, 4, 1], &[1., 2., 3., 4.]);
        let w = t(&[3, 1, 1], &[1., 0., -1.]);
        let y = conv1d_forward(&x, &w, &t(&[1], &[0.])).unwrap();
        assert_eq!(y.data(), &[-2.0, -2.0, -2.0, 3.0]);
    }

    #[test]
    fn conv_final_model_shape() {
        let x = Tensor::<f32>::zeros(&[54, 700, 42]);
        let y = conv1d_forward(&x, &Tensor::zeros(&[9, 42, 64]), &Tensor::zeros(&[64])).unwrap();
        assert_eq!(y.shape(), &[54, 700, 64]);
    }

    #[test]
    fn conv_even_width_rejected() {
        let r = conv1d_forward(&t(&[1, 4, 1], &[0.; 4]), &t(&[2, 1, 1], &[1., 1.]), &t(&[1], &[0.]));
        assert!(matches!(r, Err(Error::UnsupportedFilterWidth(2))));
    }

    #[test]
    fn multiscale_depths() {
        let x = Tensor::<f32>::zeros(&[1, 10, 42]);
        let banks: Vec<(Tensor<f32>, Tensor<f32>)> = [3, 7, 9]
            .iter()
            .map(|&k| (Tensor::zeros(&[k, 42, 64]), Tensor::zeros(&[64])))
            .collect();
        let refs: Vec<_> = banks.iter().map(|(w, b)| (w, b)).collect();
        assert_eq!(multiscale_forward(&x, &refs).unwrap().shape(), &[1, 10, 192]);
    }

    #[test]
    fn multiscale_single_bank_is_conv() {
        let x = t(&[1, 4, 1], &[1., 2., 3., 4.]);
        let w = t(&[3, 1, 1], &[1., 0., -1.]);
        let b = t(&[1], &[0.5]);
        assert_eq!(multiscale_forward(&x, &[(&w, &b)]).unwrap(), conv1d_forward(&x, &w, &b).unwrap());
    }

    #[test]
    fn multiscale_duplicate_identity() {
        let x = t(&[1, 2, 1], &[3., 4.]);
        let w = t(&[1, 1, 1], &[1.]);
        let b = t(&[1], &[0.]);
        let y = multiscale_forward(&x, &[(&w, &b), (&w, &b)]).unwrap();
        assert_eq!(y.data(), &[3., 3., 4., 4.]);
    }

    #[test]
    fn concat_order_and_split() {
        let a = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let b = t(&[1, 2, 3], &[5., 6., 7., 8., 9., 10.]);
        let c = depth_concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 2, 5]);
        assert_eq!(c.data(), &[1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let parts = depth_split(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(depth_concat(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_block_depths() {
        let a = Tensor::<f32>::zeros(&[2, 5, 24]);
        let b = Tensor::<f32>::zeros(&[2, 5, 96]);
        assert_eq!(depth_concat(&[&a, &b]).unwrap().shape(), &[2, 5, 120]);
        let c = Tensor::<f32>::zeros(&[2, 4, 96]);
        assert!(depth_concat(&[&a, &c]).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let x = t(&[3], &[3., -3., 0.]);
        let g = relu_backward(&x, &t(&[3], &[1., 1., 1.]));
        assert_eq!(g.data(), &[1., 0., 0.]);
    }

    #[test]
    fn batchnorm_two_values() {
        let x = t(&[2, 1], &[1., 3.]);
        let (y, _, stats) = batchnorm_train(&x, &t(&[1], &[1.]), &t(&[1], &[0.]), None).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
        assert_eq!(stats.mean, vec![2.0]);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = t(&[4, 1], &[5.; 4]);
        let (y, _, _) = batchnorm_train(&x, &t(&[1], &[2.]), &t(&[1], &[0.7]), None).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-9));
    }

    #[test]
    fn batchnorm_infer_identity_stats() {
        let x = t(&[3, 1], &[-1., 0.5, 2.]);
        let one = t(&[1], &[1.]);
        let zero = t(&[1], &[0.]);
        let y = batchnorm_infer(&x, &one, &zero, &zero, &one).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_needs_two_valid_rows() {
        let x = t(&[3, 1], &[1., 2., 3.]);
        let r = batchnorm_train(&x, &t(&[1], &[1.]), &t(&[1], &[0.]), Some(&[true, false, false]));
        assert!(matches!(r, Err(Error::InsufficientStatistics(1))));
    }

    #[test]
    fn batchnorm_masked_rows_excluded_from_stats() {
        let x = t(&[3, 1], &[1., 3., 100.]);
        let (y, _, stats) = batchnorm_train(&x, &t(&[1], &[1.]), &t(&[1], &[0.]), Some(&[true, true, false])).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = t(&[4], &[1., 2., 3., 4.]);
        let mut rng = RngStream::new(1);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Infer, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap().0, x);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn dropout_expectation() {
        let x = Tensor::<f64>::filled(&[10_000], 1.0);
        let mut rng = RngStream::new(42);
        let (y, _) = dropout(&x, 0.4, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn window_gather_edges_zero() {
        let x = t(&[1, 3, 1], &[1., 2., 3.]);
        let y = window_gather(&x, 3).unwrap();
        assert_eq!(y.data(), &[0., 1., 2., 1., 2., 3., 2., 3., 0.]);
    }

    #[test]
    fn xent_uniform_is_ln8() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 8]);
        let (loss, probs) = softmax_xent_masked(&logits, &[3, 6], &[true, true]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((probs.data().iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn xent_hand_value() {
        let mut v = vec![0.0; 8];
        v[0] = 1.0;
        let (loss, _) = softmax_xent_masked(&t(&[1, 8], &v), &[0], &[true]).unwrap();
        let e = std::f64::consts::E;
        assert!((loss - (-(e / (e + 7.0)).ln())).abs() < 1e-12);
        assert!((loss - 1.2741).abs() < 1e-4);
    }

    #[test]
    fn xent_masked_position_contributes_nothing() {
        let logits = t(&[2, 8], &(0..16).map(|i| i as f64 * 0.3).collect::<Vec<_>>());
        let (a, probs) = softmax_xent_masked(&logits, &[1, 2], &[true, false]).unwrap();
        let (b, _) = softmax_xent_masked(&logits, &[1, 7], &[true, false]).unwrap();
        assert_eq!(a, b);
        let g = softmax_xent_backward(&probs, &[1, 2], &[true, false], 1.0);
        assert!(g.data()[8..].iter().all(|&v| v == 0.0));
        assert!(matches!(
            softmax_xent_masked(&logits, &[1, 2], &[false, false]),
            Err(Error::EmptyLoss)
        ));
    }
}
