//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::ops::Mode;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Tolerance for every op except batch normalization in train mode.
pub const TOLERANCE: f64 = 1e-4;
/// Batch-norm train mode differentiates through the batch variance.
pub const BN_TOLERANCE: f64 = 1e-3;

/// Maximum per-coordinate relative error between the analytic gradient and a
/// central difference, over every coordinate of every input.
///
/// `f` maps the input leaves to a scalar node; it is re-run once per perturbed
/// coordinate, so any randomness inside it must be seeded deterministically.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Outcome of one check in [`standard_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn normal(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.normal() * scale).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Values bounded away from the ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let x = rng.normal();
            if x >= 0.0 {
                x + 0.1
            } else {
                x - 0.1
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Every differentiable layer checked once per seed.
pub fn standard_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for &seed in seeds {
        let mut rng = RngStream::new(seed);
        let mut push = |name: &str, err: f64, tol: f64| {
            results.push(CheckResult {
                name: name.to_string(),
                seed,
                max_rel_error: err,
                tolerance: tol,
            })
        };

        // dense on a random 3x4 input
        let probe = normal(&[3, 5], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                t.weighted_sum(y, probe.clone())
            },
            &[normal(&[3, 4], 1.0, &mut rng), normal(&[4, 5], 0.5, &mut rng), normal(&[5], 0.5, &mut rng)],
            DEFAULT_EPSILON,
        )?;
        push("dense", err, TOLERANCE);

        for k in [1usize, 3, 7, 9] {
            let probe = normal(&[2, 20, 2], 1.0, &mut rng);
            let err = grad_check(
                |t, v| {
                    let y = t.conv1d(v[0], v[1], v[2])?;
                    t.weighted_sum(y, probe.clone())
                },
                &[normal(&[2, 20, 3], 1.0, &mut rng), normal(&[k, 3, 2], 0.5, &mut rng), normal(&[2], 0.5, &mut rng)],
                DEFAULT_EPSILON,
            )?;
            push(&format!("conv1d_k{k}"), err, TOLERANCE);
        }

        let probe = normal(&[2, 12, 6], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.multiscale(v[0], &[(v[1], v[2]), (v[3], v[4]), (v[5], v[6])])?;
                t.weighted_sum(y, probe.clone())
            },
            &[
                normal(&[2, 12, 3], 1.0, &mut rng),
                normal(&[3, 3, 2], 0.5, &mut rng),
                normal(&[2], 0.5, &mut rng),
                normal(&[5, 3, 2], 0.5, &mut rng),
                normal(&[2], 0.5, &mut rng),
                normal(&[7, 3, 2], 0.5, &mut rng),
                normal(&[2], 0.5, &mut rng),
            ],
            DEFAULT_EPSILON,
        )?;
        push("multiscale", err, TOLERANCE);

        // Train-mode BN over [B=2, L=8, D=3] with two padding rows excluded from the statistics.
        let probe = normal(&[2, 8, 3], 1.0, &mut rng);
        let valid: Vec<bool> = (0..16).map(|r| r % 8 < 7).collect();
        let err = grad_check(
            |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2], Some(&valid))?;
                t.weighted_sum(y, probe.clone())
            },
            &[
                normal(&[2, 8, 3], 2.0, &mut rng),
                normal(&[3], 1.0, &mut rng),
                normal(&[3], 1.0, &mut rng),
            ],
            DEFAULT_EPSILON,
        )?;
        push("batchnorm_train", err, BN_TOLERANCE);

        let probe = normal(&[4, 3], 1.0, &mut rng);
        let mean = normal(&[3], 1.0, &mut rng);
        let var: Tensor<f64> = Tensor::from_f64(vec![3], &[0.5, 1.0, 2.0])?;
        let err = grad_check(
            |t, v| {
                let y = t.batchnorm_infer(v[0], v[1], v[2], &mean, &var)?;
                t.weighted_sum(y, probe.clone())
            },
            &[normal(&[4, 3], 1.0, &mut rng), normal(&[3], 1.0, &mut rng), normal(&[3], 1.0, &mut rng)],
            DEFAULT_EPSILON,
        )?;
        push("batchnorm_infer", err, TOLERANCE);

        let probe = normal(&[2, 6, 4], 1.0, &mut rng);
        let drop_seed = rng.next_u64();
        let err = grad_check(
            |t, v| {
                let mut stream = RngStream::new(drop_seed);
                let y = t.dropout(v[0], 0.4, Mode::Train, &mut stream)?;
                t.weighted_sum(y, probe.clone())
            },
            &[normal(&[2, 6, 4], 1.0, &mut rng)],
            DEFAULT_EPSILON,
        )?;
        push("dropout", err, TOLERANCE);

        let probe = normal(&[3, 7], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                t.weighted_sum(y, probe.clone())
            },
            &[away_from_zero(&[3, 7], &mut rng)],
            DEFAULT_EPSILON,
        )?;
        push("relu", err, TOLERANCE);

        let probe = normal(&[2, 9, 15], 1.0, &mut rng);
        let err = grad_check(
            |t, v| {
                let y = t.window(v[0], 5)?;
                t.weighted_sum(y, probe.clone())
            },
            &[normal(&[2, 9, 3], 1.0, &mut rng)],
            DEFAULT_EPSILON,
        )?;
        push("window_gather", err, TOLERANCE);

        let labels: Vec<u8> = (0..20).map(|_| rng.below(8) as u8).collect();
        let mask: Vec<bool> = (0..20).map(|i| i % 5 != 4).collect();
        let err = grad_check(
            |t, v| t.softmax_xent(v[0], &labels, &mask),
            &[normal(&[2, 10, 8], 2.0, &mut rng)],
            DEFAULT_EPSILON,
        )?;
        push("softmax_xent_masked", err, TOLERANCE);
    }
    Ok(results)
}
