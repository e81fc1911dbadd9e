use indexmap::IndexMap;
use proptest::prelude::*;
use std::sync::Arc;

use ssnet::autodiff::Tape;
use ssnet::data::{parse_npy, split_train_val, synth_toy_dataset, write_npy, NormStats, ToyRule, ValidationSize};
use ssnet::decode::{beam_search, log_probs_from_logits, sequence_score, Blend, FnScorer};
use ssnet::metrics::{confusion, q8_accuracy};
use ssnet::ops::{self, conv1d_forward, softmax_xent_masked};
use ssnet::optim::{lr_schedule, max_unit_norm, maxnorm_project, Adam};
use ssnet::rng::RngStream;
use ssnet::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn random_log_table(k: usize, seed: u64, pos: usize, prefix: &[u8]) -> Vec<f64> {
    let mut key = seed ^ ((pos as u64) << 32);
    for &p in prefix {
        key = key.wrapping_mul(7).wrapping_add(u64::from(p) + 1);
    }
    let mut rng = RngStream::new(key);
    let logits: Vec<f32> = (0..k).map(|_| (2.0 * rng.normal()) as f32).collect();
    log_probs_from_logits(&logits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn width_one_identity_conv_is_exact(b in 1usize..3, l in 1usize..12, d in 1usize..6, seed in any::<u64>()) {
        let x = random_tensor(&[b, l, d], seed);
        let mut w = vec![0f32; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let y = conv1d_forward(&x, &Tensor::new(vec![1, d, d], w).unwrap(), &Tensor::zeros(&[d])).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn concat_backward_splits_gradient(l in 1usize..6, da in 1usize..4, db in 1usize..4, seed in any::<u64>()) {
        let mut tape: Tape = Tape::new();
        let a = tape.param("a", random_tensor(&[1, l, da], seed)).unwrap();
        let b = tape.param("b", random_tensor(&[1, l, db], seed ^ 1)).unwrap();
        let y = tape.concat(&[a, b]).unwrap();
        let w = random_tensor(&[1, l, da + db], seed ^ 2);
        let loss = tape.weighted_sum(y, w.clone()).unwrap();
        let g = tape.backward(loss).unwrap().by_name();
        for t in 0..l {
            let row = &w.data()[t * (da + db)..(t + 1) * (da + db)];
            prop_assert_eq!(&g["a"].data()[t * da..(t + 1) * da], &row[..da]);
            prop_assert_eq!(&g["b"].data()[t * db..(t + 1) * db], &row[da..]);
        }
    }

    #[test]
    fn softmax_rows_normalize_and_relabeling_is_equivariant(
        rows in 1usize..10,
        seed in any::<u64>(),
        perm in Just((0u8..8).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let logits = random_tensor(&[rows, 8], seed);
        let mut rng = RngStream::new(seed ^ 9);
        let labels: Vec<u8> = (0..rows).map(|_| rng.below(8) as u8).collect();
        let mask = vec![true; rows];
        let (loss, probs) = softmax_xent_masked(&logits, &labels, &mask).unwrap();
        for r in 0..rows {
            let s: f64 = probs.data()[r * 8..(r + 1) * 8].iter().map(|&p| f64::from(p)).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
        let mut permuted = vec![0f32; rows * 8];
        for r in 0..rows {
            for c in 0..8 {
                permuted[r * 8 + usize::from(perm[c])] = logits.data()[r * 8 + c];
            }
        }
        let relabeled: Vec<u8> = labels.iter().map(|&y| perm[usize::from(y)]).collect();
        let (loss2, _) = softmax_xent_masked(&Tensor::new(vec![rows, 8], permuted).unwrap(), &relabeled, &mask).unwrap();
        prop_assert!((loss - loss2).abs() < 1e-9);
    }

    #[test]
    fn q8_is_relabeling_equivariant(
        n in 1usize..60,
        seed in any::<u64>(),
        perm in Just((0u8..8).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let mut rng = RngStream::new(seed);
        let pred: Vec<u8> = (0..n).map(|_| rng.below(8) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.below(8) as u8).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.7).collect();
        mask[0] = true;
        let q = q8_accuracy(&pred, &truth, &mask).unwrap();
        let p2: Vec<u8> = pred.iter().map(|&y| perm[usize::from(y)]).collect();
        let t2: Vec<u8> = truth.iter().map(|&y| perm[usize::from(y)]).collect();
        prop_assert_eq!(q, q8_accuracy(&p2, &t2, &mask).unwrap());
        let c = confusion(&pred, &truth, &mask).unwrap();
        let trace: u64 = (0..8).map(|i| c[i][i]).sum();
        let total: u64 = c.iter().flatten().sum();
        prop_assert_eq!(total as usize, mask.iter().filter(|&&m| m).count());
        prop_assert!((q - trace as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn maxnorm_caps_every_unit(din in 1usize..8, dout in 1usize..8, scale in 0.01f32..5.0, cap in 0.01f64..1.0, seed in any::<u64>()) {
        let mut w = random_tensor(&[din, dout], seed);
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
        let p = maxnorm_project(&w, cap, 1).unwrap();
        prop_assert!(max_unit_norm(&p) <= cap + 1e-6);
        for o in 0..dout {
            let norm: f64 = (0..din).map(|i| f64::from(w.data()[i * dout + o]).powi(2)).sum::<f64>().sqrt();
            for i in 0..din {
                let (a, b) = (w.data()[i * dout + o], p.data()[i * dout + o]);
                if norm <= cap {
                    prop_assert_eq!(a, b);
                } else {
                    prop_assert!((f64::from(b) - f64::from(a) * cap / norm).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn lr_schedule_halves_per_period(t in 0u64..1_000_000, base in 1e-5f64..1e-2, every in 1u64..200_000) {
        let expected = base * 0.5f64.powi((t / every) as i32);
        prop_assert!((lr_schedule(t, base, every) - expected).abs() <= 1e-15 * base);
    }

    #[test]
    fn dropout_is_unbiased(rate in 0.0f64..0.8, seed in any::<u64>()) {
        let x = Tensor::new(vec![10_000], vec![1.0f32; 10_000]).unwrap();
        let (y, _) = ops::dropout(&x, rate, ops::Mode::Train, &mut RngStream::new(seed)).unwrap();
        let mean = y.data().iter().map(|&v| f64::from(v)).sum::<f64>() / 10_000.0;
        prop_assert!((mean - 1.0).abs() < 0.05, "rate {} mean {}", rate, mean);
        let (z, _) = ops::dropout(&x, rate, ops::Mode::Infer, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(z.data(), x.data());
    }

    #[test]
    fn larger_beams_never_score_worse(len in 1usize..7, seed in any::<u64>()) {
        let scorer = FnScorer::new(3, len, |pos, prefix: &[u8]| random_log_table(3, seed, pos, prefix));
        let mut last = f64::NEG_INFINITY;
        for beam in [1, 2, 3, 5, 9, 27, 729] {
            let h = beam_search(&scorer, beam).unwrap();
            prop_assert!((sequence_score(&scorer, &h.labels).unwrap() - h.score).abs() < 1e-9);
            prop_assert!(h.score >= last - 1e-12);
            last = h.score;
        }
    }

    #[test]
    fn ensemble_ignores_logit_offsets(len in 1usize..6, seed in any::<u64>(), shift in -50.0f32..50.0, at in 0usize..6) {
        let raw = |salt: u64, pos: usize, prefix: &[u8], offset: f32| -> Vec<f64> {
            let mut rng = RngStream::new(salt ^ (pos as u64 * 131) ^ prefix.iter().map(|&p| u64::from(p) + 1).product::<u64>());
            let logits: Vec<f32> = (0..4).map(|_| 3.0 * rng.normal() as f32 + offset).collect();
            log_probs_from_logits(&logits)
        };
        let offset = |pos: usize| if pos == at { shift } else { 0.0 };
        let u = FnScorer::new(4, len, |pos, _: &[u8]| raw(seed, pos, &[], 0.0));
        let c = FnScorer::new(4, len, |pos, prefix: &[u8]| raw(seed ^ 5, pos, prefix, 0.0));
        let u2 = FnScorer::new(4, len, |pos, _: &[u8]| raw(seed, pos, &[], offset(pos)));
        let c2 = FnScorer::new(4, len, |pos, prefix: &[u8]| raw(seed ^ 5, pos, prefix, offset(pos)));
        let a = beam_search(&Blend::new(&u, &c, 0.45).unwrap(), 8).unwrap();
        let b = beam_search(&Blend::new(&u2, &c, 0.45).unwrap(), 8).unwrap();
        let d = beam_search(&Blend::new(&u, &c2, 0.45).unwrap(), 8).unwrap();
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert_eq!(&a.labels, &d.labels);
    }

    #[test]
    fn npy_round_trip(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let t = random_tensor(&[rows, cols], seed);
        let back = parse_npy(&write_npy(&[rows, cols], t.data())).unwrap();
        prop_assert_eq!(back.shape, vec![rows, cols]);
        prop_assert_eq!(back.data, t.data().to_vec());
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..40, seed in any::<u64>(), frac in 0.05f64..0.95) {
        let records = synth_toy_dataset(seed, n, 5, ToyRule::LocalWindow);
        let (train, val) = split_train_val(records.clone(), seed, ValidationSize::Fraction(frac)).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        let mut ids: Vec<String> = train.iter().chain(&val).map(|r| r.id.clone()).collect();
        ids.sort();
        let mut want: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        let (train2, _) = split_train_val(records, seed, ValidationSize::Fraction(frac)).unwrap();
        prop_assert_eq!(
            train.iter().map(|r| &r.id).collect::<Vec<_>>(),
            train2.iter().map(|r| &r.id).collect::<Vec<_>>()
        );
    }
}

#[test]
fn standardization_targets_unit_moments() {
    let mut records = synth_toy_dataset(3, 20, 50, ToyRule::LocalWindow);
    // Shift and scale the profile channels so the statistics are non-trivial.
    for r in &mut records {
        for (i, v) in r.features.data_mut().iter_mut().enumerate() {
            let c = i % 42;
            if c >= 21 {
                *v = *v * (1.0 + c as f32 / 10.0) + c as f32;
            }
        }
    }
    let stats = NormStats::fit(&records).unwrap();
    stats.apply(&mut records).unwrap();
    for c in 21..42 {
        let vals: Vec<f64> = records
            .iter()
            .flat_map(|r| r.features.data().chunks(42).map(move |row| f64::from(row[c])))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() < 1e-3, "channel {c} std {std}");
    }
    assert!(stats.apply(&mut records).is_err());
}

#[test]
fn adam_update_magnitude_tends_to_lr() {
    for g in [1e-4f32, 0.1, 3.0, -7.0] {
        let lr = 1e-3;
        let mut params: IndexMap<String, Arc<Tensor>> = IndexMap::new();
        params.insert("p".into(), Arc::new(Tensor::new(vec![1], vec![0.0]).unwrap()));
        let mut grads = IndexMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![1], vec![g]).unwrap());
        let mut adam = Adam::new();
        let mut prev = 0.0f64;
        for step in 1..=2000 {
            adam.step(&mut params, &grads, lr).unwrap();
            let now = f64::from(params["p"].data()[0]);
            if step % 500 == 0 {
                let update = (now - prev).abs();
                assert!((update - lr).abs() / lr < 0.01, "g {g} step {step} update {update}");
            }
            prev = now;
        }
        assert_eq!(adam.iteration(), 2000);
    }
}

#[test]
fn adam_first_step_by_hand() {
    let mut params: IndexMap<String, Arc<Tensor>> = IndexMap::new();
    params.insert("p".into(), Arc::new(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()));
    params.insert("q".into(), Arc::new(Tensor::new(vec![1], vec![0.25]).unwrap()));
    let mut grads = IndexMap::new();
    grads.insert("p".to_string(), Tensor::new(vec![2], vec![0.1, 0.1]).unwrap());
    grads.insert("q".to_string(), Tensor::zeros(&[1]));
    Adam::new().step(&mut params, &grads, 1e-3).unwrap();
    // m̂ = 0.1, v̂ = 0.01, so the step is 1e-3 · 0.1 / (0.1 + 1e-8).
    let want = 0.5 - 1e-3 * 0.1 / (0.1 + 1e-8);
    assert!((f64::from(params["p"].data()[0]) - want).abs() < 1e-7);
    assert_eq!(params["p"].data()[0], params["p"].data()[1]);
    assert_eq!(params["q"].data()[0], 0.25);
}
