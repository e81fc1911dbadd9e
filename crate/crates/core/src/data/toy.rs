//! Synthetic proteins with known labelling rules.

use serde::{Deserialize, Serialize};

use super::records::{ProteinRecord, RESIDUE_CHANNELS};
use crate::config::{FEATURE_DEPTH, NUM_CLASSES};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Number of distinct amino-acid types drawn by the generators.
pub const TOY_RESIDUE_TYPES: usize = 20;
/// Probability that a copy-prone label repeats its predecessor outright.
pub const COPY_REPEAT_PROB: f64 = 0.9;
/// Probability that a copy-prone residue reveals its label.
pub const COPY_SIGNAL_PROB: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyRule {
    /// Label determined by residue identities at offsets -2, 0, +2.
    LocalWindow,
    /// Long label runs with weakly informative residues.
    CopyProne,
}

impl std::str::FromStr for ToyRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "local-window" => Ok(ToyRule::LocalWindow),
            "copy-prone" => Ok(ToyRule::CopyProne),
            other => Err(format!("unknown toy rule {other}")),
        }
    }
}

fn parity(residues: &[usize], t: isize) -> u8 {
    usize::try_from(t)
        .ok()
        .and_then(|t| residues.get(t))
        .map_or(0, |r| (r % 2) as u8)
}

/// `4·g(r[t-2]) + 2·g(r[t]) + g(r[t+2])` with `g` the residue parity and 0
/// beyond either end.
pub fn local_window_label(residues: &[usize], t: usize) -> u8 {
    let t = t as isize;
    4 * parity(residues, t - 2) + 2 * parity(residues, t) + parity(residues, t + 2)
}

fn record(id: String, residues: &[usize], labels: Vec<u8>, rng: &mut RngStream, noise: f64) -> ProteinRecord {
    let len = residues.len();
    let mut f = vec![0.0f64; len * FEATURE_DEPTH];
    for (t, &r) in residues.iter().enumerate() {
        f[t * FEATURE_DEPTH + r] = 1.0;
        for c in RESIDUE_CHANNELS..FEATURE_DEPTH {
            f[t * FEATURE_DEPTH + c] = noise * rng.normal();
        }
    }
    ProteinRecord {
        id,
        length: len,
        features: Tensor::from_f64(vec![len, FEATURE_DEPTH], &f).expect("toy shape"),
        labels,
        mask: vec![true; len],
        pssm_normalized: false,
    }
}

/// `n_proteins` fully valid proteins of `length` residues.
pub fn synth_toy_dataset(seed: u64, n_proteins: usize, length: usize, rule: ToyRule) -> Vec<ProteinRecord> {
    let base = RngStream::new(seed);
    (0..n_proteins)
        .map(|i| {
            let mut rng = base.derive(i as u64);
            match rule {
                ToyRule::LocalWindow => {
                    let residues: Vec<usize> = (0..length).map(|_| rng.below(TOY_RESIDUE_TYPES)).collect();
                    let labels = (0..length).map(|t| local_window_label(&residues, t)).collect();
                    record(format!("toy{i}"), &residues, labels, &mut rng, 1.0)
                }
                ToyRule::CopyProne => {
                    let mut labels = Vec::with_capacity(length);
                    let mut residues = Vec::with_capacity(length);
                    for t in 0..length {
                        let y = if t > 0 && rng.next_f64() < COPY_REPEAT_PROB {
                            labels[t - 1]
                        } else {
                            rng.below(NUM_CLASSES) as u8
                        };
                        labels.push(y);
                        residues.push(if rng.next_f64() < COPY_SIGNAL_PROB {
                            usize::from(y)
                        } else {
                            rng.below(TOY_RESIDUE_TYPES)
                        });
                    }
                    record(format!("toy{i}"), &residues, labels, &mut rng, 1.0)
                }
            }
        })
        .collect()
}

/// Fraction of positions `t ≥ 1` whose label equals the previous one.
pub fn repeat_fraction(records: &[ProteinRecord]) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for r in records {
        for t in 1..r.grid_len() {
            if r.mask[t] && r.mask[t - 1] {
                total += 1;
                same += usize::from(r.labels[t] == r.labels[t - 1]);
            }
        }
    }
    same as f64 / total.max(1) as f64
}
