//! Per-residue accuracy and confusion counts.

use serde::{Deserialize, Serialize};

use crate::config::NUM_CLASSES;
use crate::error::{Error, Result};

pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub q8: f64,
    /// `confusion[truth][pred]`.
    pub confusion: Confusion,
    pub residues: u64,
}

fn check(pred: &[u8], truth: &[u8], mask: &[bool]) -> Result<()> {
    if pred.len() != truth.len() || truth.len() != mask.len() {
        return Err(Error::dim(format!(
            "pred {}, truth {}, mask {} lengths differ",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| usize::from(c) >= NUM_CLASSES) {
        return Err(Error::Contract(format!("class {bad} out of range")));
    }
    Ok(())
}

pub fn confusion(pred: &[u8], truth: &[u8], mask: &[bool]) -> Result<Confusion> {
    check(pred, truth, mask)?;
    let mut c = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for ((&p, &t), _) in pred.iter().zip(truth).zip(mask).filter(|(_, &m)| m) {
        c[usize::from(t)][usize::from(p)] += 1;
    }
    Ok(c)
}

/// Fraction of valid residues predicted correctly.
pub fn q8_accuracy(pred: &[u8], truth: &[u8], mask: &[bool]) -> Result<f64> {
    Ok(EvalReport::from_confusion(confusion(pred, truth, mask)?)?.q8)
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Result<EvalReport> {
        let residues: u64 = confusion.iter().flatten().sum();
        if residues == 0 {
            return Err(Error::UndefinedMetric);
        }
        let correct: u64 = (0..NUM_CLASSES).map(|i| confusion[i][i]).sum();
        Ok(EvalReport {
            q8: correct as f64 / residues as f64,
            confusion,
            residues,
        })
    }

    pub fn new(pred: &[u8], truth: &[u8], mask: &[bool]) -> Result<EvalReport> {
        EvalReport::from_confusion(confusion(pred, truth, mask)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_correct() {
        assert_eq!(q8_accuracy(&[1, 2, 3], &[1, 2, 3], &[true; 3]).unwrap(), 1.0);
    }

    #[test]
    fn padding_excluded() {
        let truth = vec![4u8; 700];
        let mut pred = vec![0u8; 700];
        pred[..70].fill(4);
        let mask: Vec<bool> = (0..700).map(|t| t < 100).collect();
        let r = EvalReport::new(&pred, &truth, &mask).unwrap();
        assert!((r.q8 - 0.70).abs() < 1e-12);
        assert_eq!(r.residues, 100);
        assert_eq!(r.confusion[4][4], 70);
        assert_eq!(r.confusion[4][0], 30);
    }

    #[test]
    fn empty_mask_is_undefined() {
        assert!(matches!(q8_accuracy(&[0], &[0], &[false]), Err(Error::UndefinedMetric)));
    }

    #[test]
    fn json_round_trip() {
        let r = EvalReport::new(&[0, 1, 7], &[0, 2, 7], &[true; 3]).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
