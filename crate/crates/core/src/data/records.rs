use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::npy::{parse_npy, write_npy, NpyArray};
use crate::config::{FEATURE_DEPTH, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::append_label_context;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Number of residue-identity channels in the feature vector.
pub const RESIDUE_CHANNELS: usize = 21;
/// Number of profile channels in the feature vector.
pub const PSSM_CHANNELS: usize = FEATURE_DEPTH - RESIDUE_CHANNELS;
/// Number of proteins held out for validation from the filtered training corpus.
pub const STANDARD_VAL_SIZE: usize = 256;

/// Column offsets inside one raw residue row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLayout {
    pub grid_length: usize,
    pub row_width: usize,
    /// First of 21 residue-identity columns.
    pub residue_start: usize,
    /// Residue padding marker, folded into the last residue channel.
    pub residue_noseq: usize,
    /// First of 8 label columns.
    pub label_start: usize,
    /// Label padding marker; set means "not a residue".
    pub label_noseq: usize,
    /// First of 21 profile columns.
    pub pssm_start: usize,
}

impl Default for ColumnLayout {
    fn default() -> Self {
        ColumnLayout {
            grid_length: 700,
            row_width: 57,
            residue_start: 0,
            residue_noseq: 21,
            label_start: 22,
            label_noseq: 30,
            pssm_start: 35,
        }
    }
}

impl ColumnLayout {
    pub fn validate(&self) -> Result<()> {
        let spans = [
            self.residue_start + RESIDUE_CHANNELS,
            self.residue_noseq + 1,
            self.label_start + NUM_CLASSES,
            self.label_noseq + 1,
            self.pssm_start + PSSM_CHANNELS,
        ];
        if self.grid_length == 0 || spans.iter().any(|&end| end > self.row_width) {
            return Err(Error::config(format!("column layout does not fit a row of width {}", self.row_width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProteinRecord {
    pub id: String,
    /// Number of valid residues.
    pub length: usize,
    /// `[grid, 42]`: 21 residue channels then 21 profile channels.
    pub features: Tensor,
    /// Class index per grid position (0 where masked).
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
    pub pssm_normalized: bool,
}

impl ProteinRecord {
    pub fn grid_len(&self) -> usize {
        self.mask.len()
    }
}

/// Splits a parsed array into per-protein `[grid, row_width]` rows.
fn protein_rows<'a>(arr: &'a NpyArray, layout: &ColumnLayout) -> Result<Vec<&'a [f32]>> {
    let per = layout.grid_length * layout.row_width;
    let n = match arr.shape.as_slice() {
        [n, flat] if *flat == per => *n,
        [n, g, w] if *g == layout.grid_length && *w == layout.row_width => *n,
        s => {
            return Err(Error::format(
                0,
                format!("shape {s:?} is not (N, {per}) or (N, {}, {})", layout.grid_length, layout.row_width),
            ))
        }
    };
    Ok((0..n).map(|i| &arr.data[i * per..(i + 1) * per]).collect())
}

/// Decodes one raw protein (`grid · row_width` values) into a record.
pub fn extract_features(raw: &[f32], layout: &ColumnLayout, index: usize) -> Result<ProteinRecord> {
    let (grid, w) = (layout.grid_length, layout.row_width);
    if raw.len() != grid * w {
        return Err(Error::dim(format!("raw protein has {} values, expected {}", raw.len(), grid * w)));
    }
    let bad = |position: usize, message: &str| Error::MalformedRecord {
        record: index,
        position,
        message: message.to_string(),
    };
    let mut features = vec![0.0f32; grid * FEATURE_DEPTH];
    let mut labels = vec![0u8; grid];
    let mut mask = vec![false; grid];
    for t in 0..grid {
        let row = &raw[t * w..(t + 1) * w];
        let out = &mut features[t * FEATURE_DEPTH..(t + 1) * FEATURE_DEPTH];
        let residue = &row[layout.residue_start..layout.residue_start + RESIDUE_CHANNELS];
        let noseq = row[layout.residue_noseq] > 0.5;
        if !noseq && residue.iter().all(|&v| v <= 0.5) {
            return Err(bad(t, "neither a residue nor the padding marker is set"));
        }
        out[..RESIDUE_CHANNELS].copy_from_slice(residue);
        if noseq {
            out[RESIDUE_CHANNELS - 1] = 1.0;
        }
        out[RESIDUE_CHANNELS..].copy_from_slice(&row[layout.pssm_start..layout.pssm_start + PSSM_CHANNELS]);

        if row[layout.label_noseq] <= 0.5 {
            let lab = &row[layout.label_start..layout.label_start + NUM_CLASSES];
            let (best, &v) = lab
                .iter()
                .enumerate()
                .fold((0, &lab[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            if v <= 0.5 {
                return Err(bad(t, "valid residue without a class label"));
            }
            labels[t] = best as u8;
            mask[t] = true;
        }
    }
    let length = mask.iter().filter(|&&m| m).count();
    if mask[..length].iter().any(|&m| !m) {
        log::warn!("record {index}: valid residues are not a contiguous prefix");
    }
    Ok(ProteinRecord {
        id: format!("protein{index}"),
        length,
        features: Tensor::new(vec![grid, FEATURE_DEPTH], features)?,
        labels,
        mask,
        pssm_normalized: false,
    })
}

pub fn records_from_array(arr: &NpyArray, layout: &ColumnLayout) -> Result<Vec<ProteinRecord>> {
    layout.validate()?;
    protein_rows(arr, layout)?
        .into_iter()
        .enumerate()
        .map(|(i, raw)| extract_features(raw, layout, i))
        .collect()
}

fn cache_path(source: &Path, cache_dir: &Path) -> Result<PathBuf> {
    let len = fs::metadata(source)?.len();
    let name = source.file_name().and_then(|n| n.to_str()).unwrap_or("data");
    Ok(cache_dir.join(format!("{name}.{len}.f4.npy")))
}

/// Loads a (possibly gzipped) array file into records. With a cache
/// directory, the decoded array is stored there uncompressed as `<f4` and
/// reused on later loads of the same source.
pub fn load_records(path: &Path, layout: &ColumnLayout, cache_dir: Option<&Path>) -> Result<Vec<ProteinRecord>> {
    let arr = match cache_dir {
        Some(dir) => {
            let cached = cache_path(path, dir)?;
            if cached.exists() {
                parse_npy(&fs::read(&cached)?)?
            } else {
                let arr = parse_npy(&fs::read(path)?)?;
                fs::create_dir_all(dir)?;
                fs::write(&cached, write_npy(&arr.shape, &arr.data))?;
                arr
            }
        }
        None => parse_npy(&fs::read(path)?)?,
    };
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or("data");
    let mut records = records_from_array(&arr, layout)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.id = format!("{stem}:{i}");
    }
    Ok(records)
}

/// Per-channel standardization of the profile block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and (population) standard deviation of each profile channel over
    /// the valid residues of `records`.
    pub fn fit(records: &[ProteinRecord]) -> Result<NormStats> {
        let mut sum = [0.0f64; PSSM_CHANNELS];
        let mut count = 0usize;
        for r in records {
            for t in (0..r.grid_len()).filter(|&t| r.mask[t]) {
                let row = &r.features.data()[t * FEATURE_DEPTH + RESIDUE_CHANNELS..(t + 1) * FEATURE_DEPTH];
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += f64::from(v);
                }
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::InsufficientStatistics(count));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = [0.0f64; PSSM_CHANNELS];
        for r in records {
            for t in (0..r.grid_len()).filter(|&t| r.mask[t]) {
                let row = &r.features.data()[t * FEATURE_DEPTH + RESIDUE_CHANNELS..(t + 1) * FEATURE_DEPTH];
                for ((s, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (f64::from(v) - m).powi(2);
                }
            }
        }
        let mut std = Vec::with_capacity(PSSM_CHANNELS);
        for (c, s) in sq.iter().enumerate() {
            let sd = (s / count as f64).sqrt();
            if !(sd > 1e-12) {
                return Err(Error::DegenerateChannel(c));
            }
            std.push(sd);
        }
        Ok(NormStats { mean, std })
    }

    /// Standardizes the profile block of every valid residue and zeroes it at
    /// padding positions. Refuses records that were already standardized.
    pub fn apply(&self, records: &mut [ProteinRecord]) -> Result<()> {
        if records.iter().any(|r| r.pssm_normalized) {
            return Err(Error::AlreadyNormalized);
        }
        for r in records.iter_mut() {
            let grid = r.grid_len();
            let data = r.features.data_mut();
            for t in 0..grid {
                let row = &mut data[t * FEATURE_DEPTH + RESIDUE_CHANNELS..(t + 1) * FEATURE_DEPTH];
                for (c, v) in row.iter_mut().enumerate() {
                    *v = if r.mask[t] {
                        ((f64::from(*v) - self.mean[c]) / self.std[c]) as f32
                    } else {
                        0.0
                    };
                }
            }
            r.pssm_normalized = true;
        }
        Ok(())
    }
}

/// How many records go to validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSize {
    Count(usize),
    Fraction(f64),
}

impl Default for ValidationSize {
    fn default() -> Self {
        ValidationSize::Count(STANDARD_VAL_SIZE)
    }
}

/// Seeded shuffle into disjoint `(train, val)` sets.
pub fn split_train_val(
    records: Vec<ProteinRecord>,
    seed: u64,
    size: ValidationSize,
) -> Result<(Vec<ProteinRecord>, Vec<ProteinRecord>)> {
    let n = records.len();
    if n < 2 {
        return Err(Error::config(format!("cannot split {n} records")));
    }
    let k = match size {
        ValidationSize::Count(k) if k >= 1 && k < n => k,
        ValidationSize::Count(k) => return Err(Error::config(format!("validation size {k} needs 1..{n}"))),
        ValidationSize::Fraction(f) if f > 0.0 && f < 1.0 => ((n as f64 * f).round() as usize).clamp(1, n - 1),
        ValidationSize::Fraction(f) => return Err(Error::config(format!("validation fraction {f} must lie in (0, 1)"))),
    };
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed).shuffle(&mut order);
    let mut in_val = vec![false; n];
    for &i in &order[..k] {
        in_val[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - k), Vec::with_capacity(k));
    for (r, v) in records.into_iter().zip(in_val) {
        if v {
            val.push(r);
        } else {
            train.push(r);
        }
    }
    Ok((train, val))
}

/// Stacked mini-batch: `features [B, L, 42]`, labels and mask of length `B·L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn grid_len(&self) -> usize {
        self.features.shape()[1]
    }

    /// Model input: features, plus ground-truth label context when `shift` is given.
    pub fn model_input(&self, shift: Option<usize>) -> Result<Tensor> {
        match shift {
            Some(s) => append_label_context(&self.features, &self.labels, &self.mask, s),
            None => Ok(self.features.clone()),
        }
    }
}

pub fn make_batch(records: &[ProteinRecord], indices: &[usize]) -> Result<Batch> {
    let first = indices
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let grid = records
        .get(*first)
        .ok_or_else(|| Error::Contract(format!("record index {first} out of range")))?
        .grid_len();
    let mut features = Vec::with_capacity(indices.len() * grid * FEATURE_DEPTH);
    let mut labels = Vec::with_capacity(indices.len() * grid);
    let mut mask = Vec::with_capacity(indices.len() * grid);
    for &i in indices {
        let r = records
            .get(i)
            .ok_or_else(|| Error::Contract(format!("record index {i} out of range")))?;
        if r.grid_len() != grid {
            return Err(Error::dim(format!("record {} has grid {}, batch uses {grid}", r.id, r.grid_len())));
        }
        features.extend_from_slice(r.features.data());
        labels.extend_from_slice(&r.labels);
        mask.extend_from_slice(&r.mask);
    }
    Ok(Batch {
        features: Tensor::new(vec![indices.len(), grid, FEATURE_DEPTH], features)?,
        labels,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: usize = 57;

    fn raw_protein(grid: usize, labels: &[(usize, u8)]) -> Vec<f32> {
        let mut raw = vec![0.0f32; grid * W];
        for t in 0..grid {
            let row = &mut raw[t * W..(t + 1) * W];
            match labels.get(t) {
                Some(&(res, lab)) => {
                    row[res] = 1.0;
                    row[22 + lab as usize] = 1.0;
                    row[35] = t as f32;
                }
                None => {
                    row[21] = 1.0;
                    row[30] = 1.0;
                }
            }
        }
        raw
    }

    fn layout(grid: usize) -> ColumnLayout {
        ColumnLayout {
            grid_length: grid,
            ..ColumnLayout::default()
        }
    }

    #[test]
    fn all_padding_row() {
        let raw = raw_protein(700, &[]);
        let r = extract_features(&raw, &ColumnLayout::default(), 0).unwrap();
        assert_eq!(r.length, 0);
        assert!(r.mask.iter().all(|m| !m));
    }

    #[test]
    fn class_three_at_start() {
        let raw = raw_protein(5, &[(4, 3), (0, 1)]);
        let r = extract_features(&raw, &layout(5), 0).unwrap();
        assert_eq!(r.labels[0], 3);
        assert!(r.mask[0]);
        assert_eq!(r.length, 2);
        for t in 0..5 {
            let onehot: f32 = r.features.data()[t * 42..t * 42 + 21].iter().sum();
            assert_eq!(onehot, 1.0);
        }
        assert_eq!(r.features.data()[4], 1.0);
    }

    #[test]
    fn zero_row_is_malformed() {
        let mut raw = raw_protein(3, &[(1, 2)]);
        raw[2 * W + 21] = 0.0;
        match extract_features(&raw, &layout(3), 7) {
            Err(Error::MalformedRecord { record, position, .. }) => assert_eq!((record, position), (7, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flat_and_cubic_shapes() {
        let flat = NpyArray {
            shape: vec![2, 39900],
            data: [raw_protein(700, &[]), raw_protein(700, &[(2, 5)])].concat(),
        };
        let recs = records_from_array(&flat, &ColumnLayout::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].labels[0], 5);
        let bad = NpyArray {
            shape: vec![1, 39899],
            data: vec![0.0; 39899],
        };
        assert!(matches!(records_from_array(&bad, &ColumnLayout::default()), Err(Error::Format { .. })));
    }

    fn toy_records(n: usize) -> Vec<ProteinRecord> {
        (0..n)
            .map(|i| {
                let labs: Vec<(usize, u8)> = (0..4 + i % 3).map(|t| ((t + i) % 20, (t % 8) as u8)).collect();
                extract_features(&raw_protein(8, &labs), &layout(8), i).unwrap()
            })
            .collect()
    }

    #[test]
    fn normalization_and_double_apply_guard() {
        let mut recs = toy_records(6);
        for r in recs.iter_mut() {
            let d = r.features.data_mut();
            for t in 0..8 {
                for c in 21..42 {
                    d[t * 42 + c] += (c as f32) * 0.1 + t as f32;
                }
            }
        }
        let stats = NormStats::fit(&recs).unwrap();
        stats.apply(&mut recs).unwrap();
        let after = NormStats::fit(&recs).unwrap();
        for c in 0..PSSM_CHANNELS {
            assert!(after.mean[c].abs() < 1e-4);
            assert!((after.std[c] - 1.0).abs() < 1e-3);
        }
        assert!(recs.iter().all(|r| (0..8).filter(|&t| !r.mask[t]).all(|t| r.features.data()[t * 42 + 30] == 0.0)));
        assert!(matches!(stats.apply(&mut recs), Err(Error::AlreadyNormalized)));
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let recs = toy_records(3);
        assert!(matches!(NormStats::fit(&recs), Err(Error::DegenerateChannel(1))));
    }

    #[test]
    fn standard_split_sizes() {
        let recs: Vec<ProteinRecord> = (0..5534).map(|i| extract_features(&raw_protein(1, &[(0, 0)]), &layout(1), i).unwrap()).collect();
        let (train, val) = split_train_val(recs, 11, ValidationSize::default()).unwrap();
        assert_eq!((train.len(), val.len()), (5278, 256));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let ids = |v: &[ProteinRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        let (a_tr, a_va) = split_train_val(toy_records(20), 3, ValidationSize::Fraction(0.25)).unwrap();
        let (b_tr, b_va) = split_train_val(toy_records(20), 3, ValidationSize::Fraction(0.25)).unwrap();
        assert_eq!(ids(&a_va), ids(&b_va));
        assert_eq!(a_va.len(), 5);
        let mut all = [ids(&a_tr), ids(&a_va)].concat();
        all.sort();
        let mut expected = ids(&toy_records(20));
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(ids(&a_tr), ids(&b_tr));
        assert!(split_train_val(toy_records(1), 0, ValidationSize::Count(1)).is_err());
    }

    #[test]
    fn batch_stacks_records() {
        let recs = toy_records(3);
        let b = make_batch(&recs, &[2, 0]).unwrap();
        assert_eq!(b.features.shape(), &[2, 8, 42]);
        assert_eq!(&b.mask[..8], &recs[2].mask[..]);
        assert_eq!(&b.labels[8..], &recs[0].labels[..]);
        assert!(make_batch(&recs, &[3]).is_err());
    }
}
