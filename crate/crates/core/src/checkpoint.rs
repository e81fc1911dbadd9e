//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OCF1" | version u32 | meta_len u32 | meta JSON | count u32 |
//!   count × ( name_len u16 | name | dtype u8 (0 = f32) | rank u8 | dims u64… | values )
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::ArchitectureConfig;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OCF1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub norm_stats: Option<NormStats>,
    pub iteration: u64,
    pub val_q8: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredMeta {
    architecture: ArchitectureConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(model: Model, meta: CheckpointMeta) -> Self {
        Checkpoint { model, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&StoredMeta {
            architecture: self.model.config().clone(),
            meta: self.meta.clone(),
        })
        .expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let tensors: Vec<(&String, &Tensor)> = self.model.named_tensors().collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let stored: StoredMeta = serde_json::from_slice(r.take(meta_len)?)?;
        stored.architecture.validate()?;
        let count = r.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype code {dtype}")));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint {
            model: Model::from_parts(stored.architecture, tensors)?,
            meta: stored.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConvSpec;
    use crate::rng::RngStream;

    fn model() -> Model {
        let cfg = ArchitectureConfig {
            multiscale_banks: vec![ConvSpec::new(3, 2)],
            single_conv: Some(ConvSpec::new(3, 2)),
            num_blocks: 2,
            fc_window: 3,
            fc_layers: 1,
            fc_width: 4,
            residual_connections: true,
            residual_projection_depth: 2,
            ..ArchitectureConfig::final_model()
        };
        Model::build(&cfg, &RngStream::new(3)).unwrap()
    }

    #[test]
    fn bit_exact_round_trip() {
        let ck = Checkpoint::new(
            model(),
            CheckpointMeta {
                norm_stats: Some(NormStats {
                    mean: vec![0.25; 21],
                    std: vec![1.5; 21],
                }),
                iteration: 42,
                val_q8: Some(0.5),
            },
        );
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.model.config(), ck.model.config());
        let a: Vec<_> = ck.model.named_tensors().collect();
        let b: Vec<_> = back.model.named_tensors().collect();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = Checkpoint::new(model(), CheckpointMeta::default()).to_bytes();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn corruption_detected() {
        let bytes = Checkpoint::new(model(), CheckpointMeta::default()).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
