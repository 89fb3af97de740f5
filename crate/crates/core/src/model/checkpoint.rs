//! Binary checkpoint: config blob plus named `f32` tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{InputWidths, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::trajectory::TrajectoryStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMSPCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to run inference on raw episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub features: FeatureConfig,
    pub traj_stats: TrajectoryStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    widths: InputWidths,
    features: FeatureConfig,
    traj_stats: TrajectoryStats,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.params.config.clone(),
            widths: self.params.widths,
            features: self.features.clone(),
            traj_stats: self.traj_stats.clone(),
        };
        let blob = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(blob.len() as u32);
        w.bytes(blob.as_bytes());
        w.u32(self.params.tensors().len() as u32);
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            w.short_str(name)?;
            w.u8(t.rank() as u8);
            for &e in t.shape() {
                w.u32(e as u32);
            }
            w.f32s(t.data());
        }
        Ok(w.buf)
    }

    /// Parses and validates the whole buffer before returning anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported"
            )));
        }
        let len = r.u32()? as usize;
        let blob = r.str(len)?;
        let meta: Meta = serde_json::from_str(&blob)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.short_str()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let n = n.ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
            let data = r.f32s(n)?;
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            named.push((name, t));
        }
        r.finish()?;
        let params = ModelParams::from_tensors(meta.model, meta.widths, named)?;
        Ok(Self {
            params,
            features: meta.features,
            traj_stats: meta.traj_stats,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
