//! Checkpoint file format.
//!
//! ```text
//! b"KSEGCKPT"  magic
//! u32 LE       format version
//! u64 LE       header length in bytes
//! header       JSON: spec, parameter names/shapes, training state
//! f32 LE[]     parameters, then Adam first and second moments if present
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{MsUNet, NetworkSpec, ParamInfo};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer moments and trainer bookkeeping stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSnapshot {
    /// Trainer state, serialized by the trainer.
    pub state: serde_json::Value,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Vec<f32>,
    pub training: Option<TrainingSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    params: Vec<ParamInfo>,
    num_params: usize,
    training_state: Option<serde_json::Value>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn from_network(net: &MsUNet<f32>, training: Option<TrainingSnapshot>) -> Self {
        Checkpoint {
            spec: net.spec().clone(),
            params: net.params().to_vec(),
            training,
        }
    }

    pub fn network(&self) -> Result<MsUNet<f32>> {
        MsUNet::from_params(&self.spec, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let infos = MsUNet::<f32>::from_params(&self.spec, self.params.clone())?
            .param_infos()
            .to_vec();
        let header = Header {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: infos,
            num_params: self.params.len(),
            training_state: self.training.as_ref().map(|t| t.state.clone()),
        };
        let header = serde_json::to_vec(&header)?;
        let mut arrays: Vec<&[f32]> = vec![&self.params];
        if let Some(t) = &self.training {
            if t.adam_m.len() != self.params.len() || t.adam_v.len() != self.params.len() {
                return Err(bad(path, "optimizer moments do not match parameter count"));
            }
            arrays.push(&t.adam_m);
            arrays.push(&t.adam_v);
        }
        let floats: usize = arrays.iter().map(|a| a.len()).sum();
        let mut buf = Vec::with_capacity(20 + header.len() + 4 * floats);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for a in arrays {
            let start = buf.len();
            buf.resize(start + 4 * a.len(), 0);
            LittleEndian::write_f32_into(a, &mut buf[start..]);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write then rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(bad(path, "not a checkpoint file"));
        }
        let version = LittleEndian::read_u32(&buf[8..12]);
        if version != CHECKPOINT_VERSION {
            return Err(bad(path, format!("unsupported version {version}")));
        }
        let hlen = LittleEndian::read_u64(&buf[12..20]) as usize;
        let body = buf.get(20..20 + hlen).ok_or_else(|| bad(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(path, e.to_string()))?;
        let n = header.num_params;
        let expected = MsUNet::<f32>::from_params(&header.spec, vec![0.0; n])
            .map_err(|e| bad(path, e.to_string()))?;
        if expected.param_infos() != header.params.as_slice() {
            return Err(bad(path, "parameter layout does not match the network spec"));
        }
        let data = &buf[20 + hlen..];
        let arrays = if header.training_state.is_some() { 3 } else { 1 };
        if data.len() != arrays * n * 4 {
            return Err(bad(path, format!("expected {} data bytes, found {}", arrays * n * 4, data.len())));
        }
        let read = |i: usize| {
            let mut v = vec![0f32; n];
            LittleEndian::read_f32_into(&data[i * 4 * n..(i + 1) * 4 * n], &mut v);
            v
        };
        let params = read(0);
        let training = header.training_state.map(|state| TrainingSnapshot {
            state,
            adam_m: read(1),
            adam_v: read(2),
        });
        Ok(Checkpoint {
            spec: header.spec,
            params,
            training,
        })
    }
}
