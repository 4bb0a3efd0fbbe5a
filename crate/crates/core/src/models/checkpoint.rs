use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numcore::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"DRCK";
const VERSION: u32 = 1;

/// Sidecar metadata written next to each checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub model: String,
    pub param_count: usize,
    pub tensor_count: usize,
    pub config_hash: u64,
}

/// FNV-1a over the serialized config; ties a checkpoint to the exact
/// architecture that produced it.
pub fn config_hash<C: Serialize>(cfg: &C) -> u64 {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    model: &str,
    config_hash: u64,
) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(config_hash)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, tensor) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
        for &dim in tensor.shape() {
            w.write_u32::<LittleEndian>(dim as u32)?;
        }
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;

    let summary = CheckpointSummary {
        model: model.to_string(),
        param_count: params.param_count(),
        tensor_count: params.len(),
        config_hash,
    };
    let summary_path = path.with_extension("json");
    let mut sw = BufWriter::new(File::create(summary_path)?);
    serde_json::to_writer_pretty(&mut sw, &summary)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    sw.flush()?;
    Ok(())
}

/// Load a checkpoint into an already-constructed parameter set; the set's
/// names and shapes must match exactly.
pub fn load_checkpoint(
    path: &Path,
    params: &mut ParamSet,
    expected_config_hash: u64,
) -> Result<(), ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let hash = r.read_u64::<LittleEndian>()?;
    if hash != expected_config_hash {
        return Err(ModelError::Checkpoint(format!(
            "config hash mismatch: file {hash:#018x}, expected {expected_config_hash:#018x}"
        )));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut map = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ModelError::Checkpoint(format!("tensor name not utf-8: {e}")))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let numel = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ModelError::Checkpoint(format!("tensor {name}: {e}")))?;
        map.insert(name, tensor);
    }
    params.load_map(&map).map_err(ModelError::Checkpoint)
}
