//! Checkpoint archive: one safetensors file holding every named parameter
//! block plus the run config and noise schedule echoed into the metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const META_CONFIG: &str = "run_config";
pub const META_SCHEDULE: &str = "noise_schedule";

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            let v = flat.to_vec1::<f32>()?;
            let mut bytes = Vec::with_capacity(v.len() * 4);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((Dtype::F32, shape, bytes))
        }
        DType::F64 => {
            let v = flat.to_vec1::<f64>()?;
            let mut bytes = Vec::with_capacity(v.len() * 8);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((Dtype::F64, shape, bytes))
        }
        other => Err(Error::config(format!(
            "unsupported checkpoint dtype {other:?}"
        ))),
    }
}

/// Write named tensors with config + schedule metadata.
pub fn save_checkpoint(
    tensors: &HashMap<String, Tensor>,
    config: &RunConfig,
    schedule: &NoiseSchedule,
    path: &Path,
) -> Result<()> {
    let mut raw = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let (dtype, shape, bytes) = tensor_bytes(t)?;
        raw.push((name.clone(), dtype, shape, bytes));
    }
    raw.sort_by(|a, b| a.0.cmp(&b.0));
    let views: Vec<(String, TensorView)> = raw
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::config(format!("checkpoint tensor `{name}`: {e}")))
        })
        .collect::<Result<_>>()?;
    let metadata = HashMap::from([
        (META_CONFIG.to_string(), serde_json::to_string(config)?),
        (META_SCHEDULE.to_string(), serde_json::to_string(schedule)?),
    ]);
    safetensors::serialize_to_file(views, &Some(metadata), path)
        .map_err(|e| Error::config(format!("write checkpoint {}: {e}", path.display())))
}

/// Read the config and schedule echoed into a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<(RunConfig, NoiseSchedule)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::config(format!("read checkpoint {}: {e}", path.display())))?;
    let map = meta
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::config("checkpoint has no metadata"))?;
    let config: RunConfig = serde_json::from_str(
        map.get(META_CONFIG)
            .ok_or_else(|| Error::config("checkpoint metadata misses run_config"))?,
    )?;
    let schedule: NoiseSchedule = serde_json::from_str(
        map.get(META_SCHEDULE)
            .ok_or_else(|| Error::config("checkpoint metadata misses noise_schedule"))?,
    )?;
    Ok((config, schedule))
}
