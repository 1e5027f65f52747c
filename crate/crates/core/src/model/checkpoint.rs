//! Checkpoints as safetensors files: named row-major tensors plus string
//! metadata holding the model config and a format version.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{SafeTensors, TensorView};
use safetensors::Dtype;

use super::float::Float;
use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const KEY_VERSION: &str = "format_version";
const KEY_CONFIG: &str = "model_config";

fn ck<E: std::fmt::Display>(e: E) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Serializes the model; `extra` entries are stored alongside the config.
pub fn to_bytes<T: Float>(model: &Model<T>, extra: &[(&str, String)]) -> Result<Vec<u8>> {
    let bytes: Vec<Vec<u8>> = model.params.data.iter().map(|d| T::to_le_bytes(d)).collect();
    let mut views = Vec::with_capacity(bytes.len());
    for ((name, shape), b) in model.params.names.iter().zip(&model.params.shapes).zip(&bytes) {
        views.push((name.clone(), TensorView::new(T::DTYPE, shape.clone(), b).map_err(ck)?));
    }
    let mut meta = HashMap::new();
    meta.insert(KEY_VERSION.to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
    meta.insert(KEY_CONFIG.to_string(), serde_json::to_string(&model.config)?);
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    safetensors::serialize(views, Some(meta)).map_err(ck)
}

/// Parses a checkpoint, converting stored values to `T` when precisions differ.
pub fn from_bytes<T: Float>(buf: &[u8]) -> Result<(Model<T>, HashMap<String, String>)> {
    let st = SafeTensors::deserialize(buf).map_err(ck)?;
    let (_, header) = SafeTensors::read_metadata(buf).map_err(ck)?;
    let meta = header.metadata().clone().ok_or_else(|| ck("missing metadata"))?;
    let version: u32 = meta.get(KEY_VERSION).ok_or_else(|| ck("missing format version"))?.parse().map_err(ck)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(meta.get(KEY_CONFIG).ok_or_else(|| ck("missing model config"))?)?;
    let template = Model::<T>::new(config.clone())?;
    let mut params: ParamStore<T> = template.params.zeros_like();
    if st.len() != params.len() {
        return Err(ck(format!("expected {} tensors, found {}", params.len(), st.len())));
    }
    for (i, name) in params.names.iter().enumerate() {
        let view = st.tensor(name).map_err(|_| ck(format!("missing tensor {name}")))?;
        if view.shape() != params.shapes[i].as_slice() {
            return Err(ck(format!("tensor {name} has shape {:?}, expected {:?}", view.shape(), params.shapes[i])));
        }
        params.data[i] = match view.dtype() {
            d if d == T::DTYPE => T::from_le_bytes(view.data()),
            Dtype::F32 => <f32 as Float>::from_le_bytes(view.data()).into_iter().map(|v| T::from_f32(v).unwrap()).collect(),
            Dtype::F64 => <f64 as Float>::from_le_bytes(view.data()).into_iter().map(|v| T::from_f64(v).unwrap()).collect(),
            other => return Err(ck(format!("tensor {name} has unsupported dtype {other:?}"))),
        };
    }
    Ok((Model::with_params(config, params)?, meta))
}

pub fn save<T: Float>(model: &Model<T>, path: &Path, extra: &[(&str, String)]) -> Result<()> {
    let bytes = to_bytes(model, extra)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Float>(path: &Path) -> Result<(Model<T>, HashMap<String, String>)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::<f32>::new(ModelConfig::micro()).unwrap();
        for (i, d) in m.params.data.iter_mut().enumerate() {
            for (j, v) in d.iter_mut().enumerate() {
                *v = ((i * 31 + j) as f32).sin() * 1e-3 + f32::EPSILON * j as f32;
            }
        }
        let bytes = to_bytes(&m, &[("stage", "sft".into())]).unwrap();
        let (back, meta) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(meta["stage"], "sft");
        assert_eq!(back.config, m.config);
        for (a, b) in back.params.data.iter().zip(&m.params.data) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_mismatched_tensors() {
        let m = Model::<f64>::new(ModelConfig::micro()).unwrap();
        let mut bytes = to_bytes(&m, &[]).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(from_bytes::<f64>(&bytes).is_err());
    }
}
