//! JSON checkpoint container: format tag, version, model config and every
//! tensor row-major with its declared shape.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Parameters};

pub const CHECKPOINT_FORMAT: &str = "layershap-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn write_checkpoint(params: &Parameters<f64>, mut w: impl Write) -> Result<(), ModelError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| TensorRecord {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &file).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Parameters<f64>, ModelError> {
    let mut buf = String::new();
    r.read_to_string(&mut buf)?;
    let file: CheckpointFile =
        serde_json::from_str(&buf).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!(
            "unknown format `{}`",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {}",
            file.version
        )));
    }
    let mut params = Parameters::<f64>::zeros(&file.config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != file.tensors.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            file.tensors.len()
        )));
    }
    for ((dst, (name, shape)), rec) in params
        .tensors_mut()
        .into_iter()
        .zip(&expected)
        .zip(&file.tensors)
    {
        if &rec.name != name || &rec.shape != shape {
            return Err(ModelError::Checkpoint(format!(
                "expected tensor {name} {shape:?}, found {} {:?}",
                rec.name, rec.shape
            )));
        }
        if rec.data.len() != dst.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name}: {} values for shape {shape:?}",
                rec.data.len()
            )));
        }
        dst.copy_from_slice(&rec.data);
    }
    if !params.all_finite() {
        return Err(ModelError::Checkpoint("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &Parameters<f64>, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Parameters<f64>, ModelError> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init;

    #[test]
    fn load_save_is_byte_stable() {
        let p = init(&ModelConfig::default()).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&p, &mut a).unwrap();
        let q = read_checkpoint(a.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut b = Vec::new();
        write_checkpoint(&q, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_shape_tampering() {
        let p = init(&ModelConfig::default()).unwrap();
        let mut a = Vec::new();
        write_checkpoint(&p, &mut a).unwrap();
        let mut v: serde_json::Value = serde_json::from_slice(&a).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([1, 2]);
        let err = read_checkpoint(serde_json::to_vec(&v).unwrap().as_slice()).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)));
        v["tensors"][0]["shape"] = serde_json::json!([16, 32]);
        v["version"] = serde_json::json!(9);
        assert!(read_checkpoint(serde_json::to_vec(&v).unwrap().as_slice()).is_err());
    }
}
