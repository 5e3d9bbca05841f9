//! Binary parameter container.
//!
//! Layout: the magic line `OHKPT1`, one JSON header line holding the model
//! configuration, free-form metadata and one entry per tensor (name, dtype,
//! shape, byte offset into the payload), then the little-endian payload.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::{Precision, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "OHKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: Precision,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    payload_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: serde_json::Value,
}

fn width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &serde_json::Value, dtype: Precision) -> Result<()> {
    let names = model.param_names();
    let mut tensors = Vec::with_capacity(names.len());
    let mut payload = Vec::with_capacity(model.num_parameters() * width(dtype));
    for (name, t) in names.into_iter().zip(&model.params) {
        tensors.push(Entry {
            name,
            dtype,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for &v in t.data() {
            match dtype {
                Precision::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let header = Header {
        config: model.config.clone(),
        meta: meta.clone(),
        tensors,
        payload_bytes: payload.len(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut f, &header)?;
    writeln!(f)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::format(path, msg);
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
    let mut payload = Vec::with_capacity(header.payload_bytes);
    r.read_to_end(&mut payload)?;
    if payload.len() != header.payload_bytes {
        return Err(bad(format!(
            "payload has {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let w = width(e.dtype);
        let bytes = payload
            .get(e.offset..e.offset + n * w)
            .ok_or_else(|| bad(format!("tensor {} overruns the payload", e.name)))?;
        let data = bytes
            .chunks_exact(w)
            .map(|c| match e.dtype {
                Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        params.push(Tensor::new(&e.shape, data).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?);
    }
    let model = Model::from_parts(&header.config, params).map_err(|e| bad(e.to_string()))?;
    for (expect, e) in model.param_names().iter().zip(&header.tensors) {
        if *expect != e.name {
            return Err(bad(format!("tensor {} found where {expect} was expected", e.name)));
        }
    }
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn roundtrip_f64_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ohk");
        let cfg = ModelConfig::desk(Variant::UbotnetLite).with_input(16, 32);
        let m = Model::build(&cfg, 5).unwrap();
        let meta = serde_json::json!({"step": 12});
        save_checkpoint(&path, &m, &meta, Precision::F64).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.model.config, cfg);
        assert_eq!(back.model.params, m.params);
    }

    #[test]
    fn roundtrip_f32_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ohk");
        let m = Model::build(&ModelConfig::desk(Variant::Unet128).with_input(16, 32), 6).unwrap();
        save_checkpoint(&path, &m, &serde_json::Value::Null, Precision::F32).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (a, b) in back.model.params.iter().zip(&m.params) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == (*y as f32) as f64));
        }
        let text = fs::read(&path).unwrap();
        assert!(text.starts_with(b"OHKPT1\n"));
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ohk");
        let m = Model::build(&ModelConfig::desk(Variant::Unet128).with_input(16, 32), 6).unwrap();
        save_checkpoint(&path, &m, &serde_json::Value::Null, Precision::F32).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        let mut wrong = bytes.clone();
        wrong[5] = b'9';
        fs::write(&path, &wrong).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
