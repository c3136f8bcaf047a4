//! Binary checkpoints: magic, `u64` LE header length, JSON header, then every
//! tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, NnError, ParameterSet, Result};

const MAGIC: &[u8; 8] = b"NUANCEv1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Free-form provenance (label level, train summary, ...).
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_model(model: &Model, meta: serde_json::Value, path: &Path) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        meta,
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.params.iter() {
        for v in t.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint; returns the model and its metadata.
pub fn load_model(path: &Path) -> Result<(Model, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;

    let mut tensors = BTreeMap::new();
    let mut buf = [0u8; 4];
    for e in &header.tensors {
        let mut t = Array2::zeros((e.rows, e.cols));
        for v in t.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| NnError::Checkpoint(format!("truncated payload in {}", e.name)))?;
            *v = f32::from_le_bytes(buf) as f64;
        }
        tensors.insert(e.name.clone(), t);
    }
    if r.read(&mut buf)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after payload".into()));
    }
    let params = ParameterSet::from_tensors(tensors);
    let expected = ParameterSet::init(&header.config)?;
    if !params.same_shapes(&expected) {
        return Err(NnError::Checkpoint("tensor set does not match the config".into()));
    }
    Ok((
        Model {
            config: header.config,
            params,
        },
        header.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            output_dim: 15,
            seed: 21,
            ..Default::default()
        };
        let mut model = Model::new(cfg).unwrap();
        // snap weights to f32 so the round trip is bit-exact
        for (_, t) in model.params.iter_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, serde_json::json!({"level": "facet"}), &path).unwrap();
        let (back, meta) = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta["level"], "facet");
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(load_model(&path).is_err());

        let model = Model::new(ModelConfig {
            d_model: 8,
            heads: 2,
            ..Default::default()
        })
        .unwrap();
        save_model(&model, serde_json::Value::Null, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(&path), Err(NnError::Checkpoint(_))));
    }
}
