//! Bit-exact tensor container format.
//!
//! Layout: bytes 0..8 hold the header length `H` as a little-endian
//! unsigned 64-bit integer; bytes `8..8+H` are a UTF-8 JSON object
//! mapping tensor name to `{"dtype":"f32","shape":[...],
//! "data_offsets":[begin,end]}` plus a `"__config__"` entry carrying
//! the model config; the remaining bytes are concatenated little-endian
//! f32 payloads at the declared offsets, relative to the end of the
//! header. Keys starting with `"__"` are metadata, not tensors.
//!
//! Writes are byte-deterministic: names are sorted, offsets assigned in
//! sorted order, and the header serialized through sorted-key JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{LayerWeights, ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Parsed container: config, tensors by name, and any extra metadata
/// entries.
#[derive(Debug)]
pub struct Container {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub extra: BTreeMap<String, Value>,
}

/// Writes tensors plus config (and optional extra metadata) in
/// container format.
pub fn write_container(
    path: &Path,
    config: &ModelConfig,
    tensors: &BTreeMap<String, Tensor>,
    extra: &BTreeMap<String, Value>,
) -> Result<()> {
    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    header.insert("__config__".to_string(), serde_json::to_value(config)?);
    for (k, v) in extra {
        if !k.starts_with("__") {
            return Err(Error::input(format!(
                "metadata key {k:?} must start with \"__\""
            )));
        }
        header.insert(k.clone(), v.clone());
    }

    let mut offset = 0u64;
    for (name, tensor) in tensors {
        if name.starts_with("__") {
            return Err(Error::input(format!(
                "tensor name {name:?} collides with metadata namespace"
            )));
        }
        let bytes = (tensor.len() * 4) as u64;
        header.insert(
            name.clone(),
            serde_json::to_value(TensorEntry {
                dtype: "f32".to_string(),
                shape: tensor.shape().to_vec(),
                data_offsets: [offset, offset + bytes],
            })?,
        );
        offset += bytes;
    }

    let header_json = serde_json::to_string(&header)?;
    let mut out = Vec::with_capacity(8 + header_json.len() + offset as usize);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(header_json.as_bytes());
    for tensor in tensors.values() {
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a container, validating each tensor's payload against its
/// declared shape and offsets.
pub fn read_container(path: &Path) -> Result<Container> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 8 {
        return Err(Error::format(format!(
            "{}: file too short for header length",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::format(format!(
            "{}: header declares {header_len} bytes but only {} remain",
            path.display(),
            bytes.len() - 8
        )));
    }
    let header_bytes = &bytes[8..8 + header_len];
    let header: BTreeMap<String, Value> = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(format!("{}: malformed header: {e}", path.display())))?;
    let payload = &bytes[8 + header_len..];

    let config_value = header
        .get("__config__")
        .ok_or_else(|| Error::format(format!("{}: missing __config__ entry", path.display())))?;
    let config: ModelConfig = serde_json::from_value(config_value.clone())
        .map_err(|e| Error::format(format!("{}: bad __config__: {e}", path.display())))?;

    let mut tensors = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (name, value) in header {
        if name == "__config__" {
            continue;
        }
        if name.starts_with("__") {
            extra.insert(name, value);
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| Error::format(format!("bad header entry for tensor {name}: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::format(format!(
                "tensor {name} has unsupported dtype {:?}",
                entry.dtype
            )));
        }
        let [begin, end] = entry.data_offsets;
        let expected_bytes = entry.shape.iter().product::<usize>() as u64 * 4;
        if end < begin || end - begin != expected_bytes {
            return Err(Error::format(format!(
                "tensor {name}: offsets [{begin}, {end}] disagree with shape {:?}",
                entry.shape
            )));
        }
        if end as usize > payload.len() {
            return Err(Error::format(format!(
                "tensor {name}: payload truncated ({} bytes available, {end} needed)",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok(Container {
        config,
        tensors,
        extra,
    })
}

fn weight_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let kv = config.n_kv_heads * config.d_head();
    let mut names = vec![
        ("embed.weight".to_string(), vec![config.vocab_size, d]),
        ("final_norm.scale".to_string(), vec![d]),
        ("output.weight".to_string(), vec![d, config.vocab_size]),
    ];
    for l in 0..config.n_layers {
        names.push((format!("layers.{l}.attn_norm.scale"), vec![d]));
        names.push((format!("layers.{l}.attn.q.weight"), vec![d, d]));
        names.push((format!("layers.{l}.attn.k.weight"), vec![d, kv]));
        names.push((format!("layers.{l}.attn.v.weight"), vec![d, kv]));
        names.push((format!("layers.{l}.attn.o.weight"), vec![d, d]));
        names.push((format!("layers.{l}.mlp_norm.scale"), vec![d]));
        names.push((format!("layers.{l}.mlp.gate.weight"), vec![d, config.d_ff]));
        names.push((format!("layers.{l}.mlp.up.weight"), vec![d, config.d_ff]));
        names.push((format!("layers.{l}.mlp.down.weight"), vec![config.d_ff, d]));
    }
    names
}

/// Saves model weights; byte-identical output for identical weights.
pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    tensors.insert("embed.weight".to_string(), weights.embed.clone());
    tensors.insert("final_norm.scale".to_string(), weights.final_norm.clone());
    tensors.insert("output.weight".to_string(), weights.w_out.clone());
    for (l, lw) in weights.layers.iter().enumerate() {
        tensors.insert(format!("layers.{l}.attn_norm.scale"), lw.attn_norm.clone());
        tensors.insert(format!("layers.{l}.attn.q.weight"), lw.wq.clone());
        tensors.insert(format!("layers.{l}.attn.k.weight"), lw.wk.clone());
        tensors.insert(format!("layers.{l}.attn.v.weight"), lw.wv.clone());
        tensors.insert(format!("layers.{l}.attn.o.weight"), lw.wo.clone());
        tensors.insert(format!("layers.{l}.mlp_norm.scale"), lw.mlp_norm.clone());
        tensors.insert(format!("layers.{l}.mlp.gate.weight"), lw.w_gate.clone());
        tensors.insert(format!("layers.{l}.mlp.up.weight"), lw.w_up.clone());
        tensors.insert(format!("layers.{l}.mlp.down.weight"), lw.w_down.clone());
    }
    write_container(path, &weights.config, &tensors, &BTreeMap::new())
}

/// Loads model weights, validating every tensor's shape against the
/// embedded config.
pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let mut container = read_container(path)?;
    container.config.validate()?;
    let config = container.config.clone();

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = container
            .tensors
            .remove(name)
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::format(format!(
                "shape mismatch for tensor {name}: header says {:?}, config requires {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };

    let expected = weight_names(&config);
    let mut by_name = BTreeMap::new();
    for (name, shape) in &expected {
        by_name.insert(name.clone(), take(name, shape)?);
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: by_name.remove(&format!("layers.{l}.attn_norm.scale")).unwrap(),
            wq: by_name.remove(&format!("layers.{l}.attn.q.weight")).unwrap(),
            wk: by_name.remove(&format!("layers.{l}.attn.k.weight")).unwrap(),
            wv: by_name.remove(&format!("layers.{l}.attn.v.weight")).unwrap(),
            wo: by_name.remove(&format!("layers.{l}.attn.o.weight")).unwrap(),
            mlp_norm: by_name.remove(&format!("layers.{l}.mlp_norm.scale")).unwrap(),
            w_gate: by_name.remove(&format!("layers.{l}.mlp.gate.weight")).unwrap(),
            w_up: by_name.remove(&format!("layers.{l}.mlp.up.weight")).unwrap(),
            w_down: by_name.remove(&format!("layers.{l}.mlp.down.weight")).unwrap(),
        });
    }
    Ok(ModelWeights {
        config,
        embed: by_name.remove("embed.weight").unwrap(),
        layers,
        final_norm: by_name.remove("final_norm.scale").unwrap(),
        w_out: by_name.remove("output.weight").unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, Preset};

    fn small_weights() -> ModelWeights {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_ff: 12,
            vocab_size: 11,
            rope_base: 10000.0,
            eps: 1e-6,
        };
        init_random(&cfg, 42).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let w = small_weights();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dsw");
        save_weights(&w, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(loaded.config, w.config);
        assert_eq!(loaded.embed, w.embed);
        assert_eq!(loaded.final_norm, w.final_norm);
        assert_eq!(loaded.w_out, w.w_out);
        for (a, b) in loaded.layers.iter().zip(&w.layers) {
            assert_eq!(a.wq, b.wq);
            assert_eq!(a.wk, b.wk);
            assert_eq!(a.wv, b.wv);
            assert_eq!(a.wo, b.wo);
            assert_eq!(a.w_gate, b.w_gate);
            assert_eq!(a.w_up, b.w_up);
            assert_eq!(a.w_down, b.w_down);
            assert_eq!(a.attn_norm, b.attn_norm);
            assert_eq!(a.mlp_norm, b.mlp_norm);
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let cfg = Preset::Tiny.config(1.0, 512).unwrap();
        let w = init_random(&cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dsw");
        let p2 = dir.path().join("b.dsw");
        save_weights(&w, &p1).unwrap();
        save_weights(&w, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_config_dimension_names_offending_tensor() {
        let w = small_weights();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dsw");

        // Header config disagrees with the stored tensor shapes.
        let mut bad_config = w.config.clone();
        bad_config.d_model = 16;
        bad_config.d_ff = 24;
        let mut tensors = BTreeMap::new();
        tensors.insert("embed.weight".to_string(), w.embed.clone());
        write_container(&path, &bad_config, &tensors, &BTreeMap::new()).unwrap();

        let err = load_weights(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("embed.weight"), "got: {msg}");
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let w = small_weights();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dsw");
        save_weights(&w, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        let err = load_weights(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dsw");

        std::fs::write(&path, b"abc").unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(5u64).to_le_bytes());
        bytes.extend_from_slice(b"not-j");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));

        // Header length larger than the file.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(1000u64).to_le_bytes());
        bytes.extend_from_slice(b"{}");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_container(&path), Err(Error::Format(_))));
    }

    #[test]
    fn extra_metadata_round_trips() {
        let w = small_weights();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.dsw");
        let mut tensors = BTreeMap::new();
        tensors.insert("baseline.layer.1".to_string(), Tensor::filled(vec![8], 0.5));
        let mut extra = BTreeMap::new();
        extra.insert(
            "__baseline__".to_string(),
            serde_json::json!({"count": 3, "dataset": "demo"}),
        );
        write_container(&path, &w.config, &tensors, &extra).unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.extra["__baseline__"]["count"], 3);
        assert_eq!(c.tensors["baseline.layer.1"].data()[0], 0.5);
    }
}
