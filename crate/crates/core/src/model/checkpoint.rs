//! Binary checkpoints: `V2TM`, version (u32 LE), header length (u64 LE),
//! JSON header, then little-endian f32 tensor data in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"V2TM";
const PREFIX: usize = 4 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    optimizer_steps: Option<u64>,
    tensors: Vec<Entry>,
}

/// A loaded model plus optional optimizer state for resuming.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<Adam<f32>>,
}

/// Writes `model` (and `adam`, if given) to `path` via a temporary file and rename.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, adam: Option<&Adam<f32>>) -> Result<()> {
    let mut named: Vec<(String, &Tensor<f32>)> =
        model.param_names().iter().cloned().zip(model.params()).collect();
    if let Some(a) = adam {
        for (kind, ts) in [("m", &a.m), ("v", &a.v)] {
            for (n, t) in model.param_names().iter().zip(ts) {
                named.push((format!("adam.{kind}.{n}"), t));
            }
        }
    }
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        step: model.step(),
        optimizer_steps: adam.map(|a| a.steps()),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(PREFIX + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &named {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| e.context(format!("checkpoint {}", path.display())))
}

/// Loads a checkpoint and fails with a shape error unless its config equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config() != expected {
        return Err(Error::Shape(format!(
            "checkpoint {} was written for {:?}, expected {:?}",
            path.display(),
            ck.model.config(),
            expected
        )));
    }
    Ok(ck)
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let data_start = (PREFIX as u64)
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Format("truncated header".into()))? as usize;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX..data_start]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let data = &bytes[data_start..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected_offset {
            return Err(Error::Format(format!("tensor {} has offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        let n = e.shape[0]
            .checked_mul(e.shape[1])
            .ok_or_else(|| Error::Format(format!("tensor {} shape overflows", e.name)))?;
        let start = e.offset as usize;
        let end = start
            .checked_add(4 * n)
            .filter(|&end| end <= data.len())
            .ok_or_else(|| Error::Format(format!("truncated data for tensor {}", e.name)))?;
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], values)));
        expected_offset = end as u64;
    }
    if expected_offset != data.len() as u64 {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor data",
            data.len() as u64 - expected_offset
        )));
    }
    let n_params = match header.optimizer_steps {
        Some(_) if tensors.len() % 3 == 0 => tensors.len() / 3,
        Some(_) => return Err(Error::Format("optimizer state does not match parameters".into())),
        None => tensors.len(),
    };
    let mut rest = tensors.split_off(n_params);
    let model = Model::from_tensors(header.config, tensors, header.step)?;
    let adam = match header.optimizer_steps {
        None => None,
        Some(t) => {
            let v = rest.split_off(n_params);
            let take = |kind: &str, ts: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
                ts.into_iter()
                    .zip(model.param_names().iter().zip(model.params()))
                    .map(|((name, t), (pname, p))| {
                        if name != format!("adam.{kind}.{pname}") || t.shape() != p.shape() {
                            return Err(Error::Shape(format!("optimizer tensor {name} does not match {pname}")));
                        }
                        Ok(t)
                    })
                    .collect()
            };
            Some(Adam::from_parts(t, take("m", rest)?, take("v", v)?))
        }
    };
    if !model.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok(Checkpoint { model, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_step, TokenPair, TrainConfig};

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            vocab_size: 9,
            max_len: 6,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            bottleneck_dim: 4,
            dropout_rate: 0.0,
            positional: Default::default(),
        };
        Model::new(cfg, 2).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = model();
        let mut adam = Adam::new(&m);
        let pair = TokenPair { input: &[4, 5, 2], target: &[4, 5, 2] };
        train_step(&mut m, &mut adam, &[pair], &TrainConfig::default()).unwrap();
        save_checkpoint(&path, &m, Some(&adam)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.params(), m.params());
        assert_eq!(ck.model.param_names(), m.param_names());
        assert_eq!(ck.model.step(), 1);
        assert_eq!(ck.adam.as_ref(), Some(&adam));

        save_checkpoint(&path, &m, None).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.adam.is_none());
        assert_eq!(ck.model.params(), m.params());
    }

    #[test]
    fn corruption_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model(), None).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err().root(), Error::Format(_)));

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err().root(), Error::Format(_)));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err().root(), Error::Format(_)));

        fs::write(&path, &good[..10]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err().root(), Error::Format(_)));
    }

    #[test]
    fn config_mismatch_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &m, None).unwrap();
        let other = ModelConfig {
            bottleneck_dim: 8,
            ..m.config().clone()
        };
        assert!(matches!(load_checkpoint_expecting(&path, &other), Err(Error::Shape(_))));
        load_checkpoint_expecting(&path, m.config()).unwrap();
    }
}
