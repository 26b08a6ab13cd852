//! Bit-exact binary persistence of model parameters, weight-net parameters,
//! optimizer state, adjacency matrices, and configuration.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DHL1" | version u32 | config_len u32 | config JSON (UTF-8)
//! | tensor_count u32 | per tensor: name_len u32, name bytes,
//!   rank u32 (=2), dims u32×rank, values f64-LE × (rows·cols)
//! ```
//!
//! Tensor names are sorted lexicographically, values are raw IEEE-754 bits,
//! and the config JSON comes from fixed-order struct serialization, so two
//! saves of the same state are byte-identical and load∘save round-trips
//! reproduce every array bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AdjacencyMatrix, DataError};
use crate::model::{DhlModelParams, ModelConfig, ModelError};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig, WeightNet};

pub const MAGIC: [u8; 4] = *b"DHL1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    BadVersion { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("tensor {name} is missing from the checkpoint")]
    MissingTensor { name: String },
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unexpected tensor {name} in checkpoint")]
    UnexpectedTensor { name: String },
    #[error("tensor {name} contains non-finite values")]
    NonFinite { name: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Raw checkpoint: a config blob plus a named tensor table.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Atomic write: serialize to a temp file in the target directory, then
    /// rename over the destination.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(CheckpointError::NonFinite { name: name.clone() });
            }
        }
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config_json.as_bytes();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion { found: version });
        }
        let config_len = cursor.u32()? as usize;
        let config_json = String::from_utf8(cursor.take(config_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("config is not UTF-8: {e}")))?;
        let count = cursor.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = cursor.u32()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|e| CheckpointError::Corrupt(format!("tensor name is not UTF-8: {e}")))?;
            let rank = cursor.u32()?;
            if rank != 2 {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name} has rank {rank}, expected 2"
                )));
            }
            let rows = cursor.u32()? as usize;
            let cols = cursor.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(cursor.f64()?);
            }
            if tensors.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        if cursor.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - cursor.pos
            )));
        }
        Ok(Checkpoint {
            config_json,
            tensors,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

/// Configuration block stored in the checkpoint's JSON blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Goal names per level, in id order.
    pub vocab_names: Vec<Vec<String>>,
    pub adam_model_step: u64,
    pub adam_weightnet_step: u64,
}

/// A full training state: everything needed to resume or evaluate.
#[derive(Debug, Clone)]
pub struct DhlCheckpoint {
    pub meta: CheckpointMeta,
    pub params: DhlModelParams,
    pub weightnet: WeightNet,
    pub adjacency: Vec<AdjacencyMatrix>,
    pub adam_model: AdamState,
    pub adam_weightnet: AdamState,
}

const ADJACENCY_NAMES: [&str; 2] = ["adjacency.type_entity", "adjacency.entity_attribute"];

impl DhlCheckpoint {
    fn expected_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let mut expected = DhlModelParams::expected_shapes(config);
        expected.extend(WeightNet::expected_shapes());
        for level in 1..config.levels {
            expected.push((
                ADJACENCY_NAMES[level - 1].to_string(),
                (config.vocab_sizes[level - 1], config.vocab_sizes[level]),
            ));
        }
        let model_like: Vec<_> = DhlModelParams::expected_shapes(config);
        for (name, shape) in &model_like {
            expected.push((format!("adam.model.{name}.m"), *shape));
            expected.push((format!("adam.model.{name}.v"), *shape));
        }
        for (name, shape) in WeightNet::expected_shapes() {
            expected.push((format!("adam.weightnet.{name}.m"), shape));
            expected.push((format!("adam.weightnet.{name}.v"), shape));
        }
        expected
    }

    pub fn to_raw(&self) -> Result<Checkpoint, CheckpointError> {
        let mut tensors = BTreeMap::new();
        for (name, t) in self.params.named_tensors() {
            tensors.insert(name, t.detached());
        }
        for (name, t) in self.weightnet.named_tensors() {
            tensors.insert(name, t.detached());
        }
        for (i, adj) in self.adjacency.iter().enumerate() {
            tensors.insert(ADJACENCY_NAMES[i].to_string(), adj.values().detached());
        }
        let (mm, mv) = self.adam_model.moments();
        for (i, (name, _)) in self.params.named_tensors().iter().enumerate() {
            tensors.insert(format!("adam.model.{name}.m"), mm[i].detached());
            tensors.insert(format!("adam.model.{name}.v"), mv[i].detached());
        }
        let (wm, wv) = self.adam_weightnet.moments();
        for (i, (name, _)) in self.weightnet.named_tensors().iter().enumerate() {
            tensors.insert(format!("adam.weightnet.{name}.m"), wm[i].detached());
            tensors.insert(format!("adam.weightnet.{name}.v"), wv[i].detached());
        }
        Ok(Checkpoint {
            config_json: serde_json::to_string(&self.meta)?,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        self.to_raw()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DhlCheckpoint, CheckpointError> {
        Self::from_raw(Checkpoint::load(path)?)
    }

    /// Validate the tensor table against the config-implied shapes and
    /// reassemble the training state.
    pub fn from_raw(raw: Checkpoint) -> Result<DhlCheckpoint, CheckpointError> {
        let meta: CheckpointMeta = serde_json::from_str(&raw.config_json)?;
        meta.model.validate()?;
        if meta.vocab_names.len() != meta.model.levels {
            return Err(CheckpointError::Corrupt(format!(
                "{} vocab name lists for {} levels",
                meta.vocab_names.len(),
                meta.model.levels
            )));
        }
        for (level, names) in meta.vocab_names.iter().enumerate() {
            if names.len() != meta.model.vocab_sizes[level] {
                return Err(CheckpointError::Corrupt(format!(
                    "level {level} has {} names but vocab size {}",
                    names.len(),
                    meta.model.vocab_sizes[level]
                )));
            }
        }

        let expected = Self::expected_shapes(&meta.model);
        for (name, shape) in &expected {
            match raw.tensors.get(name) {
                None => return Err(CheckpointError::MissingTensor { name: name.clone() }),
                Some(t) if t.shape() != *shape => {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.clone(),
                        expected: *shape,
                        found: t.shape(),
                    })
                }
                Some(_) => {}
            }
        }
        if raw.tensors.len() != expected.len() {
            let known: std::collections::BTreeSet<&String> =
                expected.iter().map(|(n, _)| n).collect();
            let extra = raw
                .tensors
                .keys()
                .find(|n| !known.contains(n))
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::UnexpectedTensor { name: extra });
        }

        let mut params = DhlModelParams::init(&meta.model, 0)?;
        for (name, t) in params.named_tensors_mut() {
            *t = raw.tensors[&name].detached();
        }
        let mut weightnet = WeightNet::init(0);
        for (name, t) in weightnet.named_tensors_mut() {
            *t = raw.tensors[&name].detached();
        }
        let mut adjacency = Vec::new();
        for level in 1..meta.model.levels {
            adjacency.push(AdjacencyMatrix::from_values(
                raw.tensors[ADJACENCY_NAMES[level - 1]].detached(),
                meta.model.epsilon,
            )?);
        }
        let collect_moments = |prefix: &str, names: &[(String, &Tensor)]| {
            let m = names
                .iter()
                .map(|(n, _)| raw.tensors[&format!("{prefix}.{n}.m")].detached())
                .collect::<Vec<_>>();
            let v = names
                .iter()
                .map(|(n, _)| raw.tensors[&format!("{prefix}.{n}.v")].detached())
                .collect::<Vec<_>>();
            (m, v)
        };
        let (mm, mv) = collect_moments("adam.model", &params.named_tensors());
        let adam_model = AdamState::from_parts(meta.adam_model_step, mm, mv);
        let (wm, wv) = collect_moments("adam.weightnet", &weightnet.named_tensors());
        let adam_weightnet = AdamState::from_parts(meta.adam_weightnet_step, wm, wv);

        Ok(DhlCheckpoint {
            meta,
            params,
            weightnet,
            adjacency,
            adam_model,
            adam_weightnet,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_adjacency;
    use crate::data::DialogRecord;

    fn sample_checkpoint() -> DhlCheckpoint {
        let config = ModelConfig {
            embed_dim: 4,
            hidden_dim: 4,
            levels: 2,
            vocab_sizes: vec![3, 5],
            ..ModelConfig::default()
        };
        let params = DhlModelParams::init(&config, 7).unwrap();
        let weightnet = WeightNet::init(8);
        let rec = DialogRecord {
            dialog_id: "d".into(),
            type_seq: vec![0, 1, 2],
            entity_seq: vec![0, 2, 4],
            attribute_seq: None,
            final_goal: vec![2, 4],
        };
        let adjacency = vec![build_adjacency(&[rec], 0, 1, 3, 5, config.epsilon).unwrap()];
        let adam_model = AdamState::for_params(&params);
        let adam_weightnet = AdamState::for_weightnet(&weightnet);
        DhlCheckpoint {
            meta: CheckpointMeta {
                model: config,
                train: TrainConfig::default(),
                vocab_names: vec![
                    vec!["t0".into(), "t1".into(), "t2".into()],
                    vec!["e0".into(), "e1".into(), "e2".into(), "e3".into(), "e4".into()],
                ],
                adam_model_step: 0,
                adam_weightnet_step: 0,
            },
            params,
            weightnet,
            adjacency,
            adam_model,
            adam_weightnet,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dhl");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = DhlCheckpoint::load(&path).unwrap();
        for ((n1, t1), (n2, t2)) in ckpt
            .params
            .named_tensors()
            .iter()
            .zip(loaded.params.named_tensors().iter())
        {
            assert_eq!(n1, n2);
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2, "tensor {n1} not bit-identical");
        }
        assert_eq!(
            ckpt.weightnet.w2.data(),
            loaded.weightnet.w2.data()
        );
        assert_eq!(
            ckpt.adjacency[0].values().data(),
            loaded.adjacency[0].values().data()
        );
    }

    #[test]
    fn double_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.dhl");
        let b = dir.path().join("b.dhl");
        let ckpt = sample_checkpoint();
        ckpt.save(&a).unwrap();
        ckpt.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        // save ∘ load ∘ save byte-idempotence
        let loaded = DhlCheckpoint::load(&a).unwrap();
        let c = dir.path().join("c.dhl");
        loaded.save(&c).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let ckpt = sample_checkpoint().to_raw().unwrap();
        let bytes = ckpt.to_bytes();
        for cut in [3, 7, 11, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt(_) | CheckpointError::BadMagic { .. }),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let raw = sample_checkpoint().to_raw().unwrap();
        let mut bytes = raw.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));

        let mut bytes = raw.to_bytes();
        bytes[4] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::BadVersion { found: 99 })
        ));
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut raw = sample_checkpoint().to_raw().unwrap();
        raw.tensors.remove("entity.head.w1");
        let err = DhlCheckpoint::from_raw(raw).unwrap_err();
        assert!(
            err.to_string().contains("entity.head.w1"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn wrong_shape_is_named() {
        let mut raw = sample_checkpoint().to_raw().unwrap();
        raw.tensors
            .insert("entity.head.w1".into(), Tensor::zeros(2, 2));
        let err = DhlCheckpoint::from_raw(raw).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { .. }), "{err}");
        assert!(err.to_string().contains("entity.head.w1"));
    }

    #[test]
    fn unexpected_tensor_is_rejected() {
        let mut raw = sample_checkpoint().to_raw().unwrap();
        raw.tensors.insert("mystery".into(), Tensor::zeros(1, 1));
        assert!(matches!(
            DhlCheckpoint::from_raw(raw),
            Err(CheckpointError::UnexpectedTensor { .. })
        ));
    }

    #[test]
    fn non_finite_tensors_refuse_to_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = sample_checkpoint();
        ckpt.params.levels[0].embedding.data_mut()[0] = f64::NAN;
        let err = ckpt.save(dir.path().join("bad.dhl")).unwrap_err();
        assert!(matches!(err, CheckpointError::NonFinite { .. }));
    }
}
