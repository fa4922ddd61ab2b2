//! Binary checkpoint format.
//!
//! ```text
//! "CMCK" | version u32 | kind tag u32 | count u32
//! count × { name_len u32 | name utf-8 | rank u32 | dims u64 × rank | dtype u8 }
//! count × raw little-endian arrays, in manifest order
//! ```
//!
//! All integers are little-endian. dtype 0 is f64, 1 is f32.

use std::fs;
use std::path::Path;

use crate::config::{CheckpointDtype, ModelConfig, ModelKind};
use crate::error::{CheckpointError, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMCK";
pub const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Decoded checkpoint contents, before they are matched to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(model: &Model, dtype: CheckpointDtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.kind.tag().to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    let tag = match dtype {
        CheckpointDtype::F64 => DTYPE_F64,
        CheckpointDtype::F32 => DTYPE_F32,
    };
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(tag);
    }
    for (_, p) in model.store.iter() {
        for &v in p.value.data() {
            match dtype {
                CheckpointDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                CheckpointDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let tag = r.u32()?;
    let kind = ModelKind::from_tag(tag).ok_or_else(|| CheckpointError::Kind {
        found: format!("tag {tag}"),
        expected: "a known model kind".into(),
    })?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Manifest("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 && dtype != DTYPE_F32 {
            return Err(CheckpointError::Manifest(format!("unknown dtype tag {dtype} for {name}")));
        }
        manifest.push((name, dims, dtype));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, dims, dtype) in manifest {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Manifest(format!("tensor {name} is too large")))?;
        let width = if dtype == DTYPE_F64 { 8 } else { 4 };
        let raw = r.take(n.checked_mul(width).ok_or(CheckpointError::Truncated)?)?;
        let data: Vec<f64> = if dtype == DTYPE_F64 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let t = Tensor::new(dims, data).map_err(|e| CheckpointError::Manifest(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Manifest(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(Checkpoint { kind, tensors })
}

/// Rebuilds a model of `kind` with architecture `config` from checkpoint bytes.
pub fn model_from_bytes(bytes: &[u8], kind: ModelKind, config: &ModelConfig) -> Result<Model> {
    let ck = decode(bytes)?;
    if ck.kind != kind {
        return Err(CheckpointError::Kind {
            found: ck.kind.name().into(),
            expected: kind.name().into(),
        }
        .into());
    }
    let vocab = ck
        .tensors
        .iter()
        .find(|(n, _)| n == "embedding" || n == "shared.embedding")
        .map(|(_, t)| t.shape()[0])
        .ok_or_else(|| CheckpointError::Manifest("no embedding table".into()))?;
    let mut model = Model::new(kind, config.clone(), vocab, 0)?;
    if ck.tensors.len() != model.store.len() {
        return Err(CheckpointError::Manifest(format!(
            "file holds {} tensors, model has {}",
            ck.tensors.len(),
            model.store.len()
        ))
        .into());
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(ck.tensors) {
        if model.store.name(id) != name {
            return Err(CheckpointError::Manifest(format!(
                "expected tensor {}, found {name}",
                model.store.name(id)
            ))
            .into());
        }
        let expected = model.store.get(id).shape();
        if expected != t.shape() {
            return Err(CheckpointError::Shape {
                name,
                found: t.shape().to_vec(),
                expected: expected.to_vec(),
            }
            .into());
        }
        *model.store.get_mut(id) = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path, dtype: CheckpointDtype) -> Result<()> {
    fs::write(path, encode(model, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, kind: ModelKind, config: &ModelConfig) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, kind, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: ModelKind) -> Model {
        Model::new(kind, ModelConfig::tiny(), 12, 7).unwrap()
    }

    fn ck_err(r: Result<Model>) -> CheckpointError {
        match r.unwrap_err() {
            Error::Checkpoint(e) => e,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [ModelKind::MtHcnn, ModelKind::MtHcnnD, ModelKind::Transfer] {
            let m = model(kind);
            let back = model_from_bytes(&encode(&m, CheckpointDtype::F64), kind, &m.config).unwrap();
            assert_eq!(back.store, m.store);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model(ModelKind::MtHcnnD), CheckpointDtype::F64);
        assert_eq!(&bytes[..4], b"CMCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn f32_storage_rounds_to_single_precision() {
        let m = model(ModelKind::MtHcnn);
        let bytes = encode(&m, CheckpointDtype::F32);
        assert!(bytes.len() < encode(&m, CheckpointDtype::F64).len());
        let back = model_from_bytes(&bytes, ModelKind::MtHcnn, &m.config).unwrap();
        for id in m.store.ids() {
            for (a, b) in m.store.get(id).data().iter().zip(back.store.get(id).data()) {
                assert_eq!(*b, *a as f32 as f64);
            }
        }
    }

    #[test]
    fn corruption_yields_distinct_errors() {
        let m = model(ModelKind::MtHcnn);
        let good = encode(&m, CheckpointDtype::F64);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(ck_err(model_from_bytes(&bad, m.kind, &m.config)), CheckpointError::BadMagic);

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            ck_err(model_from_bytes(&bad, m.kind, &m.config)),
            CheckpointError::Version { found: 9, .. }
        ));

        let cut = &good[..good.len() - 3];
        assert_eq!(ck_err(model_from_bytes(cut, m.kind, &m.config)), CheckpointError::Truncated);

        assert!(matches!(
            ck_err(model_from_bytes(&good, ModelKind::Transfer, &m.config)),
            CheckpointError::Kind { .. }
        ));

        let wider = ModelConfig {
            fc_hidden: 6,
            ..ModelConfig::tiny()
        };
        assert!(matches!(
            ck_err(model_from_bytes(&good, m.kind, &wider)),
            CheckpointError::Shape { .. }
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        let m = model(ModelKind::Transfer);
        save_checkpoint(&m, &path, CheckpointDtype::F64).unwrap();
        let back = load_checkpoint(&path, ModelKind::Transfer, &m.config).unwrap();
        assert_eq!(back.store, m.store);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing"), ModelKind::Transfer, &m.config),
            Err(Error::Io { .. })
        ));
    }
}
