//! Adapter checkpoint file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   b"SLCKPT01"
//! header_len       u32
//! header           header_len bytes of JSON (schema_version, scheme, spec,
//!                  seed, spec_hash, matrix count)
//! per matrix:
//!   name_len       u32
//!   name           name_len bytes UTF-8
//!   ndim           u32
//!   dims           ndim x u64
//!   data           product(dims) x f64
//! ```
//!
//! Shared matrices appear exactly once, under their `shared.<role>.<module>`
//! key; per-layer matrices use `layers.<i>.<module>.<role>` keys.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterScheme;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TinyTransformer};

const MAGIC: &[u8; 8] = b"SLCKPT01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub scheme: AdapterScheme,
    pub spec: ModelSpec,
    pub seed: u64,
    pub spec_hash: String,
    pub matrices: usize,
}

/// FNV-1a over the canonical JSON encoding of (spec, scheme).
pub fn spec_hash(spec: &ModelSpec, scheme: &AdapterScheme) -> Result<String> {
    let blob = serde_json::to_string(&(spec, scheme))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in blob.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

pub fn save(path: &Path, model: &TinyTransformer) -> Result<()> {
    let snapshot = model.store.snapshot();
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        scheme: model.scheme.clone(),
        spec: model.spec.clone(),
        seed: model.seed,
        spec_hash: spec_hash(&model.spec, &model.scheme)?,
        matrices: snapshot.len(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let header_json = serde_json::to_vec(&header)?;
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (name, data) in &snapshot {
        let shape = shape_of(model, name);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn shape_of(model: &TinyTransformer, name: &str) -> Vec<usize> {
    model
        .store
        .ids()
        .map(|id| model.store.param(id))
        .find(|p| p.name == name)
        .map(|p| p.shape.clone())
        .unwrap_or_default()
}

/// Parse header and named matrices from a checkpoint file.
pub fn read_raw(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, (Vec<usize>, Vec<f64>)>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        if *at + n > buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &buf[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an adapter checkpoint".into()));
    }
    let header_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut at, header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema_version {}",
            header.schema_version
        )));
    }
    let mut matrices = BTreeMap::new();
    for _ in 0..header.matrices {
        let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("matrix name is not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut at, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        matrices.insert(name, (shape, data));
    }
    if at != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last matrix".into()));
    }
    Ok((header, matrices))
}

/// Rebuild the model described by the header and restore every stored matrix.
pub fn load(path: &Path) -> Result<TinyTransformer> {
    let (header, matrices) = read_raw(path)?;
    let expected = spec_hash(&header.spec, &header.scheme)?;
    if header.spec_hash != expected {
        return Err(Error::Checkpoint(format!(
            "spec hash mismatch: header says {}, recomputed {expected}",
            header.spec_hash
        )));
    }
    let mut model = TinyTransformer::build(&header.spec, &header.scheme, header.seed)?;
    let snapshot: BTreeMap<String, Vec<f64>> =
        matrices.into_iter().map(|(k, (_, v))| (k, v)).collect();
    model
        .store
        .restore(&snapshot)
        .map_err(|e| Error::Checkpoint(format!("restore failed: {e}")))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterMode, AdapterScheme, ModuleKind};
    use crate::model::preset_spec;

    fn model() -> TinyTransformer {
        let spec = preset_spec("tiny").unwrap();
        let scheme = AdapterScheme::new(AdapterMode::ShareA, 4, 8.0, &ModuleKind::ALL);
        TinyTransformer::build(&spec, &scheme, 123).unwrap()
    }

    #[test]
    fn roundtrip_preserves_every_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut m = model();
        // Make the state distinguishable from a fresh build.
        let ids = m.store.trainable_ids();
        for id in ids {
            for v in m.store.param_mut(id).data.iter_mut() {
                *v += 0.25;
            }
        }
        save(&path, &m).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.store.snapshot(), m.store.snapshot());
        assert_eq!(loaded.scheme, m.scheme);
    }

    #[test]
    fn shared_matrices_stored_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let m = model();
        save(&path, &m).unwrap();
        let (_, matrices) = read_raw(&path).unwrap();
        let shared: Vec<_> = matrices.keys().filter(|k| k.starts_with("shared.")).collect();
        assert_eq!(shared.len(), 7, "one shared A per module type: {shared:?}");
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let m = model();
        save(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
