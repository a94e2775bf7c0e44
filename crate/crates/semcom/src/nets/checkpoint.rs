//! Binary checkpoint format for trained parameter stores.
//!
//! Layout: the magic bytes `SEMCKPT1`, a little-endian `u64` giving the
//! length of a JSON manifest, the manifest itself, then the raw `f64`
//! little-endian values of every parameter in manifest order. The manifest
//! records shapes, trainability and a metadata block (training stage, seed,
//! config fingerprint), so a checkpoint is self-describing and loads are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SEMCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint manifest is invalid: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint payload is malformed: {0}")]
    Malformed(String),
}

/// Provenance carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training stage that produced this store (`t1`, `t2`, `t3`, `digital`).
    pub stage: String,
    pub seed: u64,
    /// Hash of the experiment configuration; resuming checks it so a stale
    /// checkpoint from a different configuration is never silently reused.
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: CheckpointMeta,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Writes `store` to `path`. Parameters are serialized in name order, the
/// store's natural iteration order, so identical stores produce identical
/// bytes. The file appears atomically (written to a temporary sibling, then
/// renamed), so concurrent sweep workers racing to cache the same shared
/// checkpoint can never leave a half-written file behind.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

    let params: Vec<ParamRecord> = store
        .iter()
        .map(|(name, entry)| ParamRecord {
            name: name.clone(),
            shape: entry.value.shape().to_vec(),
            trainable: entry.trainable,
        })
        .collect();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        meta: meta.clone(),
        params,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let tmp = path.with_extension(format!(
        "tmp.{}.{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let mut out = BufWriter::new(File::create(&tmp)?);
    out.write_all(MAGIC)?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    for (_, entry) in store.iter() {
        for &x in entry.value.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    drop(out);
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// Reads a checkpoint back into a fresh [`ParamStore`]. Gradients and
/// momentum buffers start zeroed; only values and trainability flags round
/// trip.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta), CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    reader.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    reader.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(manifest.version));
    }

    let mut store = ParamStore::new();
    for record in &manifest.params {
        let len: usize = record.shape.iter().product();
        let mut data = vec![0.0f64; len];
        for slot in data.iter_mut() {
            let mut buf = [0u8; 8];
            reader.read_exact(&mut buf)?;
            *slot = f64::from_le_bytes(buf);
        }
        let value = Tensor::new(record.shape.clone(), data).map_err(|e| {
            CheckpointError::Malformed(format!("parameter {}: {e}", record.name))
        })?;
        store.insert(&record.name, value, record.trainable);
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Malformed(
            "trailing bytes after final parameter".into(),
        ));
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod test {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.insert(
            "enc1.fc0.weight",
            Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.5e-300, -0.0, f64::MIN_POSITIVE]),
            true,
        );
        store.insert("feat1.bn0.running_var", Tensor::vector(vec![1.0, 2.0]), false);
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let meta = CheckpointMeta {
            stage: "t2".into(),
            seed: 11,
            fingerprint: "abc123".into(),
        };
        save_checkpoint(&path, &store, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.len(), store.len());
        for (name, entry) in store.iter() {
            let got = loaded.get(name).unwrap();
            assert_eq!(got.trainable, entry.trainable);
            assert_eq!(got.value.shape(), entry.value.shape());
            for (a, b) in got.value.data().iter().zip(entry.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "value drift in {name}");
            }
            assert!(got.grad.data().iter().all(|&g| g == 0.0));
            assert!(got.momentum.data().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn identical_stores_serialize_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let meta = CheckpointMeta {
            stage: "t1".into(),
            seed: 0,
            fingerprint: "f".into(),
        };
        save_checkpoint(&p1, &sample_store(), &meta).unwrap();
        save_checkpoint(&p2, &sample_store(), &meta).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            stage: "t1".into(),
            seed: 0,
            fingerprint: "f".into(),
        };
        save_checkpoint(&path, &sample_store(), &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
