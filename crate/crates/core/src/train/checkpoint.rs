//! Checkpoint persistence: a JSON manifest plus a raw little-endian f32 blob
//! in one file, integrity-checked by CRC32.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::ParamStore;
use crate::rng::GENERATOR_ID;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DVCK";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: String,
    config: serde_json::Value,
    rng: String,
    global_step: u64,
    tensors: Vec<TensorEntry>,
    crc32: u32,
}

/// A loaded checkpoint: model kind, its config snapshot, and the parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub rng: String,
    pub global_step: u64,
    pub store: ParamStore,
}

/// CRC-32 (IEEE 802.3, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, t) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *t = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFFFFFF
}

fn blob_of(store: &ParamStore) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, p) in store.iter() {
        let len = p.value.len();
        entries.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len,
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += len;
    }
    (blob, entries)
}

/// Checksum of a parameter store at f32 precision, for frozen-weights checks.
pub fn store_checksum(store: &ParamStore) -> u32 {
    let (blob, _) = blob_of(store);
    crc32(&blob)
}

pub fn save_checkpoint(
    store: &ParamStore,
    kind: &str,
    config: serde_json::Value,
    global_step: u64,
    path: &Path,
) -> Result<()> {
    let (blob, tensors) = blob_of(store);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config,
        rng: GENERATOR_ID.to_string(),
        global_step,
        tensors,
        crc32: crc32(&blob),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| Error::CheckpointManifest(format!("serialize: {e}")))?;
    let mut out = Vec::with_capacity(8 + mjson.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&mjson);
    out.extend_from_slice(&blob);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(Error::CheckpointManifest(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + mlen {
        return Err(Error::CheckpointTruncated {
            need: 8 + mlen,
            have: bytes.len(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen])
        .map_err(|e| Error::CheckpointManifest(format!("parse: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob = &bytes[8 + mlen..];
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if blob.len() < total * 4 {
        return Err(Error::CheckpointTruncated {
            need: 8 + mlen + total * 4,
            have: bytes.len(),
        });
    }
    let computed = crc32(&blob[..total * 4]);
    if computed != manifest.crc32 {
        return Err(Error::CheckpointChecksum {
            stored: manifest.crc32,
            computed,
        });
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let start = entry.offset * 4;
        let data: Vec<f64> = blob[start..start + entry.len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)?;
        store.insert(&entry.name, t);
    }
    Ok(Checkpoint {
        version: manifest.version,
        kind: manifest.kind,
        config: manifest.config,
        rng: manifest.rng,
        global_step: manifest.global_step,
        store,
    })
}

impl Checkpoint {
    /// Fails loudly when the stored tensors do not line up one-to-one with
    /// `expected` (e.g. a checkpoint loaded into a different hidden size).
    pub fn verify_against(&self, expected: &ParamStore) -> Result<()> {
        for (name, p) in expected.iter() {
            if !self.store.contains(name) {
                return Err(Error::CheckpointManifest(format!(
                    "missing tensor {name} in checkpoint"
                )));
            }
            let found = self.store.get(name);
            if found.value.shape() != p.value.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    found: found.value.shape().to_vec(),
                    expected: p.value.shape().to_vec(),
                });
            }
        }
        for (name, _) in self.store.iter() {
            if !expected.contains(name) {
                return Err(Error::CheckpointManifest(format!(
                    "unexpected tensor {name} in checkpoint"
                )));
            }
        }
        Ok(())
    }

    pub fn typed_config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::CheckpointManifest(format!("config snapshot: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmpdir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join("diffvox-ckpt-tests");
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn sample_store() -> ParamStore {
        let mut rng = Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        store.insert("a.w", rng.normal_tensor(&[3, 2]));
        store.insert("a.b", rng.normal_tensor(&[3]));
        store.insert("z.long", rng.normal_tensor(&[17]));
        store
    }

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let store = sample_store();
        let path = tmpdir().join("rt.ckpt");
        save_checkpoint(&store, "refiner", serde_json::json!({"hidden": 3}), 7, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "refiner");
        assert_eq!(ck.global_step, 7);
        assert_eq!(ck.rng, GENERATOR_ID);
        for (name, p) in store.iter() {
            let got = ck.store.get(name);
            assert_eq!(got.value.shape(), p.value.shape());
            for (a, b) in got.value.data().iter().zip(p.value.data()) {
                assert_eq!(*a as f32, *b as f32, "{name}");
            }
        }
        // saving the loaded store reproduces the same blob checksum
        assert_eq!(store_checksum(&ck.store), store_checksum(&store));
    }

    #[test]
    fn tampered_blob_fails_checksum() {
        let store = sample_store();
        let path = tmpdir().join("tamper.ckpt");
        save_checkpoint(&store, "refiner", serde_json::json!({}), 0, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointChecksum { .. })
        ));
    }

    #[test]
    fn truncated_blob_is_detected() {
        let store = sample_store();
        let path = tmpdir().join("trunc.ckpt");
        save_checkpoint(&store, "refiner", serde_json::json!({}), 0, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let store = sample_store();
        let path = tmpdir().join("ver.ckpt");
        save_checkpoint(&store, "refiner", serde_json::json!({}), 0, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        // bump the version field inside the manifest json
        let mlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        manifest.version = 99;
        let mjson = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(&bytes[8 + mlen..]);
        fs::write(&path, &out).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let store = sample_store();
        let path = tmpdir().join("shape.ckpt");
        save_checkpoint(&store, "refiner", serde_json::json!({}), 0, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut other = ParamStore::new();
        other.insert("a.w", Tensor::zeros(&[4, 2])); // different hidden size
        other.insert("a.b", Tensor::zeros(&[3]));
        other.insert("z.long", Tensor::zeros(&[17]));
        match ck.verify_against(&other) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "a.w"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn crc32_known_vector() {
        // standard test vector: "123456789" -> 0xCBF43926
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
    }
}
