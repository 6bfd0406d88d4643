//! Named-tensor container shared by backbone weights, generators,
//! discriminators and UFEM checkpoints.
//!
//! Byte layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"UFEMTNS1"
//! 8       8     manifest length M, u64 little-endian
//! 16      M     manifest, UTF-8 JSON (see `Manifest`)
//! 16+M    P     payload: tensors back to back in manifest order
//! ```
//!
//! Each tensor occupies `product(shape) * dtype.size()` bytes at its
//! manifest `offset` (relative to the payload start), row-major, in the
//! byte order named by `endianness`. `payload_sha256` is the hex SHA-256 of
//! the whole payload; a file whose payload does not hash to it is rejected
//! before any tensor is decoded.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{hex, ParamSet};
use crate::tensor::{Dtype, Real, Tensor};

const MAGIC: &[u8; 8] = b"UFEMTNS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub architecture_id: String,
    pub dtype: Dtype,
    pub endianness: Endianness,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T = f32> {
    pub architecture_id: String,
    pub metadata: serde_json::Value,
    pub tensors: ParamSet<T>,
}

impl<T: Real> Container<T> {
    pub fn new(architecture_id: impl Into<String>, metadata: serde_json::Value, tensors: ParamSet<T>) -> Self {
        Self {
            architecture_id: architecture_id.into(),
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self, endianness: Endianness) -> Result<Vec<u8>> {
        let big = endianness == Endianness::Big;
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.tensors.iter() {
            let offset = payload.len() as u64;
            for v in t.data() {
                v.write_bytes(big, &mut payload);
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            architecture_id: self.architecture_id.clone(),
            dtype: T::DTYPE,
            endianness,
            tensors: entries,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, Endianness::Little)
    }

    /// Writes to a sibling temp file and renames, so readers never observe a
    /// half-written container.
    pub fn save_with(&self, path: &Path, endianness: Endianness) -> Result<()> {
        let bytes = self.to_bytes(endianness)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(mlen))
            .ok_or_else(|| corrupt("manifest truncated"))?;
        let manifest: Manifest = serde_json::from_slice(body).map_err(|e| corrupt(&format!("manifest: {e}")))?;
        let payload = &bytes[16 + mlen..];
        let digest = hex(&Sha256::digest(payload));
        if digest != manifest.payload_sha256 || payload.len() as u64 != manifest.payload_bytes {
            return Err(Error::Digest {
                path: path.to_path_buf(),
                expected: manifest.payload_sha256,
                found: digest,
            });
        }
        let big = manifest.endianness == Endianness::Big;
        let size = manifest.dtype.size();
        let mut tensors = ParamSet::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if e.nbytes as usize != n * size || start + n * size > payload.len() {
                return Err(corrupt(&format!("tensor `{}` out of bounds", e.name)));
            }
            let data = payload[start..start + n * size]
                .chunks_exact(size)
                .map(|c| T::read_bytes(c, manifest.dtype, big))
                .collect();
            tensors.push(e.name.clone(), Tensor::from_vec(&e.shape, data)?);
        }
        Ok(Self {
            architecture_id: manifest.architecture_id,
            metadata: manifest.metadata,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container<f32> {
        let mut ps = ParamSet::new();
        ps.push("a", Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap());
        ps.push("b", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        Container::new("test", serde_json::json!({"k": 1}), ps)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let c = sample();
        c.save(&p).unwrap();
        let back = Container::<f32>::load(&p).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for (x, y) in back.tensors.tensors().iter().zip(c.tensors.tensors()) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn big_endian_files_convert_exactly() {
        let c = sample();
        let be = c.to_bytes(Endianness::Big).unwrap();
        let le = c.to_bytes(Endianness::Little).unwrap();
        assert_ne!(be, le);
        let back = Container::<f32>::from_bytes(&be, Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_is_a_digest_error() {
        let bytes = sample().to_bytes(Endianness::Little).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Container::<f32>::from_bytes(cut, Path::new("x")),
            Err(Error::Digest { .. })
        ));
        assert!(matches!(
            Container::<f32>::from_bytes(&bytes[..20], Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn flipped_payload_bit_is_rejected() {
        let mut bytes = sample().to_bytes(Endianness::Little).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            Container::<f32>::from_bytes(&bytes, Path::new("x")),
            Err(Error::Digest { .. })
        ));
    }
}
