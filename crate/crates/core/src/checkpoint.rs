//! Portable model checkpoints.
//!
//! Layout: magic `PFCK`, little-endian u32 format version, little-endian u64
//! header length, the JSON header, every tensor as little-endian f32 in header
//! order, and finally the 64-character hex SHA-256 parameter digest.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::nn::{digest_blobs, ParamSet, TensorBlob};
use crate::rng::RngState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PFCK";
const DIGEST_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// `tinylm`, `pformer`, `vision`, `qformer_lite` or `plain`.
    pub kind: String,
    pub config: serde_json::Value,
    /// The experiment configuration of the run that produced this file.
    #[serde(default)]
    pub run_config: serde_json::Value,
    pub tokenizer_hash: String,
    #[serde(default)]
    pub rng: Option<RngState>,
    pub tensors: Vec<TensorBlob>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<TensorBlob>,
    pub digest: String,
}

impl ModelCheckpoint {
    pub fn capture<C: Serialize>(
        kind: &str,
        config: &C,
        params: &ParamSet,
        tokenizer_hash: &str,
    ) -> Result<Self> {
        let blobs = params.export()?;
        let digest = digest_blobs(&blobs);
        Ok(Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind: kind.to_string(),
                config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
                run_config: serde_json::Value::Null,
                tokenizer_hash: tokenizer_hash.to_string(),
                rng: None,
                tensors: blobs
                    .iter()
                    .map(|b| TensorBlob {
                        name: b.name.clone(),
                        shape: b.shape.clone(),
                        data: Vec::new(),
                    })
                    .collect(),
                extra: serde_json::Value::Null,
            },
            blobs,
            digest,
        })
    }

    pub fn with_run_config<C: Serialize>(mut self, run: &C) -> Self {
        self.header.run_config = serde_json::to_value(run).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn with_rng(mut self, rng: RngState) -> Self {
        self.header.rng = Some(rng);
        self
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> Self {
        self.header.extra = extra;
        self
    }

    pub fn kind(&self) -> &str {
        &self.header.kind
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.header.config.clone())
            .map_err(|e| Error::Incompatible(format!("{} config: {e}", self.header.kind)))
    }

    pub fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if kinds.contains(&self.header.kind.as_str()) {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "expected a {} checkpoint, found {}",
                kinds.join("/"),
                self.header.kind
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(
            16 + header.len()
                + self.blobs.iter().map(|b| b.data.len() * 4).sum::<usize>()
                + DIGEST_LEN,
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blobs {
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.digest.as_bytes());
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::malformed(path, reason);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.display().to_string(),
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        let header_bytes = body
            .get(..header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("header: {e}")))?;
        let mut rest = &body[header_len..];
        let mut blobs = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if rest.len() < n * 4 {
                return Err(bad(&format!("truncated tensor {}", t.name)));
            }
            let data = rest[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[n * 4..];
            blobs.push(TensorBlob {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data,
            });
        }
        if rest.len() != DIGEST_LEN {
            return Err(bad("missing or oversized digest trailer"));
        }
        let digest = std::str::from_utf8(rest)
            .map_err(|_| bad("digest is not ascii"))?
            .to_string();
        if digest_blobs(&blobs) != digest {
            return Err(bad("parameter digest mismatch"));
        }
        Ok(Self {
            header,
            blobs,
            digest,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::SeedStreams;
    use candle_core::DType;

    fn sample() -> (ParamSet, ModelCheckpoint) {
        let mut rng = SeedStreams::new(5).stream("ck");
        let mut set = ParamSet::new(DType::F32);
        Linear::new(&mut set, &mut rng, "a", 3, 4).unwrap();
        Linear::new(&mut set, &mut rng, "b", 4, 2).unwrap();
        let ck = ModelCheckpoint::capture("tinylm", &serde_json::json!({"k": 2}), &set, "tok")
            .unwrap()
            .with_rng(RngState::capture(&rng));
        (set, ck)
    }

    #[test]
    fn round_trip_keeps_digest() {
        let (set, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest, set.digest().unwrap());
    }

    #[test]
    fn truncation_never_loads() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        for cut in [3, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(ModelCheckpoint::from_bytes(Path::new("x"), &bytes[..cut]).is_err());
        }
    }

    #[test]
    fn corrupted_payload_fails_digest() {
        let (_, ck) = sample();
        let mut bytes = ck.to_bytes();
        let n = bytes.len();
        bytes[n - DIGEST_LEN - 2] ^= 0x40;
        let err = ModelCheckpoint::from_bytes(Path::new("x"), &bytes).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn wrong_version_is_reported() {
        let (_, ck) = sample();
        let mut bytes = ck.to_bytes();
        bytes[4] = 7;
        assert!(matches!(
            ModelCheckpoint::from_bytes(Path::new("x"), &bytes),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }
}
