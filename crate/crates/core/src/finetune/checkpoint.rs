use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::StageKind;
use crate::autodiff::Tensor;
use crate::model::{EncoderConfig, HeadSpec, ModelError, SequenceModel};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"ABSACKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64_LE: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error(
        "checkpoint format version {found} is not supported (this build reads up to {supported})"
    )]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}

/// One completed stage in a checkpoint's lineage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub name: String,
    pub kind: StageKind,
    pub data_hash: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Named tensors plus everything needed to rebuild and audit the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub vocab: Vocabulary,
    pub encoder: EncoderConfig,
    pub head: HeadSpec,
    /// Class names for a classifier head.
    pub labels: Option<Vec<String>>,
    pub provenance: Vec<ProvenanceEntry>,
    pub metrics: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    artifact_version: String,
    vocab: Vocabulary,
    encoder: EncoderConfig,
    head: HeadSpec,
    #[serde(default)]
    labels: Option<Vec<String>>,
    provenance: Vec<ProvenanceEntry>,
    metrics: serde_json::Value,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Corrupt {
                offset: self.pos,
                reason: format!("file ends while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn corrupt(&self, at: usize, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            offset: at,
            reason: reason.into(),
        }
    }
}

fn usize_of(v: u64, at: usize, what: &str) -> Result<usize, CheckpointError> {
    usize::try_from(v).map_err(|_| CheckpointError::Corrupt {
        offset: at,
        reason: format!("{what} {v} does not fit in memory"),
    })
}

impl Checkpoint {
    pub fn from_model(
        model: &SequenceModel,
        vocab: Vocabulary,
        labels: Option<Vec<String>>,
        provenance: Vec<ProvenanceEntry>,
        metrics: serde_json::Value,
    ) -> Self {
        Self {
            tensors: model.named_tensors(),
            vocab,
            encoder: model.config().clone(),
            head: model.head().clone(),
            labels,
            provenance,
            metrics,
        }
    }

    pub fn model(&self) -> Result<SequenceModel, ModelError> {
        SequenceModel::from_tensors(self.encoder.clone(), self.head.clone(), &self.tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64_LE);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Meta {
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            vocab: self.vocab.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
            metrics: self.metrics.clone(),
        };
        let json =
            serde_json::to_vec(&meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            buf,
            pos: MAGIC.len(),
        };
        let version = r.u32("format version")?;
        if version == 0 || version > FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let n = r.u32("tensor count")? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| r.corrupt(at, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            if r.u8("dtype")? != DTYPE_F64_LE {
                return Err(r.corrupt(at, format!("unknown dtype for {name}")));
            }
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let at = r.pos;
                shape.push(usize_of(r.u64("extent")?, at, "extent")?);
            }
            let at = r.pos;
            let offset = usize_of(r.u64("payload offset")?, at, "offset")?;
            manifest.push((name, shape, offset, at));
        }
        let at = r.pos;
        let payload_len = usize_of(r.u64("payload length")?, at, "payload length")?;
        let payload_start = r.pos;
        let payload = r.take(payload_len, "tensor payload")?;
        let mut tensors = Vec::with_capacity(manifest.len());
        let mut expected = 0usize;
        for (name, shape, offset, at) in manifest {
            if offset != expected {
                return Err(r.corrupt(at, format!("{name}: offset {offset}, expected {expected}")));
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.corrupt(at, format!("{name}: shape overflows")))?;
            let bytes = count
                .checked_mul(8)
                .filter(|b| offset + b <= payload_len)
                .ok_or_else(|| {
                    r.corrupt(
                        payload_start + offset,
                        format!("{name}: payload out of range"),
                    )
                })?;
            let data = payload[offset..offset + bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.corrupt(at, format!("{name}: {e}")))?;
            expected = offset + bytes;
            tensors.push((name, t));
        }
        if expected != payload_len {
            return Err(r.corrupt(payload_start, "payload length disagrees with manifest"));
        }
        let at = r.pos;
        let json_len = usize_of(r.u64("metadata length")?, at, "metadata length")?;
        let json_at = r.pos;
        let json = r.take(json_len, "metadata")?;
        let digest_at = r.pos;
        let digest = r.take(DIGEST_LEN, "checksum")?;
        if r.pos != buf.len() {
            return Err(r.corrupt(r.pos, "trailing bytes after checksum"));
        }
        if Sha256::digest(&buf[..digest_at]).as_slice() != digest {
            return Err(r.corrupt(digest_at, "checksum mismatch"));
        }
        let meta: Meta =
            serde_json::from_slice(json).map_err(|e| r.corrupt(json_at, e.to_string()))?;
        Ok(Self {
            tensors,
            vocab: meta.vocab,
            encoder: meta.encoder,
            head: meta.head,
            labels: meta.labels,
            provenance: meta.provenance,
            metrics: meta.metrics,
        })
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized file.
    pub fn content_hash(&self) -> Result<String, CheckpointError> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// SHA-256 over the encoder tensors only.
    pub fn encoder_fingerprint(&self) -> Result<String, ModelError> {
        Ok(self.model()?.encoder_fingerprint())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let toks: Vec<String> = ["buy", "sell", "buy", "hold"].map(String::from).to_vec();
        let vocab = Vocabulary::build([&toks], 100, 1).unwrap();
        let cfg = EncoderConfig {
            embed_dim: 4,
            hidden_dim: 6,
            num_layers: 2,
            ..EncoderConfig::new(vocab.len())
        };
        let model = SequenceModel::new(cfg, HeadSpec::classifier(3), 9).unwrap();
        let prov = (0..3)
            .map(|i| ProvenanceEntry {
                name: format!("stage{i}"),
                kind: StageKind::LmPretrain,
                data_hash: "d".repeat(8),
                config_hash: "c".repeat(8),
                seed: i,
            })
            .collect();
        let metrics = serde_json::json!({"valid_loss": 0.1 + 0.2, "ppl": 1.0 / 3.0});
        Checkpoint::from_model(
            &model,
            vocab,
            Some(vec!["a".into(), "b".into(), "c".into()]),
            prov,
            metrics,
        )
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cp = sample();
        cp.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, cp);
        back.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(back.provenance.len(), 3);
        assert_eq!(back.provenance[2].name, "stage2");
    }

    #[test]
    fn truncation_reports_an_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [13, 40, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(CheckpointError::Corrupt { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_payload_bit_is_caught() {
        let mut bytes = sample().to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Corrupt { .. })
        ));
    }

    #[test]
    fn newer_version_and_bad_magic_are_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 2, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"nope"),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn model_roundtrip() {
        let cp = sample();
        let m = cp.model().unwrap();
        assert_eq!(m.named_tensors(), cp.tensors);
    }
}
