//! Versioned, checksummed binary checkpoints.
//!
//! Layout: magic, `u32` format version, `u32` header length, JSON header,
//! little-endian `f32` parameter arrays in header order, `u32` CRC-32 of
//! everything before it.

use super::nn::{Mlp, MlpSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"S2PCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checksum mismatch: file is truncated or corrupt")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub log_alpha: f32,
    pub actor: Mlp<f32>,
    /// Online critics, when saved for continued training.
    pub critics: Option<[Mlp<f32>; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    config_hash: String,
    log_alpha_bits: u32,
    nets: Vec<NetEntry>,
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    name: String,
    spec: MlpSpec,
    len: usize,
}

impl Checkpoint {
    fn nets(&self) -> Vec<(&'static str, &Mlp<f32>)> {
        let mut v = vec![("actor", &self.actor)];
        if let Some([a, b]) = &self.critics {
            v.push(("critic0", a));
            v.push(("critic1", b));
        }
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let nets = self.nets();
        let header = Header {
            step: self.step,
            config_hash: self.config_hash.clone(),
            log_alpha_bits: self.log_alpha.to_bits(),
            nets: nets
                .iter()
                .map(|(n, m)| NetEntry { name: n.to_string(), spec: m.spec.clone(), len: m.params.len() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in nets {
            for v in &m.params {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(CheckpointError::Checksum);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        if bytes.len() < 20 {
            return Err(CheckpointError::Checksum);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(CheckpointError::Checksum);
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let header_end = 16usize.checked_add(hlen).filter(|&e| e <= body.len());
        let header_end = header_end.ok_or_else(|| CheckpointError::Malformed("header overruns file".into()))?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut cursor = header_end;
        let mut nets = Vec::new();
        for entry in header.nets {
            let end = cursor + 4 * entry.len;
            if end > body.len() {
                return Err(CheckpointError::Malformed(format!("{} weights overrun file", entry.name)));
            }
            let params: Vec<f32> =
                body[cursor..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            cursor = end;
            let net = Mlp::from_params(entry.spec, params)
                .ok_or_else(|| CheckpointError::Malformed(format!("{} shape does not match weights", entry.name)))?;
            nets.push((entry.name, net));
        }
        if cursor != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after weights".into()));
        }
        let mut take = |name: &str| {
            nets.iter().position(|(n, _)| n == name).map(|i| nets.remove(i).1)
        };
        let actor = take("actor").ok_or_else(|| CheckpointError::Malformed("missing actor".into()))?;
        let critics = match (take("critic0"), take("critic1")) {
            (Some(a), Some(b)) => Some([a, b]),
            (None, None) => None,
            _ => return Err(CheckpointError::Malformed("incomplete critic pair".into())),
        };
        Ok(Checkpoint {
            step: header.step,
            config_hash: header.config_hash,
            log_alpha: f32::from_bits(header.log_alpha_bits),
            actor,
            critics,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::nets::{actor_spec, critic_spec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Checkpoint {
            step: 12345,
            config_hash: "abc123".into(),
            log_alpha: -1.25,
            actor: Mlp::new(actor_spec(32), &mut rng),
            critics: Some([Mlp::new(critic_spec(32, 0.01), &mut rng), Mlp::new(critic_spec(32, 0.01), &mut rng)]),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
        let mut actor_only = c.clone();
        actor_only.critics = None;
        assert_eq!(Checkpoint::from_bytes(&actor_only.to_bytes()).unwrap(), actor_only);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 40, 13] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Checksum)), "cut {cut}");
        }
    }

    #[test]
    fn flipped_bit_is_a_checksum_error() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn old_version_rejected_explicitly() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { found: 0 }));
        assert!(err.to_string().contains("version 0 is not supported"));
    }
}
