//! The `ECW1` weights container.
//!
//! All integers and floats are little-endian regardless of host.
//!
//! | offset | size | field                                     |
//! |-------:|-----:|-------------------------------------------|
//! | 0      | 4    | magic `b"ECW1"`                           |
//! | 4      | 4    | format version, `u32` = 1                 |
//! | 8      | 4    | `num_layers` (`u32`)                      |
//! | 12     | 4    | `num_heads` (`u32`)                       |
//! | 16     | 4    | `head_dim` (`u32`)                        |
//! | 20     | 4    | `vocab_size` (`u32`)                      |
//! | 24     | 4    | `ffn_mult` (`u32`)                        |
//! | 28     | 4    | `max_seq_len` (`u32`)                     |
//! | 32     | 4    | `mask_token_id` (`u32`)                   |
//! | 36     | 4    | `logit_scale` (IEEE-754 `f32` bits)       |
//! | 40     | 8    | `rng_seed` (`u64`)                        |
//! | 48     | 8    | payload length in bytes (`u64`)           |
//! | 56     | n    | payload: tensors as `f32`, see below      |
//! | 56+n   | 8    | FNV-1a 64 over the payload bytes (`u64`)  |
//!
//! Tensor order is that of [`ModelWeights::tensors`]: `embedding [V×d]`,
//! then for each layer `attn_norm [d]`, `wq`, `wk`, `wv`, `wo [d×d]`,
//! `ffn_norm [d]`, `w_gate`, `w_up [d×f]`, `w_down [f×d]`, and finally
//! `final_norm [d]` and `lm_head [d×V]`. Matrices are row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};

pub const MAGIC: &[u8; 4] = b"ECW1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 56;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    pub fn new() -> Self {
        Self(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn update_f32(&mut self, values: &[f32]) {
        for v in values {
            self.update(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

fn as_u32(field: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{field} does not fit in u32")))
}

/// Serializes weights into an in-memory `ECW1` image.
pub fn encode(weights: &ModelWeights) -> Result<Vec<u8>> {
    let c = &weights.config;
    let payload_len = weights.parameter_count() * 4;
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, v) in [
        ("num_layers", c.num_layers),
        ("num_heads", c.num_heads),
        ("head_dim", c.head_dim),
        ("vocab_size", c.vocab_size),
        ("ffn_mult", c.ffn_mult),
        ("max_seq_len", c.max_seq_len),
    ] {
        buf.extend_from_slice(&as_u32(name, v)?.to_le_bytes());
    }
    buf.extend_from_slice(&c.mask_token_id.to_le_bytes());
    buf.extend_from_slice(&c.logit_scale.to_bits().to_le_bytes());
    buf.extend_from_slice(&c.rng_seed.to_le_bytes());
    buf.extend_from_slice(&(payload_len as u64).to_le_bytes());
    for t in weights.tensors() {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&checksum.to_le_bytes());
    Ok(buf)
}

/// Parses an `ECW1` image.
pub fn decode(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) {
            Error::Truncated
        } else {
            Error::NotAWeightsFile
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::NotAWeightsFile);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated);
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported ECW1 version {version}"
        )));
    }
    let config = ModelConfig {
        num_layers: u32_at(8) as usize,
        num_heads: u32_at(12) as usize,
        head_dim: u32_at(16) as usize,
        vocab_size: u32_at(20) as usize,
        ffn_mult: u32_at(24) as usize,
        max_seq_len: u32_at(28) as usize,
        mask_token_id: u32_at(32),
        logit_scale: f32::from_bits(u32_at(36)),
        rng_seed: u64_at(40),
    };
    let payload_len = u64_at(48);
    let mut weights = ModelWeights::zeros(&config)?;
    let expected = (weights.parameter_count() * 4) as u64;
    if payload_len != expected {
        return Err(Error::ShapeMismatch(format!(
            "payload of {payload_len} bytes, config implies {expected}"
        )));
    }
    let payload_end = HEADER_LEN + expected as usize;
    if bytes.len() < payload_end + 8 {
        return Err(Error::Truncated);
    }
    if bytes.len() > payload_end + 8 {
        return Err(Error::ShapeMismatch("trailing bytes after checksum".into()));
    }
    let payload = &bytes[HEADER_LEN..payload_end];
    let stored = u64_at(payload_end);
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in weights.tensors_mut() {
        for (dst, src) in t.iter_mut().zip(&mut floats) {
            *dst = src;
        }
    }
    Ok(weights)
}

/// Writes `weights` to `path` via a sibling temp file and rename.
pub fn save(weights: &ModelWeights, path: &Path) -> Result<()> {
    let bytes = encode(weights)?;
    let write_failed = |source| Error::WriteFailed {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(write_failed)?;
    tmp.write_all(&bytes).map_err(write_failed)?;
    tmp.as_file().sync_all().map_err(write_failed)?;
    tmp.persist(path).map_err(|e| write_failed(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelWeights> {
    decode(&fs::read(path)?)
}

/// Loads and checks that every architecture field (all but `rng_seed`)
/// equals `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<ModelWeights> {
    let weights = load(path)?;
    let diffs = architecture_diff(&weights.config, expected);
    if diffs.is_empty() {
        Ok(weights)
    } else {
        Err(Error::ConfigMismatch(diffs.join(", ")))
    }
}

pub(crate) fn architecture_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |name: &str, x: String, y: String| {
        if x != y {
            out.push(format!("{name}: file {x}, requested {y}"));
        }
    };
    check(
        "num_layers",
        a.num_layers.to_string(),
        b.num_layers.to_string(),
    );
    check(
        "num_heads",
        a.num_heads.to_string(),
        b.num_heads.to_string(),
    );
    check("head_dim", a.head_dim.to_string(), b.head_dim.to_string());
    check(
        "vocab_size",
        a.vocab_size.to_string(),
        b.vocab_size.to_string(),
    );
    check("ffn_mult", a.ffn_mult.to_string(), b.ffn_mult.to_string());
    check(
        "max_seq_len",
        a.max_seq_len.to_string(),
        b.max_seq_len.to_string(),
    );
    check(
        "mask_token_id",
        a.mask_token_id.to_string(),
        b.mask_token_id.to_string(),
    );
    check(
        "logit_scale",
        a.logit_scale.to_bits().to_string(),
        b.logit_scale.to_bits().to_string(),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            vocab_size: 40,
            mask_token_id: 39,
            max_seq_len: 64,
            rng_seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn header_layout() {
        let w = init_weights(&config()).unwrap();
        let bytes = encode(&w).unwrap();
        assert_eq!(&bytes[..4], b"ECW1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 40);
        assert_eq!(u64::from_le_bytes(bytes[40..48].try_into().unwrap()), 9);
        assert_eq!(bytes.len(), HEADER_LEN + w.parameter_count() * 4 + 8);
        // First payload float is embedding[0][0].
        let first = f32::from_le_bytes(bytes[56..60].try_into().unwrap());
        assert_eq!(first.to_bits(), w.embedding.data()[0].to_bits());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ecw");
        let w = init_weights(&config()).unwrap();
        save(&w, &path).unwrap();
        let back = load(&path).unwrap();
        assert!(w.bitwise_eq(&back));
        // Overwrite in place.
        let w2 = init_weights(&ModelConfig {
            rng_seed: 10,
            ..config()
        })
        .unwrap();
        save(&w2, &path).unwrap();
        assert!(w2.bitwise_eq(&load(&path).unwrap()));
    }

    #[test]
    fn corrupted_payload_rejected() {
        let w = init_weights(&config()).unwrap();
        let mut bytes = encode(&w).unwrap();
        bytes[HEADER_LEN + 17] ^= 0x01;
        assert!(matches!(
            decode(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let w = init_weights(&config()).unwrap();
        let bytes = encode(&w).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong), Err(Error::NotAWeightsFile)));
        assert!(matches!(decode(b"PK"), Err(Error::NotAWeightsFile)));
        assert!(matches!(decode(b"EC"), Err(Error::Truncated)));
        assert!(matches!(decode(&bytes[..30]), Err(Error::Truncated)));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated)
        ));
    }

    #[test]
    fn config_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ecw");
        save(&init_weights(&config()).unwrap(), &path).unwrap();
        assert!(load_expecting(&path, &config()).is_ok());
        let other = ModelConfig {
            num_layers: 3,
            ..config()
        };
        assert!(matches!(
            load_expecting(&path, &other),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn save_to_missing_directory_fails() {
        let w = init_weights(&config()).unwrap();
        let err = save(&w, Path::new("/nonexistent-dir/for/sure/w.ecw")).unwrap_err();
        assert!(matches!(err, Error::WriteFailed { .. }));
    }
}
