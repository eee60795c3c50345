//! Checkpoint serialization.
//!
//! Layout (all little-endian): magic `MMVC`, u32 version, u64 config
//! fingerprint (FNV-1a over the canonical `model.*` lines), u32 tensor
//! count, then per tensor: u16 name length + UTF-8 name, u32 rank, u32
//! extents, f32 payload. Loading verifies the fingerprint against the
//! target config and refuses on mismatch — cross-config weight movement
//! goes through the transfer module instead.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::config::Config;
use crate::model::{build_schedule, param_shapes, Model};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MMVC";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;
const MAX_NAME: usize = 512;
const MAX_TENSORS: u32 = 1 << 20;
const MAX_ELEMS: usize = 1 << 28;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("checkpoint version {got}, this build reads {want}")]
    Version { got: u32, want: u32 },
    #[error(
        "checkpoint fingerprint {} does not match config fingerprint {} \
         (different model.* settings; load through the transfer path instead)",
        Fp(*file), Fp(*config)
    )]
    Fingerprint { file: u64, config: u64 },
    #[error("checkpoint is missing parameter `{name}`")]
    MissingTensor { name: String },
    #[error("checkpoint contains unknown parameter `{name}`")]
    UnknownTensor { name: String },
    #[error("parameter `{name}`: checkpoint shape {got:?}, model expects {want:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hex wrapper so both fingerprints print the same way everywhere.
struct Fp(u64);

impl fmt::Display for Fp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A parsed checkpoint before any model-shape validation.
#[derive(Debug)]
pub struct RawCheckpoint {
    pub version: u32,
    pub fingerprint: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

// ── encode ───────────────────────────────────────────────────────────

pub fn encode_checkpoint<F: Scalar>(cfg: &Config, params: &ModelParams<Tensor<F>>) -> Vec<u8> {
    let leaves = params.leaves();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.fingerprint().to_le_bytes());
    out.extend_from_slice(&u32::try_from(leaves.len()).expect("tensor count fits u32").to_le_bytes());
    for (name, t) in leaves {
        let nb = name.as_bytes();
        out.extend_from_slice(&u16::try_from(nb.len()).expect("name fits u16").to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&u32::try_from(t.rank()).expect("rank fits u32").to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint<F: Scalar>(
    cfg: &Config,
    params: &ModelParams<Tensor<F>>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, params))?;
    Ok(())
}

// ── decode ───────────────────────────────────────────────────────────

struct Cur<'a> {
    b: &'a [u8],
    off: usize,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.b.len() - self.off < n {
            return Err(CheckpointError::Malformed {
                offset: self.off,
                msg: format!("truncated: {what} needs {n} bytes, {} left", self.b.len() - self.off),
            });
        }
        let s = &self.b[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("len 2")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("len 4")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("len 8")))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut c = Cur { b: bytes, off: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::Malformed {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected `MMVC`"),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { got: version, want: VERSION });
    }
    let fingerprint = c.u64("fingerprint")?;
    let count = c.u32("tensor count")?;
    if count > MAX_TENSORS {
        return Err(CheckpointError::Malformed {
            offset: c.off - 4,
            msg: format!("tensor count {count} exceeds limit {MAX_TENSORS}"),
        });
    }
    let mut tensors = Vec::with_capacity(count as usize);
    let mut seen: HashMap<String, ()> = HashMap::new();
    for _ in 0..count {
        let name_off = c.off;
        let name_len = c.u16("name length")? as usize;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(CheckpointError::Malformed {
                offset: name_off,
                msg: format!("name length {name_len} out of range 1..={MAX_NAME}"),
            });
        }
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| CheckpointError::Malformed {
                offset: name_off + 2,
                msg: format!("name is not UTF-8: {e}"),
            })?
            .to_owned();
        if seen.insert(name.clone(), ()).is_some() {
            return Err(CheckpointError::Malformed {
                offset: name_off,
                msg: format!("duplicate tensor name `{name}`"),
            });
        }
        let rank_off = c.off;
        let rank = c.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed {
                offset: rank_off,
                msg: format!("rank {rank} exceeds limit {MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let ext_off = c.off;
            let d = c.u32("extent")? as usize;
            if d == 0 {
                return Err(CheckpointError::Malformed {
                    offset: ext_off,
                    msg: "zero extent".into(),
                });
            }
            numel = numel.checked_mul(d).filter(|&n| n <= MAX_ELEMS).ok_or_else(|| {
                CheckpointError::Malformed {
                    offset: ext_off,
                    msg: format!("element count exceeds limit {MAX_ELEMS}"),
                }
            })?;
            shape.push(d);
        }
        let payload = c.take(numel * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().expect("len 4")))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("shape matches data length");
        tensors.push((name, t));
    }
    if c.off != bytes.len() {
        return Err(CheckpointError::Malformed {
            offset: c.off,
            msg: format!("{} trailing bytes after last tensor", bytes.len() - c.off),
        });
    }
    Ok(RawCheckpoint { version, fingerprint, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    parse_checkpoint(&std::fs::read(path)?)
}

// ── model assembly ───────────────────────────────────────────────────

/// Fit raw tensors into the parameter tree for `cfg`, checking names
/// and shapes both ways. Does not look at the fingerprint.
pub fn assemble_params<F: Scalar>(
    cfg: &Config,
    tensors: Vec<(String, Tensor<f32>)>,
) -> Result<ModelParams<Tensor<F>>> {
    let sched = build_schedule(cfg)?;
    let mut tree: ModelParams<Tensor<F>> =
        param_shapes(cfg, &sched).map(&mut |shape| Tensor::zeros(shape.clone()));
    let mut map: HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    for (name, slot) in tree.leaves_mut() {
        let t = map
            .remove(&name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if t.shape() != slot.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                got: t.shape().to_vec(),
                want: slot.shape().to_vec(),
            });
        }
        *slot = t.cast::<F>().requires_grad(true);
    }
    if let Some(name) = map.into_keys().next() {
        return Err(CheckpointError::UnknownTensor { name });
    }
    Ok(tree)
}

/// Load a checkpoint into a model for `cfg`. The checkpoint must carry
/// `cfg`'s exact model fingerprint; anything else is refused with both
/// fingerprints in the message.
pub fn load_model<F: Scalar>(cfg: &Config, path: &Path) -> Result<Model<F>> {
    let raw = load_checkpoint(path)?;
    if raw.fingerprint != cfg.fingerprint() {
        return Err(CheckpointError::Fingerprint {
            file: raw.fingerprint,
            config: cfg.fingerprint(),
        });
    }
    let params = assemble_params(cfg, raw.tensors)?;
    Ok(Model::from_params(cfg, params)?)
}

impl<F: Scalar> Model<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.cfg, &self.params, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> Config {
        let mut cfg = Config::tiny();
        cfg.model.input = (1, 16, 8);
        cfg.model.embed_dim = 8;
        cfg.model.self_counts = vec![0, 1];
        cfg.model.heads = vec![1, 2];
        cfg.model.num_classes = 3;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = load_model::<f32>(&cfg, &path).unwrap();
        for ((name, a), (_, b)) in model.params.leaves().iter().zip(loaded.params.leaves()) {
            assert_eq!(a.shape(), b.shape(), "{name}");
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
            assert!(b.needs_grad(), "{name} must come back trainable");
        }
    }

    #[test]
    fn truncation_anywhere_is_rejected() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let bytes = encode_checkpoint(&cfg, &model.params);
        // every prefix of the header region, then a sweep of payload cuts
        for cut in (0..64.min(bytes.len())).chain((64..bytes.len()).step_by(997)) {
            let err = parse_checkpoint(&bytes[..cut]);
            assert!(err.is_err(), "prefix of {cut} bytes must not parse");
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let mut bytes = encode_checkpoint(&cfg, &model.params);
        bytes.push(0);
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let bytes = encode_checkpoint(&cfg, &model.params);

        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&b).unwrap_err(),
            CheckpointError::Malformed { offset: 0, .. }
        ));

        let mut b = bytes.clone();
        b[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&b).unwrap_err(),
            CheckpointError::Version { got: 9, want: VERSION }
        ));
    }

    #[test]
    fn fingerprint_mismatch_is_refused_with_both_prints() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();

        let mut other = cfg.clone();
        other.model.num_classes = 5;
        let err = load_model::<f32>(&other, &path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&format!("{:016x}", cfg.fingerprint())));
        assert!(msg.contains(&format!("{:016x}", other.fingerprint())));
    }

    #[test]
    fn missing_and_unknown_tensors_are_named() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let raw = parse_checkpoint(&encode_checkpoint(&cfg, &model.params)).unwrap();

        let mut dropped = raw.tensors.clone();
        let removed = dropped.remove(3).0;
        let err = assemble_params::<f32>(&cfg, dropped).unwrap_err();
        assert!(err.to_string().contains(&removed));

        let mut extra = raw.tensors.clone();
        extra.push(("not.a.parameter".into(), Tensor::zeros(vec![1])));
        let err = assemble_params::<f32>(&cfg, extra).unwrap_err();
        assert!(err.to_string().contains("not.a.parameter"));
    }

    #[test]
    fn shape_drift_is_named() {
        let cfg = micro();
        let model = Model::<f32>::init(&cfg, 1).unwrap();
        let mut raw = parse_checkpoint(&encode_checkpoint(&cfg, &model.params)).unwrap();
        for (name, t) in raw.tensors.iter_mut() {
            if name == "head.bias" {
                *t = Tensor::zeros(vec![4]);
            }
        }
        let err = assemble_params::<f32>(&cfg, raw.tensors).unwrap_err();
        assert!(err.to_string().contains("head.bias"));
    }

    #[test]
    fn count_params_matches_checkpoint_walk() {
        // The introspected parameter count must equal a brute-force sum
        // over the serialized checkpoint's tensors.
        let cfg = Config::tiny();
        let model = Model::<f32>::init(&cfg, 2).unwrap();
        let raw = parse_checkpoint(&encode_checkpoint(&cfg, &model.params)).unwrap();
        let walked: u64 = raw.tensors.iter().map(|(_, t)| t.numel() as u64).sum();
        assert_eq!(walked, crate::model::count_params(&cfg).unwrap());
    }

    #[test]
    fn f64_params_round_trip_through_f32_payload() {
        let cfg = micro();
        let model = Model::<f64>::init(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = load_model::<f64>(&cfg, &path).unwrap();
        for ((name, a), (_, b)) in model.params.leaves().iter().zip(loaded.params.leaves()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32, "{name}");
            }
        }
    }

    #[test]
    fn zero_extent_and_rank_bombs_are_rejected() {
        // hand-build: magic, version, fingerprint, count=1, then a
        // tensor with rank 200
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&0u64.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(b'x');
        let mut rank_bomb = b.clone();
        rank_bomb.extend_from_slice(&200u32.to_le_bytes());
        assert!(parse_checkpoint(&rank_bomb).unwrap_err().to_string().contains("rank"));

        let mut zero_ext = b.clone();
        zero_ext.extend_from_slice(&1u32.to_le_bytes());
        zero_ext.extend_from_slice(&0u32.to_le_bytes());
        assert!(parse_checkpoint(&zero_ext).unwrap_err().to_string().contains("zero extent"));

        // extent overflow: 2^30 × 2^30 would wrap usize multiplication
        let mut overflow = b;
        overflow.extend_from_slice(&2u32.to_le_bytes());
        overflow.extend_from_slice(&(1u32 << 30).to_le_bytes());
        overflow.extend_from_slice(&(1u32 << 30).to_le_bytes());
        assert!(parse_checkpoint(&overflow).unwrap_err().to_string().contains("limit"));
    }
}
