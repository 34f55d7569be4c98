//! Binary checkpoints for a source model and its adapters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   b"MMTTACKP"
//! version      u32       currently 1
//! count        u32       number of tensors
//! count × {
//!     name_len u32
//!     name     name_len bytes of UTF-8
//!     rank     u32
//!     dims     rank × u64
//!     payload  product(dims) × f64
//! }
//! ```
//!
//! Tensors are written in a fixed order, so saving the same state twice
//! produces identical bytes. Besides the weights, two metadata tensors are
//! stored: `meta.seed` (the run seed and adapter init seed, each split into
//! two 32-bit halves so they survive the `f64` payload exactly) and
//! `meta.dims` (input, hidden, latent, classes, stable rank, bottleneck
//! code). Modality names are recovered from the `encoder.<name>.w1`
//! entries, in file order.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{
    AdapterBank, AdapterPair, Bottleneck, Encoder, ModelConfig, ModelParams, StableAdapter,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMTTACKP";
pub const VERSION: u32 = 1;

/// A model, its adapters and the seed they were produced with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub adapters: AdapterBank,
    pub seed: u64,
}

fn split_u64(v: u64) -> [f64; 2] {
    [(v >> 32) as f64, (v & 0xffff_ffff) as f64]
}

fn join_u64(hi: f64, lo: f64) -> u64 {
    ((hi as u64) << 32) | (lo as u64)
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, Tensor)> {
    let cfg = &ck.model.config;
    let mut out = Vec::new();
    let [s_hi, s_lo] = split_u64(ck.seed);
    let [a_hi, a_lo] = split_u64(ck.adapters.init_seed);
    out.push(("meta.seed".into(), Tensor::vector(vec![s_hi, s_lo, a_hi, a_lo])));
    out.push((
        "meta.dims".into(),
        Tensor::vector(vec![
            cfg.input_dim as f64,
            cfg.hidden_dim as f64,
            cfg.latent_dim as f64,
            cfg.num_classes as f64,
            cfg.stable_rank as f64,
            cfg.bottleneck.code(),
        ]),
    ));
    for (name, e) in cfg.modalities.iter().zip(&ck.model.encoders) {
        out.push((format!("encoder.{name}.w1"), e.w1.clone()));
        out.push((format!("encoder.{name}.b1"), e.b1.clone()));
        out.push((format!("encoder.{name}.w2"), e.w2.clone()));
        out.push((format!("encoder.{name}.b2"), e.b2.clone()));
    }
    out.push(("fusion.w".into(), ck.model.fusion_w.clone()));
    out.push(("fusion.b".into(), ck.model.fusion_b.clone()));
    out.push(("head.w".into(), ck.model.head_w.clone()));
    out.push(("head.b".into(), ck.model.head_b.clone()));
    for (name, a) in cfg.modalities.iter().zip(&ck.adapters.pairs) {
        out.push((format!("adapter.{name}.stable.down"), a.stable.down.clone()));
        out.push((format!("adapter.{name}.stable.up"), a.stable.up.clone()));
        out.push((format!("adapter.{name}.plastic"), a.plastic.clone()));
        let flags = vec![a.plastic_active as u8 as f64, a.stable_trainable as u8 as f64];
        out.push((format!("adapter.{name}.flags"), Tensor::vector(flags)));
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let tensors = named_tensors(ck);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { what: what.to_string() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses the raw tensor list without interpreting it.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8, "magic").map_err(|_| CheckpointError::BadMagic {
        found: bytes.iter().take(8).copied().collect(),
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = r.u32(&format!("name length of tensor {i}"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| CheckpointError::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32(&format!("rank of `{name}`"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&format!("dims of `{name}`"))? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = r.take(
            n.checked_mul(8)
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?,
            &format!("payload of `{name}`"),
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

struct Table {
    entries: Vec<(String, Tensor)>,
}

impl Table {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor, CheckpointError> {
        let pos = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        let (_, t) = self.entries.remove(pos);
        if t.shape() != expected {
            return Err(CheckpointError::Manifest {
                tensor: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }
}

/// Decodes a checkpoint and validates every tensor shape against the
/// configuration recorded in the file, or against `expected` when given.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let entries = decode_tensors(bytes)?;
    let mut table = Table { entries };

    let seed = table.take("meta.seed", &[4])?;
    let s = seed.data();
    let (run_seed, adapter_seed) = (join_u64(s[0], s[1]), join_u64(s[2], s[3]));
    let dims = table.take("meta.dims", &[6])?;
    let d = dims.data();
    let bottleneck = Bottleneck::from_code(d[5])
        .ok_or_else(|| CheckpointError::Malformed(format!("unknown bottleneck code {}", d[5])))?;
    let modalities: Vec<String> = table
        .entries
        .iter()
        .filter_map(|(n, _)| {
            n.strip_prefix("encoder.")
                .and_then(|rest| rest.strip_suffix(".w1"))
                .map(str::to_string)
        })
        .collect();
    let stored = ModelConfig {
        modalities,
        input_dim: d[0] as usize,
        hidden_dim: d[1] as usize,
        latent_dim: d[2] as usize,
        num_classes: d[3] as usize,
        stable_rank: d[4] as usize,
        bottleneck,
    };
    let cfg = match expected {
        Some(e) => {
            if e.modalities != stored.modalities {
                return Err(CheckpointError::Malformed(format!(
                    "modalities {:?} do not match expected {:?}",
                    stored.modalities, e.modalities
                ))
                .into());
            }
            e.clone()
        }
        None => stored,
    };
    cfg.validate()
        .map_err(|e| CheckpointError::Malformed(format!("stored config is invalid: {e}")))?;

    let (d_in, h, dl, c, r) = (
        cfg.input_dim,
        cfg.hidden_dim,
        cfg.latent_dim,
        cfg.num_classes,
        cfg.stable_rank,
    );
    let mut encoders = Vec::new();
    for name in &cfg.modalities {
        encoders.push(Encoder {
            w1: table.take(&format!("encoder.{name}.w1"), &[d_in, h])?,
            b1: table.take(&format!("encoder.{name}.b1"), &[1, h])?,
            w2: table.take(&format!("encoder.{name}.w2"), &[h, dl])?,
            b2: table.take(&format!("encoder.{name}.b2"), &[1, dl])?,
        });
    }
    let fusion_w = table.take("fusion.w", &[dl, dl])?;
    let fusion_b = table.take("fusion.b", &[1, dl])?;
    let head_w = table.take("head.w", &[dl, c])?;
    let head_b = table.take("head.b", &[1, c])?;
    let mut pairs = Vec::new();
    for name in &cfg.modalities {
        let down = table.take(&format!("adapter.{name}.stable.down"), &[dl, r])?;
        let up = table.take(&format!("adapter.{name}.stable.up"), &[r, dl])?;
        let plastic = table.take(&format!("adapter.{name}.plastic"), &[dl, dl])?;
        let flags = table.take(&format!("adapter.{name}.flags"), &[2])?;
        pairs.push(AdapterPair {
            stable: StableAdapter {
                down,
                up,
                activation: cfg.bottleneck,
            },
            plastic,
            plastic_active: flags.data()[0] != 0.0,
            stable_trainable: flags.data()[1] != 0.0,
        });
    }
    if let Some((name, _)) = table.entries.first() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor `{name}`")).into());
    }
    let model = ModelParams {
        config: cfg,
        encoders,
        fusion_w,
        fusion_b,
        head_w,
        head_b,
    };
    if !model.all_finite() {
        return Err(CheckpointError::Malformed("non-finite weights".into()).into());
    }
    Ok(Checkpoint {
        model,
        adapters: AdapterBank {
            pairs,
            init_seed: adapter_seed,
        },
        seed: run_seed,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            input_dim: 4,
            hidden_dim: 5,
            latent_dim: 6,
            num_classes: 3,
            stable_rank: 2,
            ..ModelConfig::default()
        };
        Checkpoint {
            model: ModelParams::init(cfg.clone(), 17).unwrap(),
            adapters: AdapterBank::fresh(&cfg, 0xdead_beef_1234_5678),
            seed: u64::MAX - 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = encode(&ck);
        let back = decode(&bytes, None).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample());
        bytes[0] ^= 0xff;
        assert!(matches!(
            decode(&bytes, None),
            Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&sample());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes, None),
            Err(Error::Checkpoint(CheckpointError::Version { found: 7, expected: 1 }))
        ));
    }

    #[test]
    fn truncated_file() {
        let bytes = encode(&sample());
        for cut in [3, 10, 40, bytes.len() - 1] {
            let err = decode(&bytes[..cut], None).unwrap_err();
            match err {
                Error::Checkpoint(CheckpointError::Truncated { .. })
                | Error::Checkpoint(CheckpointError::BadMagic { .. }) => {}
                other => panic!("cut {cut}: unexpected {other:?}"),
            }
        }
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1], None),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
    }

    #[test]
    fn mismatched_latent_dim_names_tensor() {
        let ck = sample();
        let bytes = encode(&ck);
        let wrong = ModelConfig {
            latent_dim: 7,
            ..ck.model.config.clone()
        };
        match decode(&bytes, Some(&wrong)) {
            Err(Error::Checkpoint(CheckpointError::Manifest { tensor, .. })) => {
                assert_eq!(tensor, "encoder.audio.w2");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
}
