//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NSLGC1"  u32 version
//! u32 len, model config as `key = value` text
//! u8 noise flags (bit 0 dropout, bit 1 stochastic depth)  u64 epoch
//! u32 count, then per parameter: u16 len, name, u8 rank, u32 dims, f32 values
//! u32 count, then per BN layer: u16 len, name, u32 channels, f32 means, f32 variances
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use nodule_core::blocks::StochasticDepthConfig;
use nodule_core::model::{build_model, ActiveNoise, ModelConfig, ModelState};
use nodule_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config::parse_text;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 6] = b"NSLGC1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("format version {found}, this build reads {expected}")]
    VersionSkew { found: u32, expected: u32 },
    #[error("checksum mismatch (truncated or corrupted)")]
    ChecksumMismatch,
    #[error("malformed: {0}")]
    Malformed(String),
}

impl CheckpointError {
    /// Stable identifier printed alongside the message.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic => "E_CKPT_MAGIC",
            CheckpointError::VersionSkew { .. } => "E_CKPT_VERSION",
            CheckpointError::ChecksumMismatch => "E_CKPT_CHECKSUM",
            CheckpointError::Malformed(_) => "E_CKPT_MALFORMED",
        }
    }
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "variant = {}\ninput_size = {}\nbase_channels = {}\nmaxout_pieces = {}\ndropout = {},{}\nsurvival = {}\nseed = {}\n",
        c.variant, c.input_size, c.base_channels, c.maxout_pieces, c.dropout_rates[0], c.dropout_rates[1],
        c.stochastic_depth.survival, c.seed
    )
}

fn parse_config(text: &str) -> Result<ModelConfig, CheckpointError> {
    let bad = |m: String| CheckpointError::Malformed(m);
    let pairs = parse_text(text).map_err(|e| bad(e.to_string()))?;
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("model config lacks `{k}`")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CheckpointError> {
        v.parse().map_err(|_| CheckpointError::Malformed(format!("model config `{k}` = `{v}`")))
    }
    let (d0, d1) = get("dropout")?
        .split_once(',')
        .ok_or_else(|| bad("model config `dropout` needs two rates".into()))?;
    Ok(ModelConfig {
        variant: get("variant")?.parse().map_err(|e: nodule_core::Error| bad(e.to_string()))?,
        input_size: num("input_size", get("input_size")?)?,
        base_channels: num("base_channels", get("base_channels")?)?,
        maxout_pieces: num("maxout_pieces", get("maxout_pieces")?)?,
        dropout_rates: [num("dropout", d0)?, num("dropout", d1)?],
        stochastic_depth: StochasticDepthConfig {
            survival: num("survival", get("survival")?)?,
        },
        seed: num("seed", get("seed")?)?,
    })
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(model: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(&model.config);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let noise = model.noise();
    out.push(noise.dropout as u8 | (noise.stochastic_depth as u8) << 1);
    out.extend_from_slice(&(model.epoch as u64).to_le_bytes());
    out.extend_from_slice(&(model.store.params.len() as u32).to_le_bytes());
    for p in &model.store.params {
        put_name(&mut out, &p.name);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, p.value.data());
    }
    out.extend_from_slice(&(model.store.stats.len() as u32).to_le_bytes());
    for (name, stats) in &model.store.stats {
        put_name(&mut out, name);
        out.extend_from_slice(&(stats.channels() as u32).to_le_bytes());
        put_f32s(&mut out, &stats.mean);
        put_f32s(&mut out, &stats.var);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("record runs past byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelState, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    // a file cut inside the header is still reported as a checksum failure
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let found = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if found != VERSION {
        return Err(CheckpointError::VersionSkew {
            found,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let bad = CheckpointError::Malformed;
    let mut cur = Cursor { bytes: body, at: 10 };
    let text_len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(text_len)?).map_err(|_| bad("config is not UTF-8".into()))?;
    let config = parse_config(text)?;
    let mut model = build_model(&config).map_err(|e| bad(e.to_string()))?;
    let flags = cur.u8()?;
    model.set_noise(ActiveNoise {
        dropout: flags & 1 != 0,
        stochastic_depth: flags & 2 != 0,
    });
    model.epoch = cur.u64()? as usize;

    let n_params = cur.u32()? as usize;
    if n_params != model.store.params.len() {
        return Err(bad(format!("{n_params} parameters, architecture has {}", model.store.params.len())));
    }
    for p in &mut model.store.params {
        let name = cur.name()?;
        let rank = cur.u8()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(bad(format!("parameter `{name}` {shape:?} does not match `{}` {:?}", p.name, p.value.shape())));
        }
        let values = cur.f32s(p.value.len())?;
        p.value = Tensor::new(shape, values).map_err(|e| bad(e.to_string()))?;
    }
    let n_stats = cur.u32()? as usize;
    if n_stats != model.store.stats.len() {
        return Err(bad(format!("{n_stats} BN layers, architecture has {}", model.store.stats.len())));
    }
    for (name, stats) in &mut model.store.stats {
        let found = cur.name()?;
        let channels = cur.u32()? as usize;
        if &found != name || channels != stats.channels() {
            return Err(bad(format!("BN layer `{found}` ({channels}) does not match `{name}`")));
        }
        stats.mean = cur.f32s(channels)?;
        stats.var = cur.f32s(channels)?;
    }
    if cur.at != body.len() {
        return Err(bad(format!("{} trailing bytes", body.len() - cur.at)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> CliResult<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nodule_core::model::ModelVariant;

    fn model() -> ModelState {
        let mut m = build_model(&ModelConfig::new(ModelVariant::MaxoutLocalGlobal, 5)).unwrap();
        m.epoch = 12;
        m.set_noise(ActiveNoise {
            dropout: true,
            stochastic_depth: false,
        });
        m
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let first = encode(&model());
        let loaded = decode(&first).unwrap();
        assert_eq!(encode(&loaded), first);
        assert_eq!(loaded.epoch, 12);
        assert!(!loaded.noise().stochastic_depth);
        assert_eq!(loaded.config, model().config);
    }

    #[test]
    fn corruption_maps_to_distinct_errors() {
        let good = encode(&model());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert_eq!(decode(&magic).unwrap_err(), CheckpointError::BadMagic);
        let mut version = good.clone();
        version[6] = 9;
        assert!(matches!(decode(&version).unwrap_err(), CheckpointError::VersionSkew { found: 9, .. }));
        let mut flipped = good.clone();
        flipped[good.len() / 2] ^= 0x10;
        assert_eq!(decode(&flipped).unwrap_err(), CheckpointError::ChecksumMismatch);
        for cut in [8, 20, good.len() / 3, good.len() - 1] {
            assert_eq!(decode(&good[..cut]).unwrap_err(), CheckpointError::ChecksumMismatch);
        }
        assert_eq!(decode(b"").unwrap_err(), CheckpointError::BadMagic);
    }
}
