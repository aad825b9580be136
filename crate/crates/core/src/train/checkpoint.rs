//! Binary checkpoint files.
//!
//! Layout, little-endian: magic `NICKPT\0\0`, u32 version, u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, u64
//! dims and f32 data. Parameters come first in name order, then their
//! velocities under a `velocity.` prefix. A UTF-8 JSON trailer with the
//! configuration, vocabulary, epoch and RNG state follows, and the file
//! ends with the trailer's u64 byte length.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::OptimizerConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::models::{CaptionModel, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NICKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND: &str = "checkpoint";
const VELOCITY_PREFIX: &str = "velocity.";

/// Position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to decode with, or continue training, a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub vocab: Vocabulary,
    pub params: ParamSet<f32>,
    pub velocities: ParamSet<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct RngTrailer {
    key: String,
    stream: u64,
    /// Decimal; JSON numbers cannot carry 128 bits portably.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    config: ModelConfig,
    optimizer: OptimizerConfig,
    vocab: Vec<String>,
    vocab_min_count: usize,
    epoch: usize,
    seed: u64,
    rng: RngTrailer,
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        kind: KIND,
        detail: detail.into(),
    }
}

fn truncated(detail: impl Into<String>) -> Error {
    Error::Truncated {
        kind: KIND,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            truncated(format!("{what} needs {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("parameter name `{name}` too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.params.len() + self.velocities.len())
            .map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, name, t)?;
        }
        for (name, t) in self.velocities.iter() {
            write_tensor(&mut out, &format!("{VELOCITY_PREFIX}{name}"), t)?;
        }
        let trailer = Trailer {
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_min_count: self.vocab.min_count(),
            epoch: self.epoch,
            seed: self.optimizer.seed,
            rng: RngTrailer {
                key: hex::encode(self.rng.key),
                stream: self.rng.stream,
                word_pos: self.rng.word_pos.to_string(),
            },
        };
        let json = serde_json::to_vec(&trailer)?;
        out.extend_from_slice(&json);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { kind: KIND });
        }
        let mut r = Reader {
            bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { kind: KIND, version });
        }
        let count = r.u32("tensor count")?;

        let mut params = ParamSet::new();
        let mut velocities = ParamSet::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| malformed("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| malformed(format!("tensor `{name}` is too large")))?;
            let raw = r.take(
                numel.checked_mul(4).ok_or_else(|| malformed(format!("tensor `{name}` is too large")))?,
                "tensor data",
            )?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| malformed(format!("tensor `{name}`: {e}")))?;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(base) => velocities.insert(base, tensor),
                None => params.insert(name, tensor),
            }
        }

        if bytes.len() < r.pos + 8 {
            return Err(truncated("missing trailer length"));
        }
        let trailer_len = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let available = (bytes.len() - 8 - r.pos) as u64;
        if trailer_len != available {
            return Err(if trailer_len > available {
                truncated(format!("trailer declares {trailer_len} bytes, {available} present"))
            } else {
                malformed(format!("{} unexpected bytes before the trailer", available - trailer_len))
            });
        }
        let trailer: Trailer = serde_json::from_slice(&bytes[r.pos..bytes.len() - 8])?;

        let vocab = Vocabulary::from_tokens(trailer.vocab, trailer.vocab_min_count)?;
        let key: [u8; 32] = hex::decode(&trailer.rng.key)
            .ok()
            .and_then(|k| k.try_into().ok())
            .ok_or_else(|| malformed("RNG key must be 64 hex digits"))?;
        let word_pos = trailer
            .rng
            .word_pos
            .parse()
            .map_err(|_| malformed("RNG word position is not an integer"))?;

        if trailer.config.vocab_size != vocab.len() {
            return Err(malformed(format!(
                "config vocabulary size {} but {} tokens stored",
                trailer.config.vocab_size,
                vocab.len()
            )));
        }
        let model = CaptionModel::new(trailer.config.clone()).map_err(|e| malformed(e.to_string()))?;
        model
            .check_params(&params)
            .and_then(|_| model.check_params(&velocities))
            .map_err(|_| malformed("stored tensors do not match the stored configuration"))?;

        Ok(Checkpoint {
            config: trailer.config,
            optimizer: trailer.optimizer,
            vocab,
            params,
            velocities,
            epoch: trailer.epoch,
            rng: RngState {
                key,
                stream: trailer.rng.stream,
                word_pos,
            },
        })
    }

    /// Writes through a temporary file so readers never see a partial one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn model(&self) -> Result<CaptionModel> {
        CaptionModel::new(self.config.clone())
    }
}
