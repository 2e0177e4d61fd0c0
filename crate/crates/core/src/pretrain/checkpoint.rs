//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes  "VEGACKPT"
//! version   u32 LE
//! meta_len  u64 LE
//! meta      meta_len bytes of JSON
//! checksum  32 bytes, SHA-256 over meta and every tensor block
//! blocks    u32 count, then per block:
//!           u32 name_len, name, u8 dtype, u32 rank, u64 dims[rank], data LE
//! ```
//!
//! Optimizer moments are stored as blocks named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{count_parameters, EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::heads::LabelKind;
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VEGACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Phase1,
    Phase1Complete,
    Phase2,
    Phase2Complete,
    Finetuned,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Phase1 => "phase1",
            Phase::Phase1Complete => "phase1-complete",
            Phase::Phase2 => "phase2",
            Phase::Phase2Complete => "phase2-complete",
            Phase::Finetuned => "finetuned",
        }
    }
}

/// Which head the non-encoder parameters belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Rtd,
    Task(LabelKind),
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder: EncoderState<T>,
    pub head: ParamSet<T>,
    pub head_kind: HeadKind,
    pub optimizer: AdamWState<T>,
    pub phase: Phase,
    /// Updates applied over the whole run.
    pub step: u64,
    /// Updates applied in the current phase.
    pub phase_step: u64,
    pub seed: u64,
    /// Index of the next batch/corruption/dropout stream to draw.
    pub rng_position: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    encoder: EncoderConfig,
    head_kind: HeadKind,
    phase: Phase,
    step: u64,
    phase_step: u64,
    seed: u64,
    rng_position: u64,
    optimizer: AdamWConfig,
    optimizer_t: u64,
    dtype: u8,
}

fn put_block<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let meta = Meta {
        encoder: ck.encoder.config.clone(),
        head_kind: ck.head_kind,
        phase: ck.phase,
        step: ck.step,
        phase_step: ck.phase_step,
        seed: ck.seed,
        rng_position: ck.rng_position,
        optimizer: ck.optimizer.config,
        optimizer_t: ck.optimizer.t,
        dtype: T::DTYPE,
    };
    let meta = serde_json::to_vec(&meta)?;

    let mut blocks = Vec::new();
    let count = ck.encoder.params.len() + ck.head.len() + 2 * ck.optimizer.moments.len();
    blocks.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in ck.encoder.params.iter().chain(ck.head.iter()) {
        put_block(&mut blocks, name, t.shape(), t.data());
    }
    for (name, (m, v)) in &ck.optimizer.moments {
        put_block(&mut blocks, &format!("adam.m.{name}"), &[m.len()], m);
        put_block(&mut blocks, &format!("adam.v.{name}"), &[v.len()], v);
    }

    let mut hasher = Sha256::new();
    hasher.update(&meta);
    hasher.update(&blocks);
    let digest = hasher.finalize();

    let mut out = Vec::with_capacity(8 + 4 + 8 + meta.len() + 32 + blocks.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&digest);
    out.extend_from_slice(&blocks);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Integrity(format!(
                "truncated checkpoint: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses bytes produced by [`encode_checkpoint`]. The checksum is verified
/// before any tensor is materialised.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta_bytes = r.take(meta_len)?;
    let digest = r.take(32)?;
    let blocks = &bytes[r.pos..];
    let mut hasher = Sha256::new();
    hasher.update(meta_bytes);
    hasher.update(blocks);
    if hasher.finalize().as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let meta: Meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Integrity(format!("unreadable metadata: {e}")))?;
    if meta.dtype != T::DTYPE {
        return Err(Error::ConfigMismatch {
            field: "dtype".into(),
            expected: T::DTYPE.to_string(),
            found: meta.dtype.to_string(),
        });
    }
    meta.encoder.validate()?;

    let mut r = Reader { buf: blocks, pos: 0 };
    let count = r.u32()?;
    let mut encoder = ParamSet::new();
    let mut head = ParamSet::new();
    let mut optimizer = AdamWState::new(meta.optimizer);
    optimizer.t = meta.optimizer_t;
    let mut pending_m: Option<(String, Vec<T>)> = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(Error::Integrity(format!("block `{name}` has dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| Error::Integrity(format!("block `{name}` shape overflows")))?;
        let raw = r.take(len.checked_mul(T::BYTES).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();

        if let Some(p) = name.strip_prefix("adam.m.") {
            pending_m = Some((p.to_string(), data));
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            match pending_m.take() {
                Some((pm, m)) if pm == p && m.len() == data.len() => optimizer.insert_moments(pm, m, data),
                _ => return Err(Error::Integrity(format!("unpaired optimizer moment `{p}`"))),
            }
        } else {
            let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("block `{name}`: {e}")))?;
            let target = if name.starts_with("encoder.") { &mut encoder } else { &mut head };
            target
                .insert(name, t)
                .map_err(|e| Error::Integrity(e.to_string()))?;
        }
    }
    if pending_m.is_some() || r.pos != blocks.len() {
        return Err(Error::Integrity("trailing or incomplete blocks".into()));
    }
    if encoder.num_elements() != count_parameters(&meta.encoder) {
        return Err(Error::Integrity(format!(
            "encoder holds {} values, config implies {}",
            encoder.num_elements(),
            count_parameters(&meta.encoder)
        )));
    }
    Ok(Checkpoint {
        encoder: EncoderState {
            config: meta.encoder,
            params: encoder,
        },
        head,
        head_kind: meta.head_kind,
        optimizer,
        phase: meta.phase,
        step: meta.step,
        phase_step: meta.phase_step,
        seed: meta.seed,
        rng_position: meta.rng_position,
    })
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads and checks the encoder configuration against `expected`, naming the
/// first differing field on mismatch.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, expected: &EncoderConfig) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint(path)?;
    if let Some((field, exp, found)) = expected.first_difference(&ck.encoder.config) {
        return Err(Error::ConfigMismatch {
            field,
            expected: exp,
            found,
        });
    }
    Ok(ck)
}
