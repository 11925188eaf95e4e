//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RRCKPT\0\0" | u32 version | u64 V_src, V_tgt, E, H
//! u32 n, n × (str key, str value)            training config
//! 2 × (u32 n, n × (str token, u64 count))    source / target vocab
//! u32 n, n × tensor                          model parameters
//! u64 step, u32 n, n × tensor, u32 n, n × tensor   Adam m / v
//! u64 completed epochs
//! 32-byte SHA-256 of everything above
//! ```
//!
//! A tensor is `str name | u32 ndim | ndim × u64 | f64 values`; strings
//! are `u32 length | UTF-8 bytes`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::trainer::{OptimizerState, TrainConfig};
use crate::vocab::{Vocab, NUM_SPECIAL, SPECIAL_TOKENS};

pub const MAGIC: &[u8; 8] = b"RRCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    /// Number of completed epochs.
    pub epoch: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.values() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn vocab(&mut self, v: &Vocab) {
        self.u32(v.content_len() as u32);
        for (tok, count) in v.entries() {
            self.str(tok);
            self.u64(count);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CheckpointError::Malformed(format!("{what} too large")))
    }
    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str("tensor name")?;
        let ndim = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.usize("tensor shape")?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} shape overflows")))?;
        let bytes = self.take(len.checked_mul(8).ok_or(CheckpointError::Truncated("tensor values"))?, "tensor values")?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, values).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
    fn vocab(&mut self) -> Result<Vocab> {
        let n = self.u32("vocab size")? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let tok = self.str("vocab token")?;
            if SPECIAL_TOKENS.contains(&tok.as_str()) {
                return Err(CheckpointError::Malformed(format!("vocab lists reserved token {tok}")));
            }
            entries.push((tok, self.u64("vocab count")?));
        }
        Ok(Vocab::from_counts(entries))
    }
}

fn encode(ck: &Checkpoint) -> Vec<u8> {
    let d = ck.params.dims();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    for v in [d.src_vocab, d.tgt_vocab, d.embed, d.hidden] {
        w.u64(v as u64);
    }
    let entries = ck.config.entries();
    w.u32(entries.len() as u32);
    for (k, v) in &entries {
        w.str(k);
        w.str(v);
    }
    w.vocab(&ck.src_vocab);
    w.vocab(&ck.tgt_vocab);
    w.u32(ck.params.tensors().len() as u32);
    for (name, t) in ck.params.named() {
        w.tensor(name, t);
    }
    w.u64(ck.optimizer.step);
    for (prefix, set) in [("m.", &ck.optimizer.m), ("v.", &ck.optimizer.v)] {
        w.u32(set.len() as u32);
        for (t, (name, _)) in set.iter().zip(ck.params.named()) {
            w.tensor(&format!("{prefix}{name}"), t);
        }
    }
    w.u64(ck.epoch);
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

fn decode(data: &[u8]) -> Result<Checkpoint> {
    if data.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated("header"));
    }
    if &data[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { data, pos: MAGIC.len() };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if data.len() < 32 + r.pos {
        return Err(CheckpointError::Truncated("checksum"));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    let mut r = Reader { data: body, pos: r.pos };
    let dims = ModelDims::new(r.usize("dims")?, r.usize("dims")?, r.usize("dims")?, r.usize("dims")?);

    let mut config = TrainConfig::default();
    let n = r.u32("config")?;
    for _ in 0..n {
        let k = r.str("config key")?;
        let v = r.str("config value")?;
        config.set(&k, &v).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    let src_vocab = r.vocab()?;
    let tgt_vocab = r.vocab()?;
    let n = r.u32("parameter count")?;
    let mut named = Vec::new();
    for _ in 0..n {
        named.push(r.tensor()?);
    }
    let params = ModelParams::from_named(dims, named).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let step = r.u64("optimizer step")?;
    let mut moments = Vec::new();
    for prefix in ["m.", "v."] {
        let n = r.u32("optimizer moments")? as usize;
        if n != params.tensors().len() {
            return Err(CheckpointError::Malformed(format!("{n} optimizer tensors for {} parameters", params.tensors().len())));
        }
        let mut set = Vec::with_capacity(n);
        for (name, p) in params.named() {
            let (got, t) = r.tensor()?;
            if got != format!("{prefix}{name}") || t.shape() != p.shape() {
                return Err(CheckpointError::Malformed(format!("unexpected optimizer tensor {got}")));
            }
            set.push(t);
        }
        moments.push(set);
    }
    let epoch = r.u64("epoch")?;
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    if src_vocab.len() > NUM_SPECIAL && src_vocab.len() != dims.src_vocab {
        return Err(CheckpointError::Malformed("source vocab size disagrees with header".into()));
    }
    if tgt_vocab.len() > NUM_SPECIAL && tgt_vocab.len() != dims.tgt_vocab {
        return Err(CheckpointError::Malformed("target vocab size disagrees with header".into()));
    }
    let v = moments.pop().expect("two moment sets");
    let m = moments.pop().expect("two moment sets");
    Ok(Checkpoint {
        params,
        optimizer: OptimizerState { m, v, step },
        config,
        src_vocab,
        tgt_vocab,
        epoch,
    })
}

/// Write `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    encode(ck)
}

pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
    decode(data)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ck)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&data)
}
