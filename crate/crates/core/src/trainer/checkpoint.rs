//! Binary checkpoints.
//!
//! Layout: the magic bytes, a little-endian `u64` length followed by a JSON
//! metadata block, then a `u32` blob count and the blobs. Each blob is a
//! `u32` name length, the UTF-8 name, a `u32` rank, one `u64` per dimension
//! and the values as little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, RunSpec};
use crate::data::TokenizerConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Module;
use crate::rng::seeded;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"STXN1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub run: RunSpec,
    /// Optimizer steps taken.
    pub step: u64,
    /// Resolved class weights.
    pub alpha: [f64; 3],
    /// Vocabulary file the token ids refer to, relative to the checkpoint.
    pub tokenizer: String,
    /// How texts were turned into token ids.
    pub tokenization: TokenizerConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: AdamW,
}

struct Blob<'a> {
    name: String,
    shape: &'a [usize],
    values: &'a [f64],
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_blob(w: &mut impl Write, b: &Blob) -> std::io::Result<()> {
    w.write_all(&(b.name.len() as u32).to_le_bytes())?;
    w.write_all(b.name.as_bytes())?;
    w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
    for &d in b.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in b.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck_: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let ctx = || format!("writing checkpoint {}", path.display());
    let meta = serde_json::to_vec_pretty(&ck_.meta).map_err(|e| ck(e.to_string()))?;
    let params = ck_.model.parameters();
    let mut blobs = Vec::with_capacity(params.len() * 3);
    for p in &params {
        blobs.push(Blob { name: p.name().to_string(), shape: p.shape(), values: p.values() });
    }
    for (p, m) in params.iter().zip(&ck_.optimizer.m) {
        blobs.push(Blob { name: format!("adam.m/{}", p.name()), shape: p.shape(), values: m });
    }
    for (p, v) in params.iter().zip(&ck_.optimizer.v) {
        blobs.push(Blob { name: format!("adam.v/{}", p.name()), shape: p.shape(), values: v });
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in &blobs {
        write_blob(&mut buf, b).map_err(|e| Error::io(ctx(), e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| ck("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

type Blobs = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn read_blobs(c: &mut Cursor) -> Result<Blobs> {
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| ck("blob name is not UTF-8"))?.to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ck("blob too large"))?;
        let bytes = c.take(n.checked_mul(8).ok_or_else(|| ck("blob too large"))?)?;
        let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if out.insert(name.clone(), (shape, values)).is_some() {
            return Err(ck(format!("duplicate blob {name}")));
        }
    }
    if c.pos != c.buf.len() {
        return Err(ck("trailing bytes after the last blob"));
    }
    Ok(out)
}

fn take_blob(blobs: &mut Blobs, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let (s, v) = blobs.remove(name).ok_or_else(|| ck(format!("missing blob {name}")))?;
    if s != shape {
        return Err(ck(format!("blob {name} has shape {s:?}, model expects {shape:?}")));
    }
    Ok(v)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&buf)
}

fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(ck("not a checkpoint (bad magic)"));
    }
    let meta_len = c.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| ck(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(ck(format!("unsupported format version {}", meta.format_version)));
    }
    let mut blobs = read_blobs(&mut c)?;
    let mut model = Model::new(meta.run.model.clone(), &mut seeded(0))?;
    let mut optimizer = AdamW::new(meta.run.train.adamw(), &model.parameters());
    for (i, p) in model.parameters_mut().into_iter().enumerate() {
        let shape = p.shape().to_vec();
        let name = p.name().to_string();
        p.set_values(take_blob(&mut blobs, &name, &shape)?)?;
        optimizer.m[i] = take_blob(&mut blobs, &format!("adam.m/{name}"), &shape)?;
        optimizer.v[i] = take_blob(&mut blobs, &format!("adam.v/{name}"), &shape)?;
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(ck(format!("unexpected blob {extra}")));
    }
    optimizer.step = meta.step;
    Ok(Checkpoint { meta, model, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, TokenBatch};
    use crate::model::{ModelConfig, PhraseConfig};
    use crate::tokenizer::{TokenizedPost, Vocabulary};

    fn checkpoint() -> Checkpoint {
        let run = RunSpec {
            model: ModelConfig {
                encoder: EncoderConfig { vocab_size: 260, max_len: 16, d_model: 8, n_heads: 2, n_layers: 1, ..Default::default() },
                phrase: PhraseConfig { hidden: 4 },
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Model::new(run.model.clone(), &mut seeded(3)).unwrap();
        let mut optimizer = AdamW::new(run.train.adamw(), &model.parameters());
        optimizer.step = 7;
        optimizer.m[0][0] = 0.25;
        optimizer.v[1][0] = 1e-9;
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            run,
            step: 7,
            alpha: [1.5, 0.1, 1.4],
            tokenizer: "vocab.txt".into(),
            tokenization: TokenizerConfig::default(),
            best_epoch: Some(2),
        };
        Checkpoint { meta, model, optimizer }
    }

    fn encode(c: &Checkpoint) -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, c).unwrap();
        std::fs::read(p).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let a = checkpoint();
        let b = decode(&encode(&a)).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.optimizer, b.optimizer);
        assert_eq!(a.model.snapshot(), b.model.snapshot());
        let v = Vocabulary::bytes_only();
        let posts: Vec<TokenizedPost> = ["abc", "my dad"].iter().map(|t| v.encode(t, 16).unwrap()).collect();
        let batch = TokenBatch::trimmed(&posts.iter().collect::<Vec<_>>()).unwrap();
        let pa = a.model.predict(&batch).unwrap();
        let pb = b.model.predict(&batch).unwrap();
        for (x, y) in pa.iter().flatten().zip(pb.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn starts_with_magic() {
        assert_eq!(&encode(&checkpoint())[..5], b"STXN1");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(&checkpoint());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = checkpoint();
        let mut b = checkpoint();
        b.meta.run.model.phrase.hidden = 5;
        let mut bytes = encode(&a);
        let meta_a = serde_json::to_vec_pretty(&a.meta).unwrap();
        let meta_b = serde_json::to_vec_pretty(&b.meta).unwrap();
        assert_eq!(meta_a.len(), meta_b.len());
        bytes[13..13 + meta_b.len()].copy_from_slice(&meta_b);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }
}
