//! Little-endian checkpoint container.
//!
//! ```text
//! "UMCK1" | version u16 | vocab u16 | (len u16, utf-8)*vocab
//! params u32 | (name_len u16, name, rows u32, cols u32, f32*rows*cols)*params
//! json metadata | json_len u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::vocab_table;
use crate::diffcore::{ParamStore, Tensor2};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthcorpus::sha256_hex;

pub const MAGIC: &[u8; 5] = b"UMCK1";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Best,
    Last,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stage: String,
    pub step: usize,
    pub kind: CheckpointKind,
    /// Mean validation next-token accuracy over the stage's tasks.
    pub val_accuracy: Option<f64>,
}

pub fn encode_checkpoint(store: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let vocab = vocab_table();
    out.extend_from_slice(&(vocab.len() as u16).to_le_bytes());
    for t in &vocab {
        out.extend_from_slice(&(t.len() as u16).to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format("checkpoint", "parameter name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&json);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.end {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "non-utf8 name"))
    }
}

/// Decodes into a fresh store (all parameters marked trainable) plus metadata.
pub fn decode_checkpoint(buf: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    if buf.len() < MAGIC.len() + 4 {
        return Err(Error::format("checkpoint", "file too short"));
    }
    let json_len = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes")) as usize;
    let body_end = buf
        .len()
        .checked_sub(4 + json_len)
        .ok_or_else(|| Error::format("checkpoint", "metadata length exceeds file"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&buf[body_end..buf.len() - 4])
        .map_err(|e| Error::format("checkpoint", format!("bad metadata: {e}")))?;
    let mut r = Reader { buf, pos: 0, end: body_end };
    if r.take(5)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let n_vocab = r.u16()? as usize;
    let mut vocab = Vec::with_capacity(n_vocab);
    for _ in 0..n_vocab {
        vocab.push(r.string()?);
    }
    if vocab != vocab_table() {
        return Err(Error::format("checkpoint", "vocabulary table differs from this build"));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4")))).collect();
        if store.id(&name).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor2::from_vec(rows, cols, data)?, true);
    }
    if r.pos != body_end {
        return Err(Error::format("checkpoint", format!("{} unread bytes before metadata", body_end - r.pos)));
    }
    Ok((store, meta))
}

/// Writes the checkpoint and returns the SHA-256 of its bytes.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<String> {
    let bytes = encode_checkpoint(store, meta)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (store, meta) = decode_checkpoint(&bytes)?;
    Ok((store, meta, sha256_hex(&bytes)))
}

/// Rounds every parameter to f32, matching a save/load round trip.
pub fn quantize_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = f64::from(*v as f32);
        }
    }
}
