//! Little-endian split container.
//!
//! ```text
//! header : "UMSC1" | version u16 | count u32
//! record : id u32 | tag u8 | words u16 | word u16 * words
//!          per stream of the tag: modality u8 | rate u16 | dims u16 | frames u32 | f32 * frames*dims
//! ```

use std::io::{Read, Write};

use super::sample::{CorpusTag, Modality, ModalityStream, Sample};
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"UMSC1";
pub const VERSION: u16 = 1;

pub fn encode_split(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(samples.len()).map_err(|_| Error::Argument("too many samples".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        out.push(s.tag.code());
        out.extend_from_slice(&(s.text.len() as u16).to_le_bytes());
        for w in &s.text {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let expected = s.tag.modalities();
        if s.streams.len() != expected.len() || s.streams.iter().zip(expected).any(|(a, b)| a.modality != *b) {
            return Err(Error::format("sample", format!("sample {} streams do not match its corpus tag", s.id)));
        }
        for st in &s.streams {
            out.push(st.modality.code());
            out.extend_from_slice(&st.frame_rate.to_le_bytes());
            out.extend_from_slice(&(st.dims() as u16).to_le_bytes());
            out.extend_from_slice(&(st.num_frames() as u32).to_le_bytes());
            for v in st.frames.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("corpus container", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_split(buf: &[u8]) -> Result<Vec<Sample>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(5)? != MAGIC {
        return Err(Error::format("corpus container", "bad magic"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::format("corpus container", format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = c.u32()?;
        let tag_code = c.u8()?;
        let tag = CorpusTag::from_code(tag_code)
            .ok_or_else(|| Error::format("corpus container", format!("unknown corpus tag {tag_code}")))?;
        let n = c.u16()? as usize;
        let mut text = Vec::with_capacity(n);
        for _ in 0..n {
            text.push(c.u16()?);
        }
        let mut streams = Vec::new();
        for &expected in tag.modalities() {
            let code = c.u8()?;
            let modality = Modality::from_code(code)
                .ok_or_else(|| Error::format("corpus container", format!("unknown modality {code}")))?;
            if modality != expected {
                return Err(Error::format(
                    "corpus container",
                    format!("sample {id}: expected {} stream, found {}", expected.name(), modality.name()),
                ));
            }
            let frame_rate = c.u16()?;
            let dims = c.u16()? as usize;
            let frames = c.u32()? as usize;
            let raw = c.take(frames * dims * 4)?;
            let data = raw.chunks_exact(4).map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4")))).collect();
            streams.push(ModalityStream { modality, frame_rate, frames: Tensor2::from_vec(frames, dims, data)? });
        }
        samples.push(Sample { id, tag, text, streams });
    }
    if c.pos != buf.len() {
        return Err(Error::format("corpus container", format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(samples)
}

pub fn write_split<W: Write>(w: &mut W, samples: &[Sample]) -> Result<Vec<u8>> {
    let bytes = encode_split(samples)?;
    w.write_all(&bytes).map_err(|e| Error::io("<writer>", e))?;
    Ok(bytes)
}

pub fn read_split<R: Read>(r: &mut R) -> Result<Vec<Sample>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<reader>", e))?;
    decode_split(&buf)
}
