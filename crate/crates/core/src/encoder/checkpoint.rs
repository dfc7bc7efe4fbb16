//! Binary checkpoint format, version 1 (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "GENNICKP"
//! version    u32
//! dtype      u8       4 = f32, 8 = f64
//! config     u64 length + UTF-8 JSON of EncoderConfig
//! metadata   u64 length + UTF-8 (free-form JSON from the caller)
//! count      u32 number of tensors
//! per tensor u32 name length + name, u32 rank, rank x u64 dims, raw values
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numcore::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"GENNICKP";
const VERSION: u32 = 1;

/// Parameters plus the caller's metadata string.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: EncoderParams<S>,
    pub metadata: String,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn write_checkpoint<S: Scalar>(params: &EncoderParams<S>, metadata: &str, mut w: impl Write) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::DTYPE.tag());
    let config = serde_json::to_vec(&params.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_bytes(&mut out, &config);
    put_bytes(&mut out, metadata.as_bytes());
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    w.write_all(&out).map_err(|e| Error::io("<checkpoint>", e))
}

pub fn save_checkpoint<S: Scalar>(params: &EncoderParams<S>, metadata: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(params, metadata, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

pub fn read_checkpoint<S: Scalar>(mut r: impl Read) -> Result<Checkpoint<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = DType::from_tag(c.take(1)?[0]).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
    if dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {dtype:?}, requested {:?}",
            S::DTYPE
        )));
    }
    let config: EncoderConfig =
        serde_json::from_slice(c.blob()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let metadata = String::from_utf8(c.blob()?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = c.u32()? as usize;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut params = EncoderParams::<S>::init(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    for ((want_name, want_shape), slot) in expected.into_iter().zip(params.tensors_mut()) {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, expected {want_shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * width)?;
        let data = raw.chunks(width).map(S::read_le).collect();
        *slot = Tensor::new(shape, data)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, metadata })
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
