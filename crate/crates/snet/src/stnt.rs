//! STNT tensor files.
//!
//! Layout: magic `STNT`, version byte `1`, dtype byte, rank byte, one
//! little-endian `u64` per dimension, then the row-major little-endian payload.
//! Dtypes: 0 `f32`, 1 `f64`, 2 `u32`, 3 `u8` (the last one only appears inside
//! checkpoints, for text blobs).

use std::path::Path;

use snet_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STNT";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
    U32 = 2,
    U8 = 3,
}

impl Dtype {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::U32,
            3 => Dtype::U8,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
            Payload::U32(_) => Dtype::U32,
            Payload::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A shaped array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Decoding failure at a byte offset, before a path is attached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub msg: String,
}

impl DecodeError {
    pub fn at(self, path: &Path) -> Error {
        Error::Format { path: path.display().to_string(), offset: self.offset, msg: self.msg }
    }
}

/// Cursor over a byte slice that reports the offset of every failure.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn fail<T>(&self, offset: usize, msg: impl Into<String>) -> Result<T, DecodeError> {
        Err(DecodeError { offset, msg: msg.into() })
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return self.fail(self.bytes.len(), format!("truncated {what}: need {n} bytes at offset {}, {} left", self.pos, self.remaining()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn expect_end(&self) -> Result<(), DecodeError> {
        if self.remaining() > 0 {
            return self.fail(self.pos, format!("{} trailing bytes", self.remaining()));
        }
        Ok(())
    }
}

impl Array {
    pub fn new(shape: &[usize], payload: Payload) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.len() > u8::MAX as usize || n != payload.len() {
            return Err(Error::Data(format!("shape {shape:?} does not hold {} values", payload.len())));
        }
        Ok(Self { shape: shape.to_vec(), payload })
    }

    /// Bit-exact `f64` copy of a tensor.
    pub fn from_tensor(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), payload: Payload::F64(t.data().to_vec()) }
    }

    pub fn labels(shape: &[usize], labels: Vec<u32>) -> Result<Self> {
        Self::new(shape, Payload::U32(labels))
    }

    pub fn text(s: &str) -> Self {
        Self { shape: vec![s.len()], payload: Payload::U8(s.as_bytes().to_vec()) }
    }

    /// Numeric payloads widened to `f64`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
            Payload::U32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Ok(Tensor::new(&self.shape, data)?)
    }

    /// Integer payloads as class ids.
    pub fn to_labels(&self) -> Result<Vec<u32>> {
        match &self.payload {
            Payload::U32(v) => Ok(v.clone()),
            Payload::U8(v) => Ok(v.iter().map(|&x| x as u32).collect()),
            p => Err(Error::Data(format!("label arrays must be integer, got {:?}", p.dtype()))),
        }
    }

    pub fn to_text(&self) -> Result<String> {
        match &self.payload {
            Payload::U8(v) => String::from_utf8(v.clone()).map_err(|e| Error::Data(format!("text blob is not UTF-8: {e}"))),
            p => Err(Error::Data(format!("text blobs must be u8, got {:?}", p.dtype()))),
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.payload.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decode one array starting at the reader's position.
    pub fn decode_from(r: &mut Reader) -> Result<Self, DecodeError> {
        let start = r.pos();
        if r.take(4, "magic")? != MAGIC {
            return r.fail(start, "bad magic (expected `STNT`)");
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return r.fail(start + 4, format!("unsupported version {version}"));
        }
        let dt = r.u8("dtype")?;
        let Some(dtype) = Dtype::from_byte(dt) else { return r.fail(start + 5, format!("unknown dtype {dt}")) };
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut n: usize = 1;
        for i in 0..ndim {
            let at = r.pos();
            let d = r.u64(&format!("dim {i}"))?;
            let Some(d) = usize::try_from(d).ok().filter(|&d| n.checked_mul(d).and_then(|m| m.checked_mul(dtype.size())).is_some()) else {
                return r.fail(at, format!("dim {i} = {d} overflows the element count"));
            };
            n *= d;
            shape.push(d);
        }
        let bytes = r.take(n * dtype.size(), "payload")?;
        let payload = match dtype {
            Dtype::F32 => Payload::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::F64 => Payload::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::U32 => Payload::U32(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::U8 => Payload::U8(bytes.to_vec()),
        };
        Ok(Self { shape, payload })
    }

    /// Decode a whole buffer holding exactly one array.
    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let a = Self::decode_from(&mut r)?;
        r.expect_end()?;
        Ok(a)
    }
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    Array::decode(&bytes).map_err(|e| e.at(path))
}

pub fn write_array(path: &Path, a: &Array) -> Result<()> {
    std::fs::write(path, a.encode()).map_err(Error::io(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    read_array(path)?.to_tensor()
}

/// Writes `f64` so that reading back is bitwise identical.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_array(path, &Array::from_tensor(t))
}
