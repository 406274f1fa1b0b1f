//! The `TNSR` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"TAFT"
//! version u32      (currently 1)
//! dtype   u8       (0 = f32, 1 = u8)
//! rank    u8
//! dims    rank × u32
//! payload product(dims) elements, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TAFT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TnsrError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("header truncated")]
    TruncatedHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U8(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tnsr {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Tnsr {
    pub fn u8(dims: impl Into<Vec<usize>>, data: Vec<u8>) -> Self {
        Self {
            dims: dims.into(),
            payload: Payload::U8(data),
        }
    }

    pub fn f32(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        Self {
            dims: dims.into(),
            payload: Payload::F32(data),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(
            self.dims.iter().product::<usize>(),
            self.payload.len(),
            "dims do not match payload"
        );
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.payload.dtype());
        out.push(u8::try_from(self.dims.len()).expect("rank fits in u8"));
        for &d in &self.dims {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TnsrError> {
        if bytes.len() < 10 {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(TnsrError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(TnsrError::TruncatedHeader);
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TnsrError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(TnsrError::UnsupportedVersion(version));
        }
        let dtype = bytes[8];
        let rank = bytes[9] as usize;
        let header = 10 + 4 * rank;
        if bytes.len() < header {
            return Err(TnsrError::TruncatedHeader);
        }
        let dims: Vec<usize> = bytes[10..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let body = &bytes[header..];
        let elem = match dtype {
            0 => 4,
            1 => 1,
            other => return Err(TnsrError::UnknownDtype(other)),
        };
        if body.len() != count * elem {
            return Err(TnsrError::SizeMismatch {
                expected: count * elem,
                actual: body.len(),
            });
        }
        let payload = if dtype == 0 {
            Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            Payload::U8(body.to_vec())
        };
        Ok(Self { dims, payload })
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, TnsrError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TnsrError> {
        Self::decode(&fs::read(path)?)
    }
}
