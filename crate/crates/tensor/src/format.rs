//! Binary interchange: `PGT1` single tensors and `PGCK` named archives.
//!
//! All integers are u32 little-endian, values are f32 little-endian, row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"PGT1";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"PGCK";

const MAX_RANK: u32 = 16;

fn format_err<T>(kind: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        kind,
        detail: detail.into(),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Byte cursor that reports truncation as a format error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format_err(
                self.kind,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Append the `PGT1` encoding of `t` to `out`.
pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.reserve(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_tensor_from(r: &mut Reader<'_>) -> Result<Tensor> {
    let magic = r.take(4)?;
    if magic != TENSOR_MAGIC {
        return format_err("PGT1", format!("bad magic {magic:?}"));
    }
    let rank = r.u32()?;
    if rank > MAX_RANK {
        return format_err("PGT1", format!("rank {rank} exceeds {MAX_RANK}"));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format {
            kind: "PGT1",
            detail: format!("shape {shape:?} overflows"),
        })?;
    let raw = r.take(numel * 4)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&shape, data)
}

/// Decode one `PGT1` tensor; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader {
        bytes,
        pos: 0,
        kind: "PGT1",
    };
    let t = decode_tensor_from(&mut r)?;
    if r.pos != bytes.len() {
        return format_err("PGT1", format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(t)
}

pub fn write_tensor<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|source| Error::Io {
        path: "<stream>".into(),
        source,
    })?;
    decode_tensor(&buf)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes).map_err(|e| annotate(e, path))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { kind, detail } => Error::Format {
            kind,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    }
}

/// Ordered collection of named tensors, serialized as `PGCK`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: IndexMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Scalar stored as a rank-0 tensor.
    pub fn scalar(&self, name: &str) -> Result<f32> {
        let t = self.get(name)?;
        if t.numel() != 1 {
            return format_err("PGCK", format!("entry `{name}` is not a scalar"));
        }
        Ok(t.data()[0])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            kind: "PGCK",
        };
        let magic = r.take(4)?;
        if magic != ARCHIVE_MAGIC {
            return format_err("PGCK", format!("bad magic {magic:?}"));
        }
        let count = r.u32()?;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format {
                    kind: "PGCK",
                    detail: format!("entry name is not UTF-8: {e}"),
                })?
                .to_string();
            let t = decode_tensor_from(&mut r)?;
            if entries.insert(name.clone(), t).is_some() {
                return format_err("PGCK", format!("duplicate entry `{name}`"));
            }
        }
        if r.pos != bytes.len() {
            return format_err("PGCK", format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never leaves a torn archive
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.encode()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes).map_err(|e| annotate(e, path))
    }
}
