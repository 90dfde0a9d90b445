//! GDTW tensor container shared by weight files and tracker state files.
//!
//! Layout: `b"GDTW"`, u32 LE version, u32 LE tensor count, then per tensor a u16 LE
//! name length, UTF-8 name, u8 ndim, ndim x u32 LE dims and the dims-product of f64 LE
//! values.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"GDTW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"GDTW\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported container version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated container at byte offset {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("tensor name at byte offset {offset} is not valid UTF-8")]
    BadName { offset: usize },
    #[error("{trailing} trailing bytes after the last tensor")]
    Trailing { trailing: usize },
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<u32>,
        found: Vec<u32>,
    },
    #[error("section `{section}` is invalid: {reason}")]
    Section { section: String, reason: String },
    #[error("tensor `{0}` is too large for the container")]
    TooLarge(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, values: Vec<f64>) -> Self {
        let t = Self {
            name: name.into(),
            dims,
            values,
        };
        debug_assert_eq!(t.numel(), t.values.len(), "tensor {}", t.name);
        t
    }

    pub fn vector(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len() as u32;
        Self::new(name, vec![n], values)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        if name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize || t.numel() != t.values.len() {
            return Err(ContainerError::TooLarge(t.name.clone()));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n - rest,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| ContainerError::BadMagic {
        found: bytes.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| ContainerError::BadName { offset: name_at })?
            .to_owned();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dims")?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ContainerError::TooLarge(name.clone()))?;
        let raw = r.take(numel, "tensor values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(ContainerError::Trailing {
            trailing: bytes.len() - r.pos,
        });
    }
    Ok(tensors)
}

pub fn write_file(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<(), ContainerError> {
    let path = path.as_ref();
    fs::write(path, encode(tensors)?).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Tensor>, ContainerError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Name-indexed view over decoded tensors.
pub struct TensorMap {
    tensors: Vec<Tensor>,
}

impl TensorMap {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ContainerError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ContainerError::Missing(name.to_owned()))
    }

    pub fn get_shaped(&self, name: &str, expected: &[u32]) -> Result<&[f64], ContainerError> {
        let t = self.get(name)?;
        if t.dims != expected {
            return Err(ContainerError::Shape {
                name: name.to_owned(),
                expected: expected.to_vec(),
                found: t.dims.clone(),
            });
        }
        Ok(&t.values)
    }
}
