//! Binary array files.
//!
//! ```text
//! ARRAY version=1 rank=2 dims=10,64 dtype=f32\n
//! <little-endian payload of 640 f32 values>
//! ```
//!
//! `dtype=f64` is also accepted; checkpoints use it so that resumed runs see
//! exactly the same parameters.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &str = "ARRAY";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded array. Values are widened to `f64` in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, dtype, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        let mut out = format!(
            "{MAGIC} version={VERSION} rank={} dims={} dtype={}\n",
            self.dims.len(),
            dims.join(","),
            self.dtype.name()
        )
        .into_bytes();
        out.reserve(self.data.len() * self.dtype.width());
        for &v in &self.data {
            match self.dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Decodes one array from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse("header", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse("header", "not UTF-8"))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some(MAGIC) {
            return Err(Error::parse("header", format!("expected '{MAGIC}'")));
        }
        let (mut version, mut rank, mut dims, mut dtype) = (None, None, None, None);
        for tok in toks {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::parse("header", format!("malformed token '{tok}'")))?;
            match k {
                "version" => version = Some(v.parse::<u32>().map_err(|_| Error::parse("version", v))?),
                "rank" => rank = Some(v.parse::<usize>().map_err(|_| Error::parse("rank", v))?),
                "dims" => {
                    dims = Some(
                        v.split(',')
                            .map(|d| d.parse::<usize>().map_err(|_| Error::parse("dims", format!("bad dimension '{d}'"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "dtype" => {
                    dtype = Some(match v {
                        "f32" => Dtype::F32,
                        "f64" => Dtype::F64,
                        _ => return Err(Error::parse("dtype", format!("unsupported '{v}'"))),
                    })
                }
                _ => return Err(Error::parse(k, "unknown header field")),
            }
        }
        let version = version.ok_or_else(|| Error::parse("version", "missing"))?;
        if version != VERSION {
            return Err(Error::parse("version", format!("unsupported version {version}")));
        }
        let rank = rank.ok_or_else(|| Error::parse("rank", "missing"))?;
        let dims = dims.ok_or_else(|| Error::parse("dims", "missing"))?;
        let dtype = dtype.ok_or_else(|| Error::parse("dtype", "missing"))?;
        if dims.len() != rank {
            return Err(Error::parse("rank", format!("rank={rank} but {} dims listed", dims.len())));
        }
        let n: usize = dims.iter().product();
        let start = nl + 1;
        let end = start + n * dtype.width();
        if bytes.len() < end {
            return Err(Error::parse(
                "payload",
                format!("expected {} bytes, found {}", n * dtype.width(), bytes.len() - start),
            ));
        }
        let payload = &bytes[start..end];
        let data: Vec<f64> = match dtype {
            Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse("payload", format!("value {i} is not finite")));
        }
        Ok((Self { dims, dtype, data }, end))
    }

    /// Decodes a buffer holding exactly one array.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (a, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::parse("payload", format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(a)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
