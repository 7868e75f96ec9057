//! Binary container for named `f64` arrays (network checkpoints and model
//! parameter dumps).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"FFCA"
//! version    u32            (currently 1)
//! kind       u32 len + UTF-8 (free-form tag, e.g. "neural" or "fastmnmf")
//! count      u32
//! entries    count × { name: u32 len + UTF-8, ndim: u32, dims: ndim × u64 }
//! payload    for each entry in order, product(dims) × f64 (LE)
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FFCA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// Named arrays plus a kind tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub entries: ParamStore,
}

impl Container {
    pub fn new(kind: impl Into<String>, entries: ParamStore) -> Self {
        Self { kind: kind.into(), entries }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ContainerError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_str(&mut w, &self.kind)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, t) in self.entries.iter() {
            write_str(&mut w, name)?;
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
        }
        for (_, t) in self.entries.iter() {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ContainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let kind = read_str(&mut r)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut header = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim > 16 {
                return Err(ContainerError::Malformed(format!("{name}: {ndim} dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u64::<LittleEndian>()? as usize);
            }
            header.push((name, dims));
        }
        let mut entries = ParamStore::new();
        for (name, dims) in header {
            let n: usize = dims.iter().product();
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|e| ContainerError::Malformed(format!("payload of {name}: {e}")))?;
            let t = Tensor::new(&dims, data).map_err(|e| ContainerError::Malformed(e.to_string()))?;
            entries.insert(name, t);
        }
        Ok(Self { kind, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, ContainerError> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 1 << 20 {
        return Err(ContainerError::Malformed(format!("string of length {n}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| ContainerError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_and_bits() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap());
        p.insert("scalar", Tensor::scalar(0.1));
        p.insert("empty", Tensor::zeros(&[0, 4]));
        let c = Container::new("neural", p);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&buf[..]).unwrap();
        assert_eq!(back.kind, "neural");
        assert_eq!(back.entries.names(), c.entries.names());
        for ((_, a), (_, b)) in back.entries.iter().zip(c.entries.iter()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn payload_is_little_endian_after_header() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut buf = Vec::new();
        Container::new("k", p).write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        assert_eq!(&buf[buf.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Container::read_from(&b"NOPE\x01\0\0\0"[..]), Err(ContainerError::BadMagic)));
        let mut p = ParamStore::new();
        p.insert("x", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        Container::new("k", p).write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Container::read_from(&buf[..]), Err(ContainerError::Malformed(_))));
    }
}
