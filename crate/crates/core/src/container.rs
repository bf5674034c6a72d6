//! The `ACVAE1` binary container shared by checkpoints and dataset caches.
//!
//! Layout: the 6-byte magic `ACVAE1`, a little-endian `u64` header length,
//! the JSON header, then every buffer's little-endian bytes in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 6] = b"ACVAE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Buffer {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::F64(_) => DType::F64,
            Buffer::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F64(v) => v.len(),
            Buffer::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Buffer::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Buffer::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Buffer::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => Buffer::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    pub fn from_real<T: Real>(data: &[T]) -> Buffer {
        match T::DTYPE {
            DType::F32 => Buffer::F32(data.iter().map(|x| x.as_f64() as f32).collect()),
            _ => Buffer::F64(data.iter().map(|x| x.as_f64()).collect()),
        }
    }

    /// Float buffer as `T`; fails if the stored width differs from `T`'s.
    pub fn to_real<T: Real>(&self) -> Result<Vec<T>> {
        match (self, T::DTYPE) {
            (Buffer::F32(v), DType::F32) => Ok(v.iter().map(|&x| T::lit(x as f64)).collect()),
            (Buffer::F64(v), DType::F64) => Ok(v.iter().map(|&x| T::lit(x)).collect()),
            (b, want) => Err(Error::Format(format!(
                "buffer holds {:?}, expected {:?}",
                b.dtype(),
                want
            ))),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match self {
            Buffer::U32(v) => Ok(v),
            b => Err(Error::Format(format!("buffer holds {:?}, expected U32", b.dtype()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Buffer,
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<EntryHeader>,
}

/// Named buffers plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Buffer) {
        self.entries.push(Entry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.push(name, t.shape().to_vec(), Buffer::from_real(t.data()));
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing buffer `{name}`")))
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.get(name)?;
        Tensor::new(e.shape.clone(), e.data.to_real()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: "ACVAE1".into(),
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .entries
                .iter()
                .map(|e| EntryHeader {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: e.data.dtype(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(
            14 + json.len()
                + self
                    .entries
                    .iter()
                    .map(|e| e.data.len() * e.data.dtype().width())
                    .sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            e.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 {
            return Err(Error::Format("file too short".into()));
        }
        if &bytes[..6] != MAGIC {
            return Err(Error::Format("bad magic, not an ACVAE1 container".into()));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format != "ACVAE1" || header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut offset = hlen;
        let mut entries = Vec::with_capacity(header.tensors.len());
        for h in header.tensors {
            let count: usize = h.shape.iter().product();
            let nbytes = count * h.dtype.width();
            if body.len() < offset + nbytes {
                return Err(Error::Format(format!("truncated buffer `{}`", h.name)));
            }
            let data = Buffer::read_le(h.dtype, &body[offset..offset + nbytes]);
            offset += nbytes;
            entries.push(Entry {
                name: h.name,
                shape: h.shape,
                data,
            });
        }
        if offset != body.len() {
            return Err(Error::Format("trailing bytes after last buffer".into()));
        }
        Ok(Container {
            meta: header.meta,
            entries,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Container::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Container::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"seed": 7, "step": 3}));
        c.push("a", vec![2, 2], Buffer::F64(vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]));
        c.push("b", vec![3], Buffer::F32(vec![0.5, 1.5, -0.0]));
        c.push("c", vec![0], Buffer::U32(vec![]));
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_and_foreign_files_fail_cleanly() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 13, 20, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[5] = b'2';
        let err = Container::from_bytes(&wrong).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn dtype_mismatch_is_refused() {
        let c = sample();
        assert!(c.tensor::<f32>("a").is_err());
        assert!(c.tensor::<f64>("a").is_ok());
    }

    proptest! {
        #[test]
        fn float_buffers_round_trip_bit_exact(v in proptest::collection::vec(any::<f64>(), 0..64),
                                              w in proptest::collection::vec(any::<f32>(), 0..64)) {
            let mut c = Container::new(serde_json::Value::Null);
            c.push("v", vec![v.len()], Buffer::F64(v.clone()));
            c.push("w", vec![w.len()], Buffer::F32(w.clone()));
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            match (&back.entries[0].data, &back.entries[1].data) {
                (Buffer::F64(a), Buffer::F32(b)) => {
                    prop_assert!(a.iter().zip(&v).all(|(x, y)| x.to_bits() == y.to_bits()));
                    prop_assert!(b.iter().zip(&w).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
                _ => prop_assert!(false),
            }
        }
    }
}
