//! The "AMLG" tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header:  41 4D 4C 47 | u16 version = 1 | u8 flags (0x00, or 0x4C = LOCAL-ONLY)
//! record:  u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | ndim x u64 dims | payload
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = i64, 4 = u8 (text metadata).
//! Records follow each other until end of file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: [u8; 4] = *b"AMLG";
pub const VERSION: u16 = 1;
pub const LOCAL_ONLY_FLAG: u8 = 0x4C;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    /// Set on files that must never leave the user's machine.
    pub local_only: bool,
    records: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn local_only() -> Self {
        Archive {
            local_only: true,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::arg(format!("record name too long ({} bytes)", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::arg(format!("duplicate record `{name}`")));
        }
        self.records.push((name, tensor));
        Ok(())
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) -> Result<()> {
        self.push(name, Tensor::from_bytes(text.as_bytes().to_vec())?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn text(&self, name: &str) -> Option<Result<String>> {
        self.get(name).map(|t| {
            let bytes = t.as_bytes()?;
            String::from_utf8(bytes.to_vec())
                .map(|s| s.trim_end().to_string())
                .map_err(|e| Error::load(name, format!("record is not UTF-8: {e}")))
        })
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn into_records(self) -> Vec<(String, Tensor)> {
        self.records
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(if self.local_only { LOCAL_ONLY_FLAG } else { 0 });
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.data() {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    /// Parses a container; `location` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], location: &str) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            location,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::load(location, "bad magic bytes (not an AMLG archive)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::load(location, format!("unsupported archive version {version}")));
        }
        let flags = r.u8()?;
        let local_only = match flags {
            0 => false,
            LOCAL_ONLY_FLAG => true,
            other => return Err(Error::load(location, format!("unknown header flags 0x{other:02X}"))),
        };
        let mut archive = Archive {
            local_only,
            records: Vec::new(),
        };
        while r.pos < bytes.len() {
            let start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err(start, "record name is not UTF-8"))?
                .to_string();
            let code = r.u8()?;
            let dtype = DType::from_code(code).ok_or_else(|| r.err(start, &format!("record `{name}`: unknown dtype {code}")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| r.err(start, "dimension overflows usize"))?;
                shape.push(d);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(start, "element count overflows"))?;
            let nbytes = numel
                .checked_mul(dtype.size_of())
                .ok_or_else(|| r.err(start, "payload size overflows"))?;
            let payload = r.take(nbytes).map_err(|_| r.err(start, &format!("record `{name}` payload truncated")))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::I64 => TensorData::I64(payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::U8 => TensorData::U8(payload.to_vec()),
            };
            let tensor = Tensor::new(shape, data).map_err(|e| r.err(start, &format!("record `{name}`: {e}")))?;
            if archive.get(&name).is_some() {
                return Err(r.err(start, &format!("duplicate record `{name}`")));
            }
            archive.records.push((name, tensor));
        }
        Ok(archive)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    location: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::load(format!("{} @ byte {offset}", self.location), msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.pos, "unexpected end of file")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let a = Archive::new();
        assert_eq!(a.to_bytes(), vec![0x41, 0x4D, 0x4C, 0x47, 1, 0, 0]);
        assert_eq!(Archive::local_only().to_bytes()[6], 0x4C);
    }

    #[test]
    fn record_layout() {
        let mut a = Archive::new();
        a.push("w", Tensor::from_f32(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let b = a.to_bytes();
        assert_eq!(&b[7..9], &[1, 0]); // name length
        assert_eq!(b[9], b'w');
        assert_eq!(b[10], 1); // f32
        assert_eq!(b[11], 1); // ndim
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
    }

    #[test]
    fn corrupt_inputs_are_load_errors() {
        assert!(matches!(Archive::from_bytes(b"NOPE\x01\x00\x00", "x"), Err(Error::Load { .. })));
        assert!(Archive::from_bytes(b"AMLG\x02\x00\x00", "x").unwrap_err().to_string().contains("version"));
        let mut a = Archive::new();
        a.push("t", Tensor::from_i64(vec![3], vec![1, 2, 3]).unwrap()).unwrap();
        let b = a.to_bytes();
        let err = Archive::from_bytes(&b[..b.len() - 1], "file.amlg").unwrap_err().to_string();
        assert!(err.contains("file.amlg") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = Archive::new();
        a.push_text("meta", "{}").unwrap();
        assert!(a.push_text("meta", "{}").is_err());
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map({
                    let s = shape.clone();
                    move |v| Tensor::from_f32(s.clone(), v).unwrap()
                }),
                prop::collection::vec(any::<f64>(), n).prop_map({
                    let s = shape.clone();
                    move |v| Tensor::from_f64(s.clone(), v).unwrap()
                }),
                prop::collection::vec(any::<i64>(), n).prop_map(move |v| Tensor::from_i64(shape.clone(), v).unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(ts in prop::collection::vec(tensor_strategy(), 0..5), local in any::<bool>()) {
            let mut a = if local { Archive::local_only() } else { Archive::new() };
            for (i, t) in ts.iter().enumerate() {
                a.push(format!("layer{i}/weight"), t.clone()).unwrap();
            }
            let bytes = a.to_bytes();
            let back = Archive::from_bytes(&bytes, "mem").unwrap();
            prop_assert_eq!(back.local_only, local);
            prop_assert_eq!(back.records().len(), ts.len());
            for ((_, x), y) in back.records().iter().zip(&ts) {
                prop_assert!(x.bit_eq(y));
            }
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
