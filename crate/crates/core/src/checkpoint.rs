//! HIDE1: a flat little-endian container of named tensors.
//!
//! Layout: the magic `HIDE1`, then entries until end of file, each
//! `u32 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64) | u8 rank |
//! rank x u32 dims | data`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"HIDE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Dtype, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), (Dtype::F64, tensor));
    }

    /// Stores the tensor rounded to f32.
    pub fn insert_f32(&mut self, name: impl Into<String>, tensor: Tensor) {
        let rounded = tensor.map(|v| v as f32 as f64);
        self.entries.insert(name.into(), (Dtype::F32, rounded));
    }

    /// Stores raw bytes, one f32 value per byte.
    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        let t = Tensor::vector(bytes.iter().map(|&b| f64::from(b)).collect());
        self.insert_f32(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Input(format!("checkpoint has no entry {name:?}")))
    }

    pub fn bytes(&self, name: &str) -> Result<Vec<u8>> {
        self.require(name)?
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::Input(format!("entry {name:?} does not hold bytes")))
                }
            })
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, (dtype, t)) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(*dtype as u8);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            match dtype {
                Dtype::F32 => t.data().iter().for_each(|&v| out.extend((v as f32).to_le_bytes())),
                Dtype::F64 => t.data().iter().for_each(|&v| out.extend(v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Parse { offset: 0, message: "missing HIDE1 magic".into() });
        }
        let mut ck = Self::new();
        while r.pos < bytes.len() {
            let start = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse { offset: start + 4, message: "name is not UTF-8".into() })?
                .to_string();
            let dtype = match r.take(1, "dtype")?[0] {
                0 => Dtype::F32,
                1 => Dtype::F64,
                other => {
                    return Err(Error::Parse { offset: r.pos - 1, message: format!("unknown dtype {other}") })
                }
            };
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let width = if dtype == Dtype::F32 { 4 } else { 8 };
            let raw = r.take(n * width, "tensor data")?;
            let data = match dtype {
                Dtype::F32 => raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            let t = Tensor::new(shape, data)?;
            if ck.entries.insert(name.clone(), (dtype, t)).is_some() {
                return Err(Error::Parse { offset: start, message: format!("duplicate entry {name:?}") });
            }
        }
        Ok(ck)
    }

    /// Writes via a temporary file and rename, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_dtypes() {
        let mut ck = Checkpoint::new();
        ck.insert("a/b", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 1e-300, f64::MAX, 0.1]).unwrap());
        ck.insert_f32("half", Tensor::vector(vec![0.1, 2.0]));
        ck.insert_bytes("echo", b"{\"k\": 1}");
        ck.insert("scalar", Tensor::new(vec![], vec![7.0]).unwrap());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("half").unwrap().data()[0], 0.1f32 as f64);
        assert_eq!(back.bytes("echo").unwrap(), b"{\"k\": 1}");
    }

    #[test]
    fn layout_is_as_documented() {
        let mut ck = Checkpoint::new();
        ck.insert_f32("x", Tensor::vector(vec![1.0]));
        let b = ck.to_bytes();
        let mut expect = b"HIDE1".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.push(b'x');
        expect.extend([0u8, 1u8]);
        expect.extend(1u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn malformed_input_reports_offsets() {
        assert!(matches!(Checkpoint::from_bytes(b""), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE1"), Err(Error::Parse { offset: 0, .. })));
        let mut ck = Checkpoint::new();
        ck.insert("t", Tensor::vector(vec![1.0, 2.0]));
        let b = ck.to_bytes();
        match Checkpoint::from_bytes(&b[..b.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5 + 4 + 1 + 2 + 4),
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::from_bytes(b"HIDE1").unwrap().is_empty());
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hide");
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::identity(3));
        ck.write(&path).unwrap();
        assert_eq!(Checkpoint::read(&path).unwrap(), ck);
        assert!(!path.with_extension("partial").exists());
    }
}
