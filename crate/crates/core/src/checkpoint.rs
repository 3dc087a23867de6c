//! The `ACEP` tensor container used for checkpoints, datasets and mel files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ACEP"            4 bytes magic
//! format_version    u32
//! tensor_count      u32
//! repeated tensor_count times:
//!     name_len      u16
//!     name          name_len bytes of UTF-8
//!     rank          u8
//!     dims          rank × u32
//!     values        prod(dims) × f32 (IEEE-754, row-major)
//! crc32             u32 over every preceding byte
//! ```

use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"ACEP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}: not an ACEP container")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("container truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor name {0:?} is longer than 65535 bytes")]
    NameTooLong(String),
    #[error("tensor {0:?} has rank above 255")]
    RankTooLarge(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has dims {found:?}, expected {expected:?}")]
    DimensionMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor dims/data mismatch");
        Self { dims, data }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self::new(
            vec![m.rows(), m.cols()],
            m.data().iter().map(|&x| x as f32).collect(),
        )
    }

    /// Interprets a rank-2 tensor (or a rank-1 tensor as one row) as a matrix.
    pub fn to_matrix(&self) -> Option<Matrix> {
        let (r, c) = match self.dims.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            [] => (1, 1),
            _ => return None,
        };
        Some(Matrix::new(r, c, self.data.iter().map(|&x| x as f64).collect()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    tensors: IndexMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::DuplicateName(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<(), CheckpointError> {
        self.insert(name, Tensor::from_matrix(m))
    }

    /// Stores UTF-8 text as a rank-1 tensor of byte values.
    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) -> Result<(), CheckpointError> {
        let data: Vec<f32> = text.bytes().map(f32::from).collect();
        self.insert(name, Tensor::new(vec![data.len()], data))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix, CheckpointError> {
        let t = self.get(name)?;
        t.to_matrix().ok_or_else(|| CheckpointError::DimensionMismatch {
            name: name.to_string(),
            expected: vec![0, 0],
            found: t.dims.clone(),
        })
    }

    /// Like [`Container::matrix`] but also checks the shape.
    pub fn matrix_with_shape(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix, CheckpointError> {
        let m = self.matrix(name)?;
        if m.shape() != (rows, cols) {
            return Err(CheckpointError::DimensionMismatch {
                name: name.to_string(),
                expected: vec![rows, cols],
                found: self.get(name)?.dims.clone(),
            });
        }
        Ok(m)
    }

    pub fn text(&self, name: &str) -> Result<String, CheckpointError> {
        let t = self.get(name)?;
        let bytes: Vec<u8> = t.data.iter().map(|&b| b as u8).collect();
        String::from_utf8(bytes).map_err(|_| CheckpointError::InvalidName)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| CheckpointError::NameTooLong(name.clone()))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| CheckpointError::RankTooLarge(name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a container. Nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated {
                offset: bytes.len(),
                needed: 16,
                available: bytes.len(),
            });
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);

        let body = &bytes[..body_end];
        let mut r = Reader { bytes: body, pos: 8 };
        let parsed = (|| {
            let count = r.u32()? as usize;
            let mut c = Container::new();
            for _ in 0..count {
                let len = r.u16()? as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|_| CheckpointError::InvalidName)?
                    .to_string();
                let rank = r.u8()? as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(r.u32()? as usize);
                }
                let n: usize = dims.iter().product();
                let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated {
                    offset: r.pos,
                    needed: usize::MAX,
                    available: r.bytes.len() - r.pos,
                })?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                c.insert(name, Tensor { dims, data })?;
            }
            Ok(c)
        })();
        // A CRC failure is the more useful diagnosis when the body is damaged.
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let c = parsed?;
        if r.pos != body.len() {
            return Err(CheckpointError::TrailingBytes(body.len() - r.pos));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| crate::Error::io(path.as_ref(), e))
    }

    pub fn read(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| crate::Error::io(path.as_ref(), e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8], CheckpointError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert_matrix("w", &Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.25))
            .unwrap();
        c.insert("scalar", Tensor::new(vec![], vec![7.5])).unwrap();
        c.insert_text("meta.config", "dit.blocks = 8\n").unwrap();
        c
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut c = Container::new();
        c.insert("a", Tensor::new(vec![2], vec![1.0, -2.0])).unwrap();
        let b = c.to_bytes().unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"ACEP");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'a');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        let crc = crc32fast::hash(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.text("meta.config").unwrap(), "dit.blocks = 8\n");
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'X';
        assert!(matches!(Container::from_bytes(&b), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b[4] = 9;
        assert_eq!(
            Container::from_bytes(&b),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        );
    }

    #[test]
    fn truncation_and_bitflips_are_distinct_errors() {
        let b = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&b[..b.len() - 9]).unwrap_err();
        assert!(matches!(err, CheckpointError::Crc { .. } | CheckpointError::Truncated { .. }));
        assert!(matches!(
            Container::from_bytes(&b[..10]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut flipped = b.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(Container::from_bytes(&flipped), Err(CheckpointError::Crc { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert_eq!(
            c.insert("w", Tensor::new(vec![1], vec![0.0])),
            Err(CheckpointError::DuplicateName("w".into()))
        );
    }

    #[test]
    fn shape_check_reports_dims() {
        let c = sample();
        assert!(matches!(
            c.matrix_with_shape("w", 3, 2),
            Err(CheckpointError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_roundtrip(
            vals in proptest::collection::vec(any::<f32>().prop_filter("nan", |v| !v.is_nan()), 0..40),
            name in "[a-z.]{1,12}",
        ) {
            let mut c = Container::new();
            c.insert(name.clone(), Tensor::new(vec![vals.len()], vals)).unwrap();
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
