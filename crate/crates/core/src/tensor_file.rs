//! `PSAT` tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "PSAT"
//! 4       4           version (u32 LE) = 1
//! 8       4           ndims   (u32 LE)
//! 12      8 * ndims   dims    (u64 LE each)
//! ...     4 * prod    payload (f32 LE, row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"PSAT";
pub const VERSION: u32 = 1;

/// Header plus raw single-precision payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&dims)?;
        if expected != data.len() as u64 {
            return Err(Error::mismatch("TensorFile::new", expected, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().iter().map(|&x| x as f32).collect(),
        }
    }

    /// Stacks equally shaped matrices into a `[heads, rows, cols]` tensor.
    pub fn from_heads(heads: &[Matrix]) -> Result<Self> {
        let (rows, cols) = heads.first().map_or((0, 0), Matrix::shape);
        if heads.iter().any(|h| h.shape() != (rows, cols)) {
            return Err(Error::invalid("all heads must share one shape"));
        }
        let data = heads
            .iter()
            .flat_map(|h| h.as_slice().iter().map(|&x| x as f32))
            .collect();
        Ok(Self {
            dims: vec![heads.len() as u64, rows as u64, cols as u64],
            data,
        })
    }

    /// Splits into `N × d` head slices: a 2D file is one head, a 3D file is
    /// `[heads, N, d]`.
    pub fn to_heads(&self) -> Result<Vec<Matrix>> {
        let (heads, rows, cols) = match self.dims[..] {
            [r, c] => (1, r as usize, c as usize),
            [h, r, c] => (h as usize, r as usize, c as usize),
            _ => {
                return Err(Error::invalid(format!(
                    "expected a 2D [N, d] or 3D [heads, N, d] tensor, got dims {:?}",
                    self.dims
                )))
            }
        };
        self.data
            .chunks(rows * cols)
            .take(heads)
            .map(|c| Matrix::new(rows, cols, c.iter().map(|&x| f64::from(x)).collect()))
            .collect()
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [_, _] => Ok(self.to_heads()?.remove(0)),
            _ => Err(Error::invalid(format!(
                "expected a 2D tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn byte_len(&self) -> usize {
        12 + 8 * self.dims.len() + 4 * self.data.len()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version });
        }
        let ndims = read_u32(&mut r, "ndims")?;
        if ndims > 8 {
            return Err(Error::Malformed(format!(
                "ndims={ndims} exceeds the supported maximum of 8"
            )));
        }
        let mut dims = Vec::with_capacity(ndims as usize);
        for i in 0..ndims {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, &format!("dim {i}"))?;
            dims.push(u64::from_le_bytes(b));
        }
        let count = element_count(&dims).map_err(|_| Error::Malformed(format!("dims {dims:?} overflow")))?;
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed(format!("dims {dims:?} overflow")))?;
        let mut payload = Vec::new();
        r.by_ref().take(bytes).read_to_end(&mut payload)?;
        if (payload.len() as u64) < bytes {
            return Err(Error::Truncated(format!(
                "payload has {} of {bytes} bytes",
                payload.len()
            )));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Malformed("trailing bytes after payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

fn element_count(dims: &[u64]) -> Result<u64> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("dims {dims:?} overflow")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("header ends before {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a 2D tensor file as a matrix.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    TensorFile::read(path)?.to_matrix()
}

/// Writes a matrix as a 2D tensor file (values rounded to `f32`).
pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    TensorFile::from_matrix(m).write(path)
}
