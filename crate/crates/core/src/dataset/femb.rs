//! FEMB embedding matrices.
//!
//! Layout (all little-endian): `b"FEMB"`, `u32` version, `u64` rows, `u64`
//! cols, then `rows * cols` row-major values. Version 1 stores binary32 and
//! is the interchange format for embedding dumps. Version 2 stores binary64;
//! checkpoints use it so that restored parameters are bit-exact.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"FEMB";
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn encode(m: &Matrix, precision: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * precision.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&precision.version().to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match precision {
        Precision::F32 => {
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Decodes one FEMB blob from the front of `bytes`, returning the matrix and
/// the number of bytes consumed. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Matrix, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let precision = match version {
        1 => Precision::F32,
        2 => Precision::F64,
        v => return Err(Error::UnsupportedVersion(v)),
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(precision.width() as u64))
        .ok_or_else(|| Error::InvalidInput(format!("{}: header overflows", path.display())))?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if available < payload {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64 + payload,
            found: bytes.len() as u64,
        });
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + payload as usize];
    let data: Vec<f64> = match precision {
        Precision::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    let m = Matrix::new(rows as usize, cols as usize, data)?;
    Ok((m, HEADER_LEN + payload as usize))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let (m, used) = decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::InvalidInput(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &Matrix, precision: Precision) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(m, precision))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]]).unwrap();
        let bytes = encode(&m, Precision::F32);
        assert_eq!(&bytes[..4], b"FEMB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        let (back, used) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, m);
    }

    #[test]
    fn f64_is_bit_exact() {
        let m = Matrix::from_rows(&[[0.1, 1.0 / 3.0], [std::f64::consts::PI, -0.0]]).unwrap();
        let (back, _) = decode(&encode(&m, Precision::F64), Path::new("x")).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn decode_errors() {
        let p = Path::new("x");
        let m = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let good = encode(&m, Precision::F32);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::BadMagic(_))));

        assert!(matches!(
            decode(&good[..good.len() - 1], p),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            decode(&good[..10], p),
            Err(Error::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad, p), Err(Error::UnsupportedVersion(9))));

        let mut bad = good;
        bad[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode(&bad, p),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }
}
