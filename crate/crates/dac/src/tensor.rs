//! Row-major f32 matrix plus the binary tensor file format.
//!
//! File layout (little-endian): magic `DACT`, format version u32 = 1,
//! dtype code u32 (0 = f32), ndim u32, then ndim u64 dims, then the
//! row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DacError, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"DACT";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

/// Row-major 2-D array of f32. The universal carrier for features,
/// logits, probabilities, and distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DacError::Shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Builds a matrix by stacking equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DacError::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        DenseMatrix::new(rows.len(), cols, data)
    }

    /// Index of the first maximal entry of row `r`.
    pub fn row_argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Reads a matrix from the binary tensor format, validating shape and
/// rejecting NaN/Inf entries.
pub fn load_tensor(path: &Path) -> Result<DenseMatrix> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(DacError::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != TENSOR_VERSION {
        return Err(DacError::Format(format!(
            "{}: unsupported version {}",
            path.display(),
            version
        )));
    }
    let dtype = read_u32(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(DacError::Format(format!(
            "{}: unsupported dtype code {}",
            path.display(),
            dtype
        )));
    }
    let ndim = read_u32(&mut r)?;
    if ndim != 2 {
        return Err(DacError::Format(format!(
            "{}: expected 2-D tensor, got ndim {}",
            path.display(),
            ndim
        )));
    }
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| DacError::Format(format!("{}: dim overflow", path.display())))?;

    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload).map_err(|e| {
        DacError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: truncated payload: {}", path.display(), e),
        ))
    })?;
    let mut data = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(DacError::Data(format!(
            "{}: non-finite entry in tensor",
            path.display()
        )));
    }
    DenseMatrix::new(rows, cols, data)
}

/// Writes a matrix in the binary tensor format. Reloading reproduces the
/// same shape and a bit-identical payload.
pub fn save_tensor(matrix: &DenseMatrix, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&DTYPE_F32.to_le_bytes())?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&(matrix.rows as u64).to_le_bytes())?;
    w.write_all(&(matrix.cols as u64).to_le_bytes())?;
    for v in &matrix.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_small() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dact");
        let m = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensor(&m, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn round_trip_1x3() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dact");
        let m = DenseMatrix::new(1, 3, vec![1.5, -2.0, 0.0]).unwrap();
        save_tensor(&m, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), m);
    }

    #[test]
    fn empty_matrix_header_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dact");
        let m = DenseMatrix::zeros(0, 0);
        save_tensor(&m, &path).unwrap();
        // header (16) + two u64 dims (16), no payload
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 32);
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.rows(), 0);
        assert_eq!(back.cols(), 0);
    }

    #[test]
    fn nan_entry_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dact");
        let mut m = DenseMatrix::zeros(2, 2);
        m.set(1, 1, f32::NAN);
        // bypass save validation: save does not validate, load does
        save_tensor(&m, &path).unwrap();
        match load_tensor(&path) {
            Err(DacError::Data(_)) => {}
            other => panic!("expected data error, got {:?}", other),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dact");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        match load_tensor(&path) {
            Err(DacError::Format(_)) => {}
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.dact");
        let m = DenseMatrix::new(4, 4, (0..16).map(|i| i as f32).collect()).unwrap();
        save_tensor(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load_tensor(&path) {
            Err(DacError::Io(_)) => {}
            other => panic!("expected io error, got {:?}", other),
        }
    }

    proptest! {
        #[test]
        fn round_trip_bytes_identical(
            rows in 0usize..20,
            cols in 0usize..20,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| rng.random_range(-1e6f32..1e6f32))
                .collect();
            let m = DenseMatrix::new(rows, cols, data).unwrap();
            let dir = tempdir().unwrap();
            let p1 = dir.path().join("a.dact");
            let p2 = dir.path().join("b.dact");
            save_tensor(&m, &p1).unwrap();
            let back = load_tensor(&p1).unwrap();
            save_tensor(&back, &p2).unwrap();
            prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }
}
