//! Dense rank-≤3 storage and the `SMDK1` raw tensor file format.
//!
//! A [`Tensor3`] with dims `[d0, d1, d2]` stores slice `k` (index along `d2`)
//! contiguously, each slice row-major over `(d0, d1)`. The last axis is the
//! energy bin or material axis everywhere in this crate, so the mode-3
//! unfolding is the storage itself read as a `d2 × (d0·d1)` matrix.
//!
//! File layout: the ASCII header `SMDK1 <d0> <d1> <d2>\n` followed by
//! `d0·d1·d2` little-endian IEEE-754 binary64 values in storage order.
//! 2-D data uses `d2 = 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

const MAGIC: &str = "SMDK1";
const MAX_HEADER: usize = 128;

/// Row-major 2-D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{rows}x{cols} = {} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err(
                    format!("row of length {cols}"),
                    format!("row {i} of length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        (r < self.rows && c < self.cols).then(|| self.data[r * self.cols + c])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// A single 2-D image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                format!("{rows}x{cols} = {} pixels", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        (r < self.rows && c < self.cols).then(|| self.data[r * self.cols + c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Dense rank-3 tensor; see the module docs for the storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: [d0, d1, d2],
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(shape_err(format!("{dims:?} = {n} values"), data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Stacks equally sized `d0 × d1` slices along the last axis.
    pub fn from_slices(d0: usize, d1: usize, slices: &[&[f64]]) -> Result<Self> {
        let mut data = Vec::with_capacity(d0 * d1 * slices.len());
        for (k, s) in slices.iter().enumerate() {
            if s.len() != d0 * d1 {
                return Err(shape_err(
                    format!("slice of {} values", d0 * d1),
                    format!("slice {k} of {} values", s.len()),
                ));
            }
            data.extend_from_slice(s);
        }
        Ok(Self {
            dims: [d0, d1, slices.len()],
            data,
        })
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let (rows, cols) = images.first().map_or((0, 0), |i| (i.rows, i.cols));
        let slices: Vec<&[f64]> = images.iter().map(Image::as_slice).collect();
        Self::from_slices(rows, cols, &slices)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn num_slices(&self) -> usize {
        self.dims[2]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.slice_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn image(&self, k: usize) -> Image {
        Image {
            rows: self.dims[0],
            cols: self.dims[1],
            data: self.slice(k).to_vec(),
        }
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.dims[2]).map(|k| self.image(k)).collect()
    }

    /// Bounds-checked element access at `(i, j, k)`.
    pub fn get(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let [d0, d1, d2] = self.dims;
        (i < d0 && j < d1 && k < d2).then(|| self.data[(k * d0 + i) * d1 + j])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Mode-3 unfolding: row `k` is the row-major flattening of slice `k`.
    pub fn unfold_mode3(&self) -> Matrix {
        Matrix {
            rows: self.dims[2],
            cols: self.slice_len(),
            data: self.data.clone(),
        }
    }

    /// Inverse of [`Tensor3::unfold_mode3`].
    pub fn fold_mode3(m: &Matrix, d0: usize, d1: usize) -> Result<Self> {
        if m.cols != d0 * d1 {
            return Err(shape_err(
                format!("{} columns for a {d0}x{d1} slice", d0 * d1),
                m.cols,
            ));
        }
        Ok(Self {
            dims: [d0, d1, m.rows],
            data: m.data.clone(),
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let [d0, d1, d2] = self.dims;
        writeln!(w, "{MAGIC} {d0} {d1} {d2}")?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if r.read(&mut byte)? == 0 {
                return Err(Error::Format("missing header terminator".into()));
            }
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > MAX_HEADER {
                return Err(Error::Format("header line too long".into()));
            }
        }
        let header = std::str::from_utf8(&header)
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(Error::Format(format!("bad magic in header {header:?}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Format(format!("malformed dimensions in {header:?}")))?;
        }
        if fields.next().is_some() {
            return Err(Error::Format(format!("extra fields in header {header:?}")));
        }
        let expected = dims
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let mut payload = Vec::with_capacity(expected);
        r.read_to_end(&mut payload)?;
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl From<Image> for Tensor3 {
    fn from(img: Image) -> Self {
        Self {
            dims: [img.rows, img.cols, 1],
            data: img.data,
        }
    }
}
