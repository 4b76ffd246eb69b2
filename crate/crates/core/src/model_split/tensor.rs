use crate::ledger::{CodecError, Decoder, Encoder};

use super::ModelError;

/// Row-major matrix of doubles. Rows index the batch, columns the features.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::ShapeMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `u32 rows, u32 cols, rows*cols f64` in canonical layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u32(self.rows as u32).u32(self.cols as u32);
        for v in &self.data {
            enc.f64(*v);
        }
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, CodecError> {
        let mut dec = Decoder::new(bytes);
        let rows = dec.u32()? as usize;
        let cols = dec.u32()? as usize;
        let data = (0..rows * cols)
            .map(|_| dec.f64())
            .collect::<Result<Vec<_>, _>>()?;
        dec.finish()?;
        Ok(Tensor { rows, cols, data })
    }

    /// Size in bytes of the wire form of a `rows x cols` tensor.
    pub fn wire_size(rows: usize, cols: usize) -> u64 {
        8 + 8 * (rows * cols) as u64
    }
}
