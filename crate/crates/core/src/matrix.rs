use crate::error::{Error, Result};
use crate::tensorstore::DenseTensor;

/// Borrowed row-major `rows x cols` matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f32],
}

impl<'a> MatrixView<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f32]) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                name: "<matrix>".into(),
                detail: format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Views a 2-D F32 tensor.
    pub fn from_tensor(name: &str, tensor: &'a DenseTensor) -> Result<Self> {
        let (&[rows, cols], Some(data)) = (tensor.shape(), tensor.as_f32()) else {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                detail: format!(
                    "expected a 2-D F32 matrix, found {} {:?}",
                    tensor.dtype().as_str(),
                    tensor.shape()
                ),
            });
        };
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [f32] {
        self.data
    }

    pub fn row(&self, r: usize) -> &'a [f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{what} at flat index {i}"))),
            None => Ok(()),
        }
    }
}
