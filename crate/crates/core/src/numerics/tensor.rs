//! Dense row-major f64 tensor.

use crate::error::{Error, Result};

/// Dense n-dimensional value, row-major, always f64.
///
/// `tape_id` is set when the tensor is bound to a [`super::Tape`]; a
/// detached tensor flows through every operation as a constant and never
/// accumulates gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) tape_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            tape_id: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            tape_id: None,
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(v: &[f64]) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.to_vec(),
            tape_id: None,
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows in matrix literal".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
            tape_id: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn on_tape(&self) -> bool {
        self.tape_id.is_some()
    }

    /// Copy with tape participation removed.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            tape_id: None,
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub(crate) fn with_tape(shape: Vec<usize>, data: Vec<f64>, tape_id: Option<usize>) -> Self {
        Tensor {
            shape,
            data,
            tape_id,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
