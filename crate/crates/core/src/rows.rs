use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major feature matrix. Tracks the row count explicitly so that
/// zero-width rows (no features) are representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rows {
    data: Vec<f64>,
    dim: usize,
    len: usize,
}

impl Rows {
    pub fn new(data: Vec<f64>, dim: usize, len: usize) -> Result<Self> {
        if data.len() != dim * len {
            return Err(Error::Shape(format!(
                "{} values cannot form {len} rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim, len })
    }

    pub fn empty(dim: usize) -> Self {
        Self { data: Vec::new(), dim, len: 0 }
    }

    pub fn zero_width(len: usize) -> Self {
        Self { data: Vec::new(), dim: 0, len }
    }

    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let dim = columns.len();
        let len = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("feature columns have different lengths".into()));
        }
        let mut data = Vec::with_capacity(dim * len);
        for i in 0..len {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Ok(Self { data, dim, len })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows have different widths".into()));
        }
        Ok(Self {
            data: rows.concat(),
            dim,
            len: rows.len(),
        })
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
        self.len += 1;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len).map(|i| self.data[i * self.dim + j]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len).map(move |i| self.row(i))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.dim);
        for &i in idx {
            out.push(self.row(i));
        }
        out
    }
}
