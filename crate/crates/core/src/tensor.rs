//! Dense row-major matrices and multi-scale schedules.

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ShapeError {
    #[error("data length {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("scale schedule is empty")]
    EmptySchedule,
    #[error("scale schedule token counts must be nondecreasing (scale {0})")]
    DecreasingSchedule(usize),
}

/// Row-major `rows x cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(ShapeError::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(ShapeError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
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

    /// I.i.d. standard normal entries times `scale`, drawn row-major from `rng`.
    pub fn random(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.next_gaussian() * scale).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * other`, i-k-j loop order.
    ///
    /// # Panics
    ///
    /// Panics if the inner dimensions differ.
    pub fn matmul(&self, other: &Matrix2D) -> Matrix2D {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix2D::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix2D {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix2D {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copies a contiguous column range into a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> Matrix2D {
        Matrix2D::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Stacks matrices with equal column counts on top of each other.
    ///
    /// # Panics
    ///
    /// Panics on a column-count mismatch.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix2D>) -> Matrix2D {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for p in parts {
            match cols {
                None => cols = Some(p.cols),
                Some(c) => assert_eq!(c, p.cols, "vstack column mismatch"),
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Matrix2D {
            rows,
            cols: cols.unwrap_or(0),
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix2D) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Ordered `(height, width)` token-map resolutions, coarse to fine. Scales are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct ScaleSchedule {
    entries: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self, ShapeError> {
        if entries.is_empty() {
            return Err(ShapeError::EmptySchedule);
        }
        for k in 1..entries.len() {
            let prev = entries[k - 1].0 * entries[k - 1].1;
            if entries[k].0 * entries[k].1 < prev {
                return Err(ShapeError::DecreasingSchedule(k + 1));
            }
        }
        Ok(Self { entries })
    }

    /// Square maps with the given side lengths.
    pub fn square(sides: &[usize]) -> Result<Self, ShapeError> {
        Self::new(sides.iter().map(|&s| (s, s)).collect())
    }

    /// Number of scales, `S_max`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(h_s, w_s)` for the 1-based scale `s`.
    pub fn dims(&self, s: usize) -> Option<(usize, usize)> {
        s.checked_sub(1).and_then(|i| self.entries.get(i)).copied()
    }

    /// Token count `h_s * w_s` for the 1-based scale `s`.
    pub fn tokens(&self, s: usize) -> Option<usize> {
        self.dims(s).map(|(h, w)| h * w)
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn scales(&self) -> impl Iterator<Item = usize> {
        1..=self.entries.len()
    }
}

impl TryFrom<Vec<(usize, usize)>> for ScaleSchedule {
    type Error = ShapeError;

    fn try_from(value: Vec<(usize, usize)>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ScaleSchedule> for Vec<(usize, usize)> {
    fn from(value: ScaleSchedule) -> Self {
        value.entries
    }
}
