//! Dense column-major matrices and the column-access trait used by the solver.

use alloc::vec::Vec;

/// Column access needed by coordinate descent.
///
/// Implemented for [`Matrix`] and for [`Stacked`], a zero-copy row-stack of
/// several matrices sharing a column count.
pub trait Design {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `<A[:, j], v>`.
    fn col_dot(&self, j: usize, v: &[f64]) -> f64;
    /// `v += a * A[:, j]`.
    fn col_axpy(&self, j: usize, a: f64, v: &mut [f64]);

    fn col_sq_norm(&self, j: usize) -> f64;

    /// `out = A x`, skipping zero coefficients.
    fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                self.col_axpy(j, xj, out);
            }
        }
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.nrows()];
        self.matvec_into(x, &mut out);
        out
    }

    /// `A^T v`.
    fn tmatvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.ncols()).map(|j| self.col_dot(j, v)).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without fast-math.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

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
            data: alloc::vec![0.0; rows * cols],
        }
    }

    /// Wrap column-major storage. Returns `None` on a length mismatch.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Option<Self> {
        if data.len() != rows * cols {
            return None;
        }
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[j * rows + i] = data[i * cols + j];
            }
        }
        Some(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_row_major(rows.len(), cols, &flat)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        let r = self.rows;
        &mut self.data[j * r..(j + 1) * r]
    }

    pub fn as_col_major(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for j in 0..self.cols {
            let src = self.column(j);
            let dst = out.column_mut(j);
            for (d, &i) in dst.iter_mut().zip(idx) {
                *d = src[i];
            }
        }
        out
    }

    /// Row-stack `parts` into one owned matrix.
    pub fn vstack(parts: &[&Matrix]) -> Option<Matrix> {
        let cols = parts.first()?.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return None;
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Matrix::zeros(rows, cols);
        for j in 0..cols {
            let dst = out.column_mut(j);
            let mut off = 0;
            for p in parts {
                dst[off..off + p.rows].copy_from_slice(p.column(j));
                off += p.rows;
            }
        }
        Some(out)
    }
}

impl Design for Matrix {
    fn nrows(&self) -> usize {
        self.rows
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    fn col_dot(&self, j: usize, v: &[f64]) -> f64 {
        dot(self.column(j), v)
    }

    #[inline]
    fn col_axpy(&self, j: usize, a: f64, v: &mut [f64]) {
        axpy(a, self.column(j), v);
    }

    fn col_sq_norm(&self, j: usize) -> f64 {
        let c = self.column(j);
        dot(c, c)
    }
}

impl<D: Design + ?Sized> Design for &D {
    fn nrows(&self) -> usize {
        (**self).nrows()
    }
    fn ncols(&self) -> usize {
        (**self).ncols()
    }
    fn col_dot(&self, j: usize, v: &[f64]) -> f64 {
        (**self).col_dot(j, v)
    }
    fn col_axpy(&self, j: usize, a: f64, v: &mut [f64]) {
        (**self).col_axpy(j, a, v)
    }
    fn col_sq_norm(&self, j: usize) -> f64 {
        (**self).col_sq_norm(j)
    }
}

/// Row-stack of borrowed matrices, seen as one design without copying.
#[derive(Debug, Clone)]
pub struct Stacked<'a> {
    parts: Vec<&'a Matrix>,
    offsets: Vec<usize>,
    cols: usize,
}

impl<'a> Stacked<'a> {
    /// `None` if `parts` is empty or column counts differ.
    pub fn new(parts: Vec<&'a Matrix>) -> Option<Self> {
        let cols = parts.first()?.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return None;
        }
        let mut offsets = Vec::with_capacity(parts.len() + 1);
        let mut off = 0;
        offsets.push(0);
        for p in &parts {
            off += p.rows;
            offsets.push(off);
        }
        Some(Self {
            parts,
            offsets,
            cols,
        })
    }

    /// Row range of part `k` inside the stacked system.
    pub fn block(&self, k: usize) -> core::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }
}

impl Design for Stacked<'_> {
    fn nrows(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    fn ncols(&self) -> usize {
        self.cols
    }

    fn col_dot(&self, j: usize, v: &[f64]) -> f64 {
        self.parts
            .iter()
            .enumerate()
            .map(|(k, p)| dot(p.column(j), &v[self.block(k)]))
            .sum()
    }

    fn col_axpy(&self, j: usize, a: f64, v: &mut [f64]) {
        for (k, p) in self.parts.iter().enumerate() {
            let r = self.block(k);
            axpy(a, p.column(j), &mut v[r]);
        }
    }

    fn col_sq_norm(&self, j: usize) -> f64 {
        self.parts
            .iter()
            .map(|p| {
                let c = p.column(j);
                dot(c, c)
            })
            .sum()
    }
}
