//! Dense rank-4 tensors in `(n, c, h, w)` row-major order, and row-major token matrices.

use crate::error::{bail, Result};
use crate::rng::Rng;

/// Dense `(n, c, h, w)` tensor of `f32`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Dimension, "all tensor dimensions must be >= 1, got {shape:?}");
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            bail!(
                Dimension,
                "tensor {shape:?} needs {len} elements, got {}",
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from raw parts without checking; internal ops guarantee the length.
    pub(crate) fn from_parts(shape: [usize; 4], data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized tensor {shape:?}");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn randn(shape: [usize; 4], std: f32, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.normal() * std;
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h·w` plane for batch item `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Token-matrix view of batch item `n`: `(h·w) × c`, one row per pixel.
    pub fn to_tokens(&self, n: usize) -> Matrix {
        let [_, c, h, w] = self.shape;
        let hw = h * w;
        let mut m = Matrix::zeros(hw, c);
        for ch in 0..c {
            let plane = self.plane(n, ch);
            for (p, &v) in plane.iter().enumerate() {
                m.data[p * c + ch] = v;
            }
        }
        m
    }

    /// Inverse of [`Tensor::to_tokens`] for a whole batch: one `(h·w) × c` matrix per item.
    pub fn from_tokens(tokens: &[Matrix], h: usize, w: usize) -> Result<Self> {
        let Some(first) = tokens.first() else {
            bail!(Dimension, "from_tokens needs at least one batch item");
        };
        let c = first.cols();
        let mut out = Self::zeros([tokens.len(), c, h, w]);
        for (n, m) in tokens.iter().enumerate() {
            if m.rows() != h * w || m.cols() != c {
                bail!(
                    Dimension,
                    "token matrix {}x{} does not fit ({h}x{w}, {c})",
                    m.rows(),
                    m.cols()
                );
            }
            for ch in 0..c {
                let plane = out.plane_mut(n, ch);
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = m.data[p * c + ch];
                }
            }
        }
        Ok(out)
    }
}

/// Row-major dense matrix; the token view `(tokens × channels)` used by attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(
                Dimension,
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            );
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn randn(rows: usize, cols: usize, std: f32, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Self { rows, cols, data }
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
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column slice out of range");
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `src` into columns starting at `start`.
    pub fn set_col_slice(&mut self, start: usize, src: &Matrix) {
        assert_eq!(src.rows, self.rows);
        assert!(start + src.cols <= self.cols);
        for r in 0..self.rows {
            let w = src.cols;
            self.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows sum, accumulated in f64.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|&v| v as f64).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn token_view_round_trip() {
        let mut rng = Rng::new(3);
        let t = Tensor::randn([2, 5, 3, 4], 1.0, &mut rng);
        let toks: Vec<_> = (0..2).map(|n| t.to_tokens(n)).collect();
        assert_eq!(toks[0].rows(), 12);
        assert_eq!(toks[1].get(7, 3), t.at(1, 3, 1, 3));
        let back = Tensor::from_tokens(&toks, 3, 4).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn column_slices() {
        let m = Matrix::from_fn(3, 4, |r, c| (r * 10 + c) as f32);
        let s = m.col_slice(1, 2);
        assert_eq!(s.row(2), &[21.0, 22.0]);
        let mut z = Matrix::zeros(3, 4);
        z.set_col_slice(1, &s);
        assert_eq!(z.get(2, 2), 22.0);
        assert_eq!(z.get(2, 0), 0.0);
        assert_eq!(m.transpose().get(3, 1), 13.0);
    }
}
