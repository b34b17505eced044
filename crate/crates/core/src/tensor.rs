//! Dense row-major `f64` matrices and the feature-map wrapper used across the
//! pipeline.
//!
//! Every activation in the network is a 2-D matrix. Spatial maps are stored
//! as `[h * w, c]` (one row per pixel, raster order) and carry their grid
//! size alongside in [`FeatureMap`].

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "Mat::from_vec: {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        Self { rows, cols, data }
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

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1x1` matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.len(),
            1,
            "item() on a {}x{} matrix",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(self.shape(), other.shape(), "zip_map shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat::from_vec(m, n, out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul row mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat::from_vec(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t col mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Mat::from_vec(m, n, out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols, "slice_cols out of range");
        Mat::from_fn(self.rows, len, |r, c| self.at(r, start + c))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Mat::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn concat_cols(parts: &[&Mat]) -> Mat {
        let rows = parts[0].rows;
        assert!(
            parts.iter().all(|p| p.rows == rows),
            "concat_cols row mismatch"
        );
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Mat::from_vec(rows, cols, data)
    }

    pub fn concat_rows(parts: &[&Mat]) -> Mat {
        let cols = parts[0].cols;
        assert!(
            parts.iter().all(|p| p.cols == cols),
            "concat_rows col mismatch"
        );
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Mat::from_vec(rows, cols, data)
    }
}

/// A spatial map of `h x w` pixels with `c` channels, stored as a `[h*w, c]`
/// matrix in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub data: Mat,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, data: Mat) -> Self {
        assert_eq!(
            data.rows,
            h * w,
            "FeatureMap: {h}x{w} grid needs {} rows",
            h * w
        );
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::new(h, w, Mat::zeros(h * w, c))
    }

    pub fn channels(&self) -> usize {
        self.data.cols
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data.at(y * self.w + x, c)
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        let w = self.w;
        self.data.at_mut(y * w + x, c)
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.data.row(y * self.w + x)
    }
}

/// Binary `h x w` mask in raster order; entries are 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w, "Mask: {h}x{w} needs {} values", h * w);
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![0; h * w])
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x) as u8);
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn complement(&self) -> Mask {
        Mask::new(
            self.h,
            self.w,
            self.data.iter().map(|&v| 1 - v.min(1)).collect(),
        )
    }

    /// The mask as a `[1, h*w]` row of 0.0 / 1.0.
    pub fn to_row(&self) -> Mat {
        Mat::from_vec(
            1,
            self.data.len(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Corner indices and weights of a clamped bilinear lookup at `(y, x)` on an
/// `h x w` grid. Coordinates are clamped to `[0, h-1] x [0, w-1]` first.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub wy: f64,
    pub wx: f64,
    /// Whether the coordinate was inside the clamp range (the gradient with
    /// respect to a clamped coordinate is zero).
    pub y_inside: bool,
    pub x_inside: bool,
}

impl BilinearTap {
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (y0, y1, wy, y_inside) = axis_tap(y, h);
        let (x0, x1, wx, x_inside) = axis_tap(x, w);
        Self {
            y0,
            y1,
            x0,
            x1,
            wy,
            wx,
            y_inside,
            x_inside,
        }
    }

    /// Interpolates with the lerp form so that equal corners reproduce their
    /// value exactly.
    #[inline]
    pub fn lerp(&self, v00: f64, v01: f64, v10: f64, v11: f64) -> f64 {
        let top = v00 + (v01 - v00) * self.wx;
        let bottom = v10 + (v11 - v10) * self.wx;
        top + (bottom - top) * self.wy
    }
}

fn axis_tap(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let inside = v >= 0.0 && v <= hi;
    let c = v.clamp(0.0, hi);
    let i0 = c.floor() as usize;
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, inside)
}
