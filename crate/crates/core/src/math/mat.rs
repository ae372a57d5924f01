use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input; meant for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows in Mat::from_rows");
            data.extend_from_slice(r);
        }
        Mat {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero, and a 0-column matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        matmul(self, rhs)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        self.check_same_shape(other, "Mat::zip_map")?;
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "Mat::axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Column means as a length-`cols` vector.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Copies rows `[start, start+len)` into a new matrix.
    pub fn row_slice(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically; all must share the column count.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "Mat::vstack",
                    format!("column counts {cols} and {}", p.cols),
                ));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Mat { rows, cols, data })
    }

    fn check_same_shape(&self, other: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

/// Standard matrix product `a * b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    Ok(c)
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
///
/// Shapes are asserted; callers inside the crate have already validated them.
pub(crate) fn gemm(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if ta {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if tb {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: the strides describe exactly the row-major buffers of `a`, `b`
    // and `c`, whose lengths match the asserted dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Edge of the square blocks used by the triangular products.
const TRI_BLOCK: usize = 32;

fn tri_blocks(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(TRI_BLOCK)
        .map(|s| (s, (s + TRI_BLOCK).min(n)))
        .collect()
}

/// `c += alpha * a * b` on raw strided views.
///
/// # Safety
/// Each pointer with its strides must address an in-bounds `m x k`, `k x n` or `m x n` view.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_view(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: (*const f64, usize, usize),
    b: (*const f64, usize, usize),
    c: (*mut f64, usize),
) {
    matrixmultiply::dgemm(
        m,
        k,
        n,
        alpha,
        a.0,
        a.1 as isize,
        a.2 as isize,
        b.0,
        b.1 as isize,
        b.2 as isize,
        1.0,
        c.0,
        c.1 as isize,
        1,
    );
}

/// Block lower triangle of `a * b^T` for `n x d` inputs. Blocks strictly above the block
/// diagonal stay zero; the diagonal blocks are complete.
pub(crate) fn gram_lower(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.shape(), b.shape(), "gram_lower shapes");
    let (n, d) = a.shape();
    let mut c = Mat::zeros(n, n);
    if d == 0 {
        return c;
    }
    let blocks = tri_blocks(n);
    for (bi, &(i0, i1)) in blocks.iter().enumerate() {
        for &(j0, j1) in &blocks[..=bi] {
            // SAFETY: rows i0..i1 of `a`, rows j0..j1 of `b` and the matching block of `c`
            // are in bounds.
            unsafe {
                gemm_view(
                    (i1 - i0, d, j1 - j0),
                    1.0,
                    (a.data.as_ptr().add(i0 * d), d, 1),
                    (b.data.as_ptr().add(j0 * d), 1, d),
                    (c.data.as_mut_ptr().add(i0 * n + j0), n),
                );
            }
        }
    }
    c
}

/// `c += alpha * l * b` for a lower-triangular `n x n` matrix `l`. Entries of `l` above
/// the block diagonal are never read.
pub(crate) fn lower_mul(alpha: f64, l: &Mat, b: &Mat, c: &mut Mat) {
    let (n, d) = b.shape();
    assert_eq!(l.shape(), (n, n), "lower_mul shapes");
    assert_eq!(c.shape(), (n, d), "lower_mul output");
    if d == 0 {
        return;
    }
    let blocks = tri_blocks(n);
    for (bi, &(i0, i1)) in blocks.iter().enumerate() {
        for &(j0, j1) in &blocks[..=bi] {
            // SAFETY: block (i0..i1, j0..j1) of `l`, rows j0..j1 of `b` and rows i0..i1
            // of `c` are in bounds.
            unsafe {
                gemm_view(
                    (i1 - i0, j1 - j0, d),
                    alpha,
                    (l.data.as_ptr().add(i0 * n + j0), n, 1),
                    (b.data.as_ptr().add(j0 * d), d, 1),
                    (c.data.as_mut_ptr().add(i0 * d), d),
                );
            }
        }
    }
}

/// `c += alpha * l^T * b` for a lower-triangular `n x n` matrix `l`.
pub(crate) fn lower_t_mul(alpha: f64, l: &Mat, b: &Mat, c: &mut Mat) {
    let (n, d) = b.shape();
    assert_eq!(l.shape(), (n, n), "lower_t_mul shapes");
    assert_eq!(c.shape(), (n, d), "lower_t_mul output");
    if d == 0 {
        return;
    }
    let blocks = tri_blocks(n);
    for (bi, &(i0, i1)) in blocks.iter().enumerate() {
        for &(j0, j1) in &blocks[..=bi] {
            // SAFETY: block (i0..i1, j0..j1) of `l` read transposed, rows i0..i1 of `b`
            // and rows j0..j1 of `c` are in bounds.
            unsafe {
                gemm_view(
                    (j1 - j0, i1 - i0, d),
                    alpha,
                    (l.data.as_ptr().add(i0 * n + j0), 1, n),
                    (b.data.as_ptr().add(i0 * d), d, 1),
                    (c.data.as_mut_ptr().add(j0 * d), d),
                );
            }
        }
    }
}

/// Rows whose norm is within this band of 1 are already unit length and are left untouched.
const UNIT_BAND: f64 = 4.0 * f64::EPSILON;
/// Rows with a smaller norm are returned unchanged.
pub const ZERO_ROW_GUARD: f64 = 1e-12;

/// Scales every row to unit L2 norm. Zero rows (norm < 1e-12) pass through, and rows
/// already within a few ulps of unit norm are returned bit-for-bit.
pub fn row_normalize(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_ROW_GUARD || (norm - 1.0).abs() <= UNIT_BAND {
            continue;
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}
