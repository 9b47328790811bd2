//! Dense f64 tensor primitives shared by the attention kernels and the toy
//! model: a row-major [`Matrix`], masked row softmax, online-softmax
//! statistics and rotary position embedding.

use crate::error::{Error, Result};

/// Row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                rows * cols,
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    /// Writes `src` into columns `start..start + src.cols()`.
    pub fn set_cols(&mut self, start: usize, src: &Matrix) {
        debug_assert_eq!(src.rows, self.rows);
        for r in 0..self.rows {
            self.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides and extents describe the owned buffers exactly; the
    // assertions above pin every dimension.
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

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Masked softmax of a single row. Returns the log-sum-exp.
pub fn softmax_in_place(row: &mut [f64]) -> Option<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
    Some(m + sum.ln())
}

/// Row-wise softmax. `-inf` entries are masked and come out as exact zeros.
pub fn softmax_rows(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut probs = x.clone();
    let mut lse = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let v = softmax_in_place(probs.row_mut(r)).ok_or(Error::DegenerateRow { row: r })?;
        lse.push(v);
    }
    Ok((probs, lse))
}

/// Online-softmax state for one query row: running max `m` and the
/// denominator `l`, expressed relative to `e^m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamStat {
    pub m: f64,
    pub l: f64,
}

impl StreamStat {
    pub const EMPTY: StreamStat = StreamStat {
        m: f64::NEG_INFINITY,
        l: 0.0,
    };

    pub fn is_empty(&self) -> bool {
        self.l == 0.0
    }

    pub fn lse(&self) -> f64 {
        self.m + self.l.ln()
    }

    /// Softmax statistics and normalized weighted sum over one chunk of
    /// logits and their value rows.
    pub fn from_chunk(logits: &[f64], values: &[&[f64]], out: &mut [f64]) -> StreamStat {
        out.iter_mut().for_each(|x| *x = 0.0);
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return StreamStat::EMPTY;
        }
        let mut l = 0.0;
        for (&s, v) in logits.iter().zip(values) {
            let p = (s - m).exp();
            l += p;
            axpy(p, v, out);
        }
        let inv = 1.0 / l;
        out.iter_mut().for_each(|x| *x *= inv);
        StreamStat { m, l }
    }
}

/// Combines two partial softmax-weighted rows computed over disjoint key
/// sets. Each partial row is already normalized by its own denominator.
pub fn merge_stats(a: (StreamStat, &[f64]), b: (StreamStat, &[f64])) -> (StreamStat, Vec<f64>) {
    let mut out = a.1.to_vec();
    let mut stat = a.0;
    merge_into(&mut stat, &mut out, b.0, b.1);
    (stat, out)
}

/// In-place form of [`merge_stats`]: folds `(b, b_out)` into `(acc, acc_out)`.
#[inline]
pub fn merge_into(acc: &mut StreamStat, acc_out: &mut [f64], b: StreamStat, b_out: &[f64]) {
    if b.is_empty() {
        return;
    }
    if acc.is_empty() {
        *acc = b;
        acc_out.copy_from_slice(b_out);
        return;
    }
    let m = acc.m.max(b.m);
    let wa = acc.l * (acc.m - m).exp();
    let wb = b.l * (b.m - m).exp();
    let l = wa + wb;
    let (ca, cb) = (wa / l, wb / l);
    for (o, x) in acc_out.iter_mut().zip(b_out) {
        *o = ca * *o + cb * x;
    }
    *acc = StreamStat { m, l };
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
}

impl RopeConfig {
    pub const DEFAULT_BASE: f64 = 5_000_000.0;

    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        let cfg = Self { head_dim, base };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rope base must exceed 1, got {}",
                self.base
            )));
        }
        Ok(())
    }

    /// Angular frequency of channel pair `i`.
    pub fn frequency(&self, pair: usize) -> f64 {
        self.base.powf(-(2.0 * pair as f64) / self.head_dim as f64)
    }
}

/// Rotates each interleaved channel pair `(2i, 2i+1)` of row `r` by
/// `positions[r] · base^(-2i/head_dim)`.
pub fn rope_apply(x: &Matrix, positions: &[f64], cfg: &RopeConfig) -> Result<Matrix> {
    rotate(x, positions, cfg, 1.0)
}

/// Inverse rotation; also the adjoint, so it maps output gradients back to
/// input gradients.
pub fn rope_apply_inverse(x: &Matrix, positions: &[f64], cfg: &RopeConfig) -> Result<Matrix> {
    rotate(x, positions, cfg, -1.0)
}

fn rotate(x: &Matrix, positions: &[f64], cfg: &RopeConfig, sign: f64) -> Result<Matrix> {
    cfg.validate()?;
    if x.cols() != cfg.head_dim {
        return Err(Error::shape("rope_apply", cfg.head_dim, x.cols()));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape("rope_apply positions", x.rows(), positions.len()));
    }
    let freqs: Vec<f64> = (0..cfg.head_dim / 2).map(|i| cfg.frequency(i)).collect();
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (sign * pos * f).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}
