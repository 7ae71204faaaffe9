//! Dense row-major matrices and the handful of kernels the rest of the crate
//! is built from: products, a one-sided Jacobi SVD, orthonormal bases with
//! their projectors, and the row softmax with its Jacobian.

mod basis;
mod svd;

pub use basis::{project_into, project_out, select_basis, select_basis_offset, Basis};
pub use svd::{thin_svd, SvdResult};

use std::cell::Cell;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return dim_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("entry {bad} is not finite")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Stacks `other` below `self`. Either side may have zero rows.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return dim_err(format!("vstack of width {} and {}", self.cols, other.cols));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Mat::from_raw(self.rows + other.rows, cols, data))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::from_raw(idx.len(), self.cols, data)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return dim_err(format!("{:?} += {:?}", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub(crate) fn axpy(&mut self, alpha: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return dim_err(format!("elementwise {:?} vs {:?}", self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mat::from_raw(self.rows, self.cols, data))
    }

    /// Largest absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

thread_local! {
    static FLOP_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Per-thread multiply FLOP instrumentation. While enabled, every call to
/// [`matmul`], [`matmul_nt`] and [`matmul_tn`] on this thread adds `2·m·n·p`.
pub mod flop_counter {
    use super::FLOP_COUNTER;

    pub fn enable() {
        FLOP_COUNTER.with(|c| c.set(Some(0)));
    }

    /// Stops counting and returns the total since [`enable`].
    pub fn disable() -> u64 {
        FLOP_COUNTER.with(|c| c.take().unwrap_or(0))
    }

    pub fn is_enabled() -> bool {
        FLOP_COUNTER.with(|c| c.get().is_some())
    }

    /// Runs `f` with counting enabled and returns its result plus the count.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let previous = FLOP_COUNTER.with(|c| c.replace(Some(0)));
        let out = f();
        let counted = FLOP_COUNTER.with(|c| c.replace(previous)).unwrap_or(0);
        (out, counted)
    }

    pub(crate) fn record(m: usize, n: usize, p: usize) {
        FLOP_COUNTER.with(|c| {
            if let Some(total) = c.get() {
                c.set(Some(total + 2 * (m * n * p) as u64));
            }
        });
    }
}

/// `a · b`.
pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.rows {
        return dim_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    flop_counter::record(a.rows, a.cols, b.cols);
    Ok(gemm(a, b))
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return dim_err(format!("matmul_nt {:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    flop_counter::record(a.rows, a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows != b.rows {
        return dim_err(format!("matmul_tn {:?}ᵀ x {:?}", a.shape(), b.shape()));
    }
    flop_counter::record(a.cols, a.rows, b.cols);
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let br = b.row(k);
        for i in 0..a.cols {
            let aik = a.data[k * a.cols + i];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Uninstrumented product for bookkeeping outside the counted inventory
/// (embeddings, classifier heads, projector algebra).
pub(crate) fn gemm(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// Row vector times matrix, uninstrumented.
pub(crate) fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    debug_assert_eq!(v.len(), m.rows);
    let mut out = vec![0.0; m.cols];
    for (k, &vk) in v.iter().enumerate() {
        if vk == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(m.row(k)) {
            *o += vk * x;
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Jacobian `∂softmax_i/∂z_j` at probabilities `p`:
/// `p_i(1 − p_i)` on the diagonal and `−p_i p_j` elsewhere.
pub fn softmax_jacobian(p: &[f64]) -> Result<Mat> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 || p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Parameter(format!(
            "not a probability vector (sum {total})"
        )));
    }
    let n = p.len();
    let mut h = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = if i == j { p[i] * (1.0 - p[i]) } else { -p[i] * p[j] };
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = Stream::new(seed, 99);
        Mat::from_raw(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    #[test]
    fn identity_product() {
        let m = random(3, 4, 1);
        assert_eq!(matmul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Mat::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Mat::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let a = random(4, 5, 2);
        let b = random(5, 3, 3);
        let mut expect = Mat::zeros(4, 3);
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a[(i, k)] * b[(k, j)];
                }
                expect[(i, j)] = s;
            }
        }
        assert_eq!(matmul(&a, &b).unwrap(), expect);
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), expect);
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), expect);
    }

    #[test]
    fn product_shape_mismatch() {
        assert!(matches!(
            matmul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn counter_tracks_2mnp() {
        let a = random(4, 5, 2);
        let b = random(5, 3, 3);
        let (_, flops) = flop_counter::measure(|| matmul(&a, &b).unwrap());
        assert_eq!(flops, 2 * 4 * 5 * 3);
        assert!(!flop_counter::is_enabled());
        let _ = gemm(&a, &b);
        let (_, none) = flop_counter::measure(|| gemm(&a, &b));
        assert_eq!(none, 0);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Mat::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Mat::from_vec(1, 3, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn uniform_softmax() {
        let p = softmax_rows(&Mat::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn saturated_jacobian_is_zero() {
        let h = softmax_jacobian(&[1.0, 0.0]).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn jacobian_rejects_non_distribution() {
        assert!(softmax_jacobian(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let z = [0.3, -1.2, 0.8];
        let p = softmax_rows(&Mat::row_vector(&z));
        let h = softmax_jacobian(p.as_slice()).unwrap();
        let step = 1e-6;
        for j in 0..3 {
            let mut plus = z;
            let mut minus = z;
            plus[j] += step;
            minus[j] -= step;
            let sp = softmax_rows(&Mat::row_vector(&plus));
            let sm = softmax_rows(&Mat::row_vector(&minus));
            for i in 0..3 {
                let fd = (sp[(0, i)] - sm[(0, i)]) / (2.0 * step);
                let rel = (fd - h[(i, j)]).abs() / h[(i, j)].abs().max(1e-12);
                assert!(rel <= 1e-6, "H[{i},{j}] = {} vs fd {fd}", h[(i, j)]);
            }
        }
        for i in 0..3 {
            assert!(h.row(i).iter().sum::<f64>().abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_large_logits() {
        let m = Mat::from_vec(2, 3, vec![1000.0, 999.0, -1000.0, 0.1, 0.2, 0.3]).unwrap();
        let p = softmax_rows(&m);
        for r in 0..2 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
