use super::{dot, Mat};
use crate::error::{Error, Result};

/// Thin SVD `M = U · diag(σ) · Vᵀ` with `k = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `rows × k`, orthonormal columns.
    pub u: Mat,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `k × cols`, orthonormal rows.
    pub vt: Mat,
}

impl SvdResult {
    /// Number of non-zero singular values.
    pub fn rank(&self) -> usize {
        self.sigma.iter().take_while(|&&s| s > 0.0).count()
    }

    pub fn reconstruct(&self) -> Mat {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        super::gemm(&us, &self.vt)
    }
}

const ORTHO_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;
/// Singular values below this fraction of σ₁ are reported as exact zeros.
pub(crate) const RANK_TOL: f64 = 1e-12;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Rotations are applied to the rows of the shorter orientation until every
/// pair is orthogonal to `1e-15` relative; row norms are then the singular
/// values. Right singular vectors belonging to zero singular values are
/// completed to an orthonormal set so `vt` always has orthonormal rows.
pub fn thin_svd(m: &Mat) -> Result<SvdResult> {
    if !m.all_finite() {
        return Err(Error::Parameter("SVD input contains non-finite entries".into()));
    }
    if m.rows() <= m.cols() {
        Ok(wide_svd(m))
    } else {
        let t = wide_svd(&m.transpose());
        Ok(SvdResult { u: t.vt.transpose(), sigma: t.sigma, vt: t.u.transpose() })
    }
}

fn wide_svd(a: &Mat) -> SvdResult {
    let (k, n) = a.shape();
    let mut w = a.clone();
    let mut g = Mat::identity(k);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..k {
            for j in i + 1..k {
                let alpha = dot(w.row(i), w.row(i));
                let beta = dot(w.row(j), w.row(j));
                let gamma = dot(w.row(i), w.row(j));
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, i, j, c, s);
                rotate_rows(&mut g, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..k).map(|i| dot(w.row(i), w.row(i)).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let top = order.first().map_or(0.0, |&i| norms[i]);
    let mut sigma = Vec::with_capacity(k);
    let mut u = Mat::zeros(k, k);
    let mut vt = Mat::zeros(k, n);
    let mut filled = 0;
    for (slot, &src) in order.iter().enumerate() {
        for r in 0..k {
            u[(r, slot)] = g[(src, r)];
        }
        let s = norms[src];
        if top > 0.0 && s > RANK_TOL * top {
            sigma.push(s);
            for (dst, &v) in vt.row_mut(slot).iter_mut().zip(w.row(src)) {
                *dst = v / s;
            }
            filled += 1;
        } else {
            sigma.push(0.0);
        }
    }
    complete_rows(&mut vt, filled);
    SvdResult { u, sigma, vt }
}

fn rotate_rows(m: &mut Mat, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for col in 0..cols {
        let xi = data[i * cols + col];
        let xj = data[j * cols + col];
        data[i * cols + col] = c * xi - s * xj;
        data[j * cols + col] = s * xi + c * xj;
    }
}

/// Fills rows `filled..` with unit vectors orthogonal to all earlier rows,
/// drawn from the canonical basis by modified Gram–Schmidt.
fn complete_rows(vt: &mut Mat, filled: usize) {
    let (k, n) = vt.shape();
    let mut next = filled;
    let mut candidate = 0;
    while next < k && candidate < n {
        let mut v = vec![0.0; n];
        v[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for r in 0..next {
                let p = dot(&v, vt.row(r));
                for (x, &b) in v.iter_mut().zip(vt.row(r)) {
                    *x -= p * b;
                }
            }
        }
        let len = dot(&v, &v).sqrt();
        if len < 1e-6 {
            continue;
        }
        for (dst, x) in vt.row_mut(next).iter_mut().zip(&v) {
            *dst = x / len;
        }
        next += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gemm;
    use crate::rng::Stream;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = Stream::new(seed, 5);
        Mat::from_raw(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    fn assert_orthonormal_rows(m: &Mat, tol: f64) {
        let gram = gemm(m, &m.transpose());
        let err = gram.sub(&Mat::identity(m.rows())).unwrap().max_abs();
        assert!(err <= tol, "orthonormality error {err}");
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let s = thin_svd(&Mat::identity(4)).unwrap();
        assert_eq!(s.sigma, vec![1.0; 4]);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [2.0, 0.0, 0.0];
        let v = [0.0, 3.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt(), 0.0];
        let mut m = Mat::zeros(3, 4);
        for i in 0..3 {
            for j in 0..4 {
                m[(i, j)] = u[i] * v[j];
            }
        }
        let s = thin_svd(&m).unwrap();
        assert!((s.sigma[0] - 6.0).abs() < 1e-12);
        assert!(s.sigma[1..].iter().all(|&x| x <= 1e-12));
        assert_eq!(s.rank(), 1);
        assert_orthonormal_rows(&s.vt, 1e-8);
    }

    #[test]
    fn zero_matrix() {
        let s = thin_svd(&Mat::zeros(3, 5)).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert_orthonormal_rows(&s.vt, 1e-12);
    }

    #[test]
    fn tall_and_wide_reconstruct() {
        for (r, c, seed) in [(5, 8, 1), (8, 5, 2), (1, 6, 3), (6, 1, 4), (7, 7, 5)] {
            let m = random(r, c, seed);
            let s = thin_svd(&m).unwrap();
            assert_eq!(s.sigma.len(), r.min(c));
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
            let err = s.reconstruct().sub(&m).unwrap().max_abs();
            assert!(err <= 1e-9 * m.max_abs(), "{r}x{c}: {err}");
            assert_orthonormal_rows(&s.vt, 1e-8);
            assert_orthonormal_rows(&s.u.transpose(), 1e-8);
        }
    }

    #[test]
    fn rejects_nan() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(thin_svd(&m).is_err());
    }
}
