use super::{gemm, Mat, SvdResult};
use crate::error::{dim_err, Error, Result};

/// Orthonormal row basis of a subspace of `R^d`. Zero rows is a valid,
/// empty subspace.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Basis {
    vectors: Mat,
}

pub const ORTHONORMAL_TOL: f64 = 1e-8;

impl Basis {
    pub fn empty(dim: usize) -> Self {
        Self { vectors: Mat::zeros(0, dim) }
    }

    /// Wraps `vectors` after checking `‖V·Vᵀ − I‖_max ≤ 1e-8`.
    pub fn from_rows(vectors: Mat) -> Result<Self> {
        let err = orthonormality_error(&vectors);
        if err > ORTHONORMAL_TOL {
            return Err(Error::Parameter(format!(
                "basis rows are not orthonormal (error {err:.3e})"
            )));
        }
        Ok(Self { vectors })
    }

    pub(crate) fn from_rows_unchecked(vectors: Mat) -> Self {
        Self { vectors }
    }

    pub fn rank(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.rank() == 0
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    /// `Φ · v` for a row vector `v` of length `d`.
    pub fn coefficients(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rank()).map(|i| super::dot(self.vectors.row(i), v)).collect()
    }

    pub fn concat(&self, other: &Basis) -> Result<Basis> {
        if self.dim() != other.dim() {
            return dim_err(format!("basis dims {} and {}", self.dim(), other.dim()));
        }
        Ok(Basis { vectors: self.vectors.vstack(&other.vectors)? })
    }

    /// `ΦᵀΦ`, the `d×d` orthogonal projector onto the span.
    pub fn projector(&self) -> Mat {
        gemm(&self.vectors.transpose(), &self.vectors)
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.vectors)
    }
}

fn orthonormality_error(v: &Mat) -> f64 {
    if v.rows() == 0 {
        return 0.0;
    }
    let gram = gemm(v, &v.transpose());
    gram.sub(&Mat::identity(v.rows())).map(|m| m.max_abs()).unwrap_or(f64::INFINITY)
}

/// Leading right-singular vectors holding at least a fraction `epsilon` of the
/// spectral energy: the smallest `k` with `Σ_{i≤k} σᵢ² / Σ σᵢ² ≥ ε`.
pub fn select_basis(svd: &SvdResult, epsilon: f64) -> Result<Basis> {
    let total: f64 = svd.sigma.iter().map(|s| s * s).sum();
    select_basis_offset(svd, epsilon, 0.0, total)
}

/// Energy criterion with a head start: `captured` is the energy already
/// explained by an existing basis and `total` the energy of the raw features,
/// so rows are added until `(captured + Σ_{i≤k} σᵢ²) / total ≥ ε`. With
/// `captured = 0` and `total = Σσ²` this is [`select_basis`].
pub fn select_basis_offset(
    svd: &SvdResult,
    epsilon: f64,
    captured: f64,
    total: f64,
) -> Result<Basis> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside (0, 1]")));
    }
    if svd.sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Parameter("negative singular value".into()));
    }
    if svd.sigma.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Parameter("singular values must be non-increasing".into()));
    }
    if svd.vt.rows() != svd.sigma.len() {
        return dim_err("vt rows must match sigma length");
    }
    let mut k = 0;
    if total > 0.0 {
        let mut acc = captured;
        for &s in &svd.sigma {
            if acc / total >= epsilon || s == 0.0 {
                break;
            }
            acc += s * s;
            k += 1;
        }
    }
    let idx: Vec<usize> = (0..k).collect();
    Ok(Basis::from_rows_unchecked(svd.vt.select_rows(&idx)))
}

/// `m − ΦᵀΦm`: removes the components of `m`'s columns lying in span(Φ).
pub fn project_out(m: &Mat, phi: &Basis) -> Result<Mat> {
    if phi.dim() != m.rows() {
        return dim_err(format!("basis dim {} vs {} rows", phi.dim(), m.rows()));
    }
    if phi.is_empty() {
        return Ok(m.clone());
    }
    m.sub(&project_into(m, phi)?)
}

/// `ΨᵀΨm`: keeps only the components of `m`'s columns lying in span(Ψ).
pub fn project_into(m: &Mat, psi: &Basis) -> Result<Mat> {
    if psi.dim() != m.rows() {
        return dim_err(format!("basis dim {} vs {} rows", psi.dim(), m.rows()));
    }
    if psi.is_empty() {
        return Ok(Mat::zeros(m.rows(), m.cols()));
    }
    let coeffs = gemm(psi.vectors(), m);
    Ok(gemm(&psi.vectors().transpose(), &coeffs))
}
