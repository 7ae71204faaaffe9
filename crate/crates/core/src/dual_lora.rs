//! Adapters, feature-subspace memory, gradient projections and dynamic memory.
//!
//! Each layer carries three low-rank adapters `B·A` (`B: d×r`, `A: r×d`):
//! orthogonal ones on the key and value weights and a residual one on the
//! value weights. At every task boundary the live factors are folded into
//! frozen `merged_*` matrices and restarted from `B = 0`, so the update made
//! while training task `t` is exactly the live product `B·A`.
//!
//! Constraint bookkeeping, with weights acting on row activations (`K = a·W`):
//! - key stream: rows of `A_k` are kept orthogonal to `Φᵏ`, hence
//!   `Φᵏ·(B_k·A_k)ᵀ = 0`;
//! - value stream: columns of `B_v` are kept orthogonal to `Φᵛ`, hence
//!   `Φᵛ·B_v·A_v = 0`;
//! - residual: columns of `B_r` stay inside the newest `Ψ`, hence the update
//!   lies in `span(Ψ)`.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{
    gemm, norm, project_into, project_out, select_basis_offset, thin_svd, Basis, Mat,
};
use crate::rng::{Stream, STREAM_FEATURES};
use crate::vit::{gaussian, ForwardMode, VitMini};

/// Relative threshold below which residual singular values are treated as
/// numerical noise when growing a basis.
const GROWTH_RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapters {
    pub a_k: Mat,
    pub b_k: Mat,
    pub a_v: Mat,
    pub b_v: Mat,
    pub a_r: Mat,
    pub b_r: Mat,
    pub merged_k: Mat,
    pub merged_v: Mat,
    pub merged_r: Mat,
}

impl LayerAdapters {
    fn zeros(d: usize, r: usize) -> Self {
        Self {
            a_k: Mat::zeros(r, d),
            b_k: Mat::zeros(d, r),
            a_v: Mat::zeros(r, d),
            b_v: Mat::zeros(d, r),
            a_r: Mat::zeros(r, d),
            b_r: Mat::zeros(d, r),
            merged_k: Mat::zeros(d, d),
            merged_v: Mat::zeros(d, d),
            merged_r: Mat::zeros(d, d),
        }
    }

    pub fn rank(&self) -> usize {
        self.a_k.rows()
    }

    /// Total key-stream update `Σ_t O_t^k`.
    pub fn total_k(&self) -> Mat {
        let mut m = self.merged_k.clone();
        m.axpy(1.0, &gemm(&self.b_k, &self.a_k));
        m
    }

    pub fn total_v(&self) -> Mat {
        let mut m = self.merged_v.clone();
        m.axpy(1.0, &gemm(&self.b_v, &self.a_v));
        m
    }

    /// Total residual weight `R`.
    pub fn residual_product(&self) -> Mat {
        let mut m = self.merged_r.clone();
        m.axpy(1.0, &gemm(&self.b_r, &self.a_r));
        m
    }

    fn merge(&mut self) {
        self.merged_k = self.total_k();
        self.merged_v = self.total_v();
        self.merged_r = self.residual_product();
    }
}

/// Gradients of one layer's adapter factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapterGrads {
    pub a_k: Mat,
    pub b_k: Mat,
    pub a_v: Mat,
    pub b_v: Mat,
    pub a_r: Mat,
    pub b_r: Mat,
}

impl LayerAdapterGrads {
    pub fn zeros_like(ad: &LayerAdapters) -> Self {
        let (r, d) = ad.a_k.shape();
        Self {
            a_k: Mat::zeros(r, d),
            b_k: Mat::zeros(d, r),
            a_v: Mat::zeros(r, d),
            b_v: Mat::zeros(d, r),
            a_r: Mat::zeros(r, d),
            b_r: Mat::zeros(d, r),
        }
    }

    pub fn tensors(&self) -> [&Mat; 6] {
        [&self.a_k, &self.b_k, &self.a_v, &self.b_v, &self.a_r, &self.b_r]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Mat; 6] {
        [&mut self.a_k, &mut self.b_k, &mut self.a_v, &mut self.b_v, &mut self.a_r, &mut self.b_r]
    }

    pub fn accumulate(&mut self, other: &LayerAdapterGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(1.0, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            *t = t.scale(s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub layers: Vec<LayerAdapters>,
    rank: usize,
    dim: usize,
    residual: bool,
}

impl AdapterSet {
    /// Zero adapters of rank `r` (`r ≤ d/2`). `residual` enables the
    /// value-stream residual adapter.
    pub fn new(layers: usize, d: usize, r: usize, residual: bool) -> Result<Self> {
        if 2 * r > d {
            return Err(Error::Parameter(format!("adapter rank {r} exceeds d/2 = {}", d / 2)));
        }
        Ok(Self {
            layers: (0..layers).map(|_| LayerAdapters::zeros(d, r)).collect(),
            rank: r,
            dim: d,
            residual,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn residual_enabled(&self) -> bool {
        self.residual && self.rank > 0
    }

    /// Folds the live factors into the merged weights and restarts them:
    /// `B = 0`, `A` redrawn from `N(0, 1/d)`. Rows of `A_k` are drawn inside
    /// the complement of `Φᵏ` when a memory is given.
    pub fn begin_task(&mut self, rng: &mut Stream, memory: Option<&FeatureMemory>) -> Result<()> {
        let (d, r) = (self.dim, self.rank);
        let std = 1.0 / (d as f64).sqrt();
        for (l, ad) in self.layers.iter_mut().enumerate() {
            ad.merge();
            ad.b_k = Mat::zeros(d, r);
            ad.b_v = Mat::zeros(d, r);
            ad.b_r = Mat::zeros(d, r);
            ad.a_k = gaussian(r, d, std, rng);
            ad.a_v = gaussian(r, d, std, rng);
            ad.a_r = gaussian(r, d, std, rng);
            if let Some(mem) = memory {
                ad.a_k = project_rows_out(&ad.a_k, &mem.layer(l)?.phi_k)?;
            }
        }
        Ok(())
    }
}

/// Removes span(Φ) from each row: `M·(I − ΦᵀΦ)`.
pub(crate) fn project_rows_out(m: &Mat, phi: &Basis) -> Result<Mat> {
    Ok(project_out(&m.transpose(), phi)?.transpose())
}

/// Bases of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub phi_k: Basis,
    pub phi_v: Basis,
    /// Rows added to `phi_v` at each task, in task order.
    pub psi: Vec<Basis>,
}

impl LayerMemory {
    pub fn empty(d: usize) -> Self {
        Self { phi_k: Basis::empty(d), phi_v: Basis::empty(d), psi: Vec::new() }
    }

    /// `r′ = Σ_τ r_τ`.
    pub fn r_prime(&self) -> usize {
        self.psi.iter().map(Basis::rank).sum()
    }

    pub fn dim(&self) -> usize {
        self.phi_k.dim()
    }

    /// Residual basis of the most recent task, empty before the first.
    pub fn latest_psi(&self) -> Basis {
        self.psi.last().cloned().unwrap_or_else(|| Basis::empty(self.dim()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMemory {
    pub layers: Vec<LayerMemory>,
}

impl FeatureMemory {
    pub fn new(layers: usize, d: usize) -> Self {
        Self { layers: (0..layers).map(|_| LayerMemory::empty(d)).collect() }
    }

    pub fn layer(&self, l: usize) -> Result<&LayerMemory> {
        self.layers
            .get(l)
            .ok_or_else(|| Error::Dimension(format!("memory has no layer {l}")))
    }

    pub fn tasks(&self) -> usize {
        self.layers.first().map_or(0, |l| l.psi.len())
    }

    pub fn last_layer(&self) -> Result<&LayerMemory> {
        match self.layers.last() {
            Some(l) => Ok(l),
            None => Err(Error::State("feature memory has no layers".into())),
        }
    }
}

/// Per-layer feature matrices from one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeatures {
    /// `K̃⁽ˡ⁾`, rows are `Q₁⁽ˡ⁾`.
    pub keys: Vec<Mat>,
    /// `Ṽ⁽ˡ⁾`, rows are `S₁⁽ˡ⁾`.
    pub values: Vec<Mat>,
    /// Mean final-layer `S₁` over the sampled points.
    pub mean_final: Vec<f64>,
}

/// Taps `m` randomly chosen images (without replacement) and stacks the
/// class-token features of every layer.
pub fn collect_features(
    model: &VitMini,
    images: &[Vec<f64>],
    m: usize,
    seed: u64,
) -> Result<TaskFeatures> {
    if m == 0 || m > images.len() {
        return Err(Error::Parameter(format!(
            "cannot sample {m} points from {} images",
            images.len()
        )));
    }
    let idx = Stream::new(seed, STREAM_FEATURES).sample_indices(images.len(), m);
    let (layers, d) = (model.config.layers, model.embed_dim());
    let mut keys = vec![Mat::zeros(m, d); layers];
    let mut values = vec![Mat::zeros(m, d); layers];
    let mut mean_final = vec![0.0; d];
    for (i, &j) in idx.iter().enumerate() {
        let out = model.forward_tapped(&images[j], ForwardMode::Infer)?;
        let taps = out.taps.as_ref().expect("tapped forward");
        for (l, tap) in taps.iter().enumerate() {
            keys[l].row_mut(i).copy_from_slice(&tap.q_class);
            values[l].row_mut(i).copy_from_slice(&tap.s_class);
        }
        for (acc, v) in mean_final.iter_mut().zip(&taps[layers - 1].s_class) {
            *acc += v;
        }
    }
    for v in &mut mean_final {
        *v /= m as f64;
    }
    Ok(TaskFeatures { keys, values, mean_final })
}

/// Grows `phi` with directions of `features` (rows) it does not yet capture.
///
/// The features are residualised against `phi`; the residual's leading right
/// singular vectors are appended until the captured fraction of the raw
/// feature energy reaches `epsilon`. Returns the appended rows.
pub fn grow_basis(phi: &Basis, features: &Mat, epsilon: f64) -> Result<Basis> {
    if features.cols() != phi.dim() {
        return dim_err(format!("features have {} columns, basis dim {}", features.cols(), phi.dim()));
    }
    let d = phi.dim();
    let total = features.frobenius().powi(2);
    if total == 0.0 {
        return Ok(Basis::empty(d));
    }
    let residual = project_rows_out(features, phi)?;
    let captured = (total - residual.frobenius().powi(2)).max(0.0);
    let svd = thin_svd(&residual)?;
    let fresh = select_basis_offset(&svd, epsilon, captured, total)?;
    let floor = GROWTH_RANK_TOL * total.sqrt();
    let keep: Vec<usize> = (0..fresh.rank()).filter(|&i| svd.sigma[i] > floor).collect();
    let rows = fresh.vectors().select_rows(&keep);
    Ok(Basis::from_rows_unchecked(reorthogonalise(&rows, phi)))
}

/// One more Gram–Schmidt pass of `rows` against `phi` and each other, so the
/// concatenation stays orthonormal to working precision.
fn reorthogonalise(rows: &Mat, phi: &Basis) -> Mat {
    let mut out = Mat::zeros(0, rows.cols());
    for i in 0..rows.rows() {
        let mut v = rows.row(i).to_vec();
        for basis in [phi.vectors(), &out] {
            for j in 0..basis.rows() {
                let b = basis.row(j);
                let c: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = norm(&v);
        if n < 0.5 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        out = out.vstack(&Mat::row_vector(&v)).expect("same width");
    }
    out
}

/// Appends the new task's bases to every layer; returns the ranks `r_t` of
/// the new `Ψ_t` per layer.
pub fn update_feature_memory(
    mem: &mut FeatureMemory,
    features: &TaskFeatures,
    epsilon: f64,
) -> Result<Vec<usize>> {
    if features.keys.len() != mem.layers.len() || features.values.len() != mem.layers.len() {
        return dim_err("feature layer count differs from memory");
    }
    let mut ranks = Vec::with_capacity(mem.layers.len());
    for (l, layer) in mem.layers.iter_mut().enumerate() {
        let new_k = grow_basis(&layer.phi_k, &features.keys[l], epsilon)?;
        let new_v = grow_basis(&layer.phi_v, &features.values[l], epsilon)?;
        layer.phi_k = layer.phi_k.concat(&new_k)?;
        layer.phi_v = layer.phi_v.concat(&new_v)?;
        ranks.push(new_v.rank());
        layer.psi.push(new_v);
    }
    Ok(ranks)
}

/// Restricts orthogonal-adapter gradients so the composite updates avoid the
/// stored subspaces: `∇A_k ← ∇A_k(I − ΦᵏᵀΦᵏ)` and `∇B_v ← (I − ΦᵛᵀΦᵛ)∇B_v`.
pub fn project_orthogonal_gradients(grads: &mut LayerAdapterGrads, mem: &LayerMemory) -> Result<()> {
    grads.a_k = project_rows_out(&grads.a_k, &mem.phi_k)?;
    grads.b_v = project_out(&grads.b_v, &mem.phi_v)?;
    Ok(())
}

/// Confines the residual adapter's update to `span(Ψ)`: `∇B_r ← ΨᵀΨ∇B_r`.
/// With an empty `Ψ` both residual factors are frozen.
pub fn project_residual_gradients(grads: &mut LayerAdapterGrads, psi: &Basis) -> Result<()> {
    grads.b_r = project_into(&grads.b_r, psi)?;
    if psi.is_empty() {
        grads.a_r = Mat::zeros(grads.a_r.rows(), grads.a_r.cols());
    }
    Ok(())
}

/// `ω_τ = ‖Ψ_τ v‖ / (r_τ ‖v‖)`, zero for an empty basis or a zero vector.
pub fn relevance(psi: &Basis, v: &[f64]) -> f64 {
    let r = psi.rank();
    let nv = norm(v);
    if r == 0 || nv == 0.0 {
        return 0.0;
    }
    norm(&psi.coefficients(v)) / (r as f64 * nv)
}

/// Dynamic-memory context of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerContext {
    pub omegas: Vec<f64>,
    /// `Ω = blockdiag(√ω_τ I_{r_τ})·[Ψ₁; …; Ψ_t]`, `r′×d`.
    pub omega: Mat,
}

impl LayerContext {
    pub fn build(mem: &LayerMemory, v: &[f64]) -> Result<Self> {
        let omegas: Vec<f64> = mem.psi.iter().map(|p| relevance(p, v)).collect();
        Self::with_weights(mem, omegas)
    }

    /// Context with externally supplied relevances.
    pub fn with_weights(mem: &LayerMemory, omegas: Vec<f64>) -> Result<Self> {
        if omegas.len() != mem.psi.len() {
            return dim_err(format!("{} weights for {} tasks", omegas.len(), mem.psi.len()));
        }
        let d = mem.dim();
        let mut data = Vec::with_capacity(mem.r_prime() * d);
        for (psi, &w) in mem.psi.iter().zip(&omegas) {
            let s = w.sqrt();
            data.extend(psi.vectors().as_slice().iter().map(|x| s * x));
        }
        Ok(Self { omegas, omega: Mat::from_raw(mem.r_prime(), d, data) })
    }

    /// `ΩᵀΩ = Σ_τ ω_τ Ψ_τᵀΨ_τ`.
    pub fn gram(&self) -> Mat {
        gemm(&self.omega.transpose(), &self.omega)
    }

    /// Modulated residual value `a·ΩᵀΩ·R`; zero when every `Ψ` is empty.
    pub fn modulate(&self, a: &Mat, r: &Mat) -> Result<Mat> {
        if a.cols() != self.omega.cols() || r.rows() != self.omega.cols() {
            return dim_err("dynamic memory operands do not match d");
        }
        if self.omega.rows() == 0 {
            return Ok(Mat::zeros(a.rows(), r.cols()));
        }
        let coeff = gemm(&gemm(a, &self.omega.transpose()), &self.omega);
        Ok(gemm(&coeff, r))
    }
}

/// Dynamic-memory context of every layer given the per-layer `S₁`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMemoryContext {
    pub layers: Vec<LayerContext>,
}

pub fn build_dm_context(mem: &FeatureMemory, s_class: &[Vec<f64>]) -> Result<DynamicMemoryContext> {
    if s_class.len() != mem.layers.len() {
        return dim_err(format!("{} feature rows for {} layers", s_class.len(), mem.layers.len()));
    }
    let layers = mem
        .layers
        .iter()
        .zip(s_class)
        .map(|(m, v)| LayerContext::build(m, v))
        .collect::<Result<_>>()?;
    Ok(DynamicMemoryContext { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn basis(rows: &[Vec<f64>]) -> Basis {
        Basis::from_rows(Mat::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn relevance_examples() {
        let psi = basis(&[unit(2, 0)]);
        assert_eq!(relevance(&psi, &unit(2, 0)), 1.0);
        assert_eq!(relevance(&psi, &unit(2, 1)), 0.0);
        let h = 0.5f64.sqrt();
        assert!((relevance(&psi, &[h, h]) - h).abs() < 1e-15);
        assert_eq!(relevance(&Basis::empty(2), &[1.0, 0.0]), 0.0);
        assert_eq!(relevance(&psi, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn rank_one_features_add_one_row() {
        let mut mem = FeatureMemory::new(1, 4);
        let f = Mat::from_rows(&[vec![1.0, 2.0, 0.0, 0.0], vec![2.0, 4.0, 0.0, 0.0]]).unwrap();
        let feats = TaskFeatures { keys: vec![f.clone()], values: vec![f.clone()], mean_final: vec![0.0; 4] };
        assert_eq!(update_feature_memory(&mut mem, &feats, 0.95).unwrap(), vec![1]);
        assert_eq!(mem.layers[0].phi_k.rank(), 1);
        // the same features again are fully explained
        assert_eq!(update_feature_memory(&mut mem, &feats, 0.95).unwrap(), vec![0]);
        assert_eq!(mem.layers[0].psi.len(), 2);
        assert!(mem.layers[0].psi[1].is_empty());
    }

    #[test]
    fn empty_psi_freezes_residual() {
        let ad = LayerAdapters::zeros(4, 2);
        let mut g = LayerAdapterGrads::zeros_like(&ad);
        g.a_r = Mat::from_raw(2, 4, vec![1.0; 8]);
        g.b_r = Mat::from_raw(4, 2, vec![1.0; 8]);
        project_residual_gradients(&mut g, &Basis::empty(4)).unwrap();
        assert_eq!(g.a_r.max_abs(), 0.0);
        assert_eq!(g.b_r.max_abs(), 0.0);
    }

    #[test]
    fn zero_weights_kill_residual() {
        let mut mem = LayerMemory::empty(3);
        mem.psi.push(basis(&[unit(3, 0)]));
        let ctx = LayerContext::with_weights(&mem, vec![0.0]).unwrap();
        let a = Mat::from_raw(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = ctx.modulate(&a, &Mat::identity(3)).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn rank_limit_enforced() {
        assert!(AdapterSet::new(1, 8, 5, true).is_err());
        assert!(AdapterSet::new(1, 8, 4, true).is_ok());
    }
}
