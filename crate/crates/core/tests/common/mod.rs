//! Test-only oracles, independent of the library's own numerical paths.
#![allow(dead_code)]

pub mod gradcheck;

use duallora::config::{DatasetSpec, RunConfig};
use duallora::data::SyntheticTaskSpec;
use duallora::rng::Stream;
use duallora::trainer::{CLConfig, Mode};
use duallora::vit::EncoderConfig;
use duallora::Mat;

/// Three two-class tasks on 4×4 images with a d=8, L=2 encoder; runs in
/// well under a second.
pub fn tiny_run_config(mode: Mode, seed: u64) -> RunConfig {
    RunConfig {
        encoder: EncoderConfig { layers: 2, embed_dim: 8, image_side: 4, patch_side: 2, channels: 1, ffn_ratio: 2 },
        train: CLConfig {
            mode,
            seed,
            epochs: 2,
            batch: 8,
            lr: 5e-3,
            rank: 2,
            samples: 10,
            pretrain_epochs: 2,
            ..CLConfig::default()
        },
        dataset: DatasetSpec::Synthetic(SyntheticTaskSpec {
            tasks: 3,
            classes_per_task: 2,
            train_per_class: 10,
            test_per_class: 5,
            image_side: 4,
            channels: 1,
            separation: 10.0,
            noise: 1.0,
            pretext_classes: 4,
            pretext_per_class: 10,
            task_anchor_weight: 0.0,
        }),
        out_dir: None,
        strict_paper: false,
    }
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut Stream) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Naive triple-loop product.
pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols(), b.rows());
    let mut out = Mat::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by the classical two-sided cyclic Jacobi
/// method, sorted descending.
pub fn jacobi_eigenvalues(sym: &Mat) -> Vec<f64> {
    let n = sym.rows();
    let mut a = sym.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off <= 1e-32 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// `M·Mᵀ` (or `Mᵀ·M` when `M` is tall), whichever is the smaller Gram matrix.
pub fn small_gram(m: &Mat) -> Mat {
    if m.rows() <= m.cols() {
        naive_matmul(m, &m.transpose())
    } else {
        naive_matmul(&m.transpose(), m)
    }
}

/// Central finite-difference derivative of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Softmax cross-entropy over `logits[range]` with target index `label`
/// inside the range, evaluated directly from the definition.
pub fn head_cross_entropy(logits: &[f64], range: std::ops::Range<usize>, label: usize) -> (f64, Vec<f64>) {
    let z = &logits[range.clone()];
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - z[label];
    let mut grad = vec![0.0; logits.len()];
    for (i, v) in z.iter().enumerate() {
        grad[range.start + i] = (v - lse).exp() - if i == label { 1.0 } else { 0.0 };
    }
    (loss, grad)
}

pub fn orthonormality_error(v: &Mat) -> f64 {
    let g = naive_matmul(v, &v.transpose());
    g.sub(&Mat::identity(v.rows())).unwrap().max_abs()
}

/// Worst relative error between σᵢ and the square roots of the Jacobi
/// eigenvalues of the Gram matrix over `count` random matrices with shapes up
/// to 32×64, plus the worst orthonormality and reconstruction errors.
pub fn svd_oracle_sweep(count: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = Stream::new(seed, 77);
    let (mut worst_sigma, mut worst_ortho, mut worst_recon) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..count {
        let rows = 1 + rng.below(32);
        let cols = 1 + rng.below(64);
        let m = random_mat(rows, cols, &mut rng);
        let svd = duallora::linalg::thin_svd(&m).unwrap();
        let eig = jacobi_eigenvalues(&small_gram(&m));
        for (s, l) in svd.sigma.iter().zip(&eig) {
            let root = l.max(0.0).sqrt();
            let rel = (s - root).abs() / root.max(1e-300);
            worst_sigma = worst_sigma.max(rel);
        }
        worst_ortho = worst_ortho.max(orthonormality_error(&svd.vt));
        worst_ortho = worst_ortho.max(orthonormality_error(&svd.u.transpose()));
        let recon = svd.reconstruct().sub(&m).unwrap().max_abs() / m.max_abs();
        worst_recon = worst_recon.max(recon);
    }
    (worst_sigma, worst_ortho, worst_recon)
}
