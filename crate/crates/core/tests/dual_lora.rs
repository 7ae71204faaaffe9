mod common;

use common::gradcheck::fixture;
use common::{naive_matmul, random_mat};
use duallora::dual_lora::{
    collect_features, project_orthogonal_gradients, project_residual_gradients, relevance,
    update_feature_memory, FeatureMemory, LayerAdapterGrads, LayerContext, LayerMemory, TaskFeatures,
};
use duallora::linalg::{thin_svd, Basis};
use duallora::rng::Stream;
use duallora::vit::ForwardMode;
use duallora::Mat;
use proptest::prelude::*;

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn basis(rows: &[Vec<f64>]) -> Basis {
    Basis::from_rows(Mat::from_rows(rows).unwrap()).unwrap()
}

fn random_basis(d: usize, r: usize, rng: &mut Stream) -> Basis {
    Basis::from_rows(thin_svd(&random_mat(r, d, rng)).unwrap().vt).unwrap()
}

/// `m` random rows inside span of the given coordinate axes.
fn features_on_axes(m: usize, d: usize, axes: &[usize], rng: &mut Stream) -> Mat {
    let mut f = Mat::zeros(m, d);
    for i in 0..m {
        for &a in axes {
            f[(i, a)] = rng.normal();
        }
    }
    f
}

fn one_layer(f: &Mat) -> TaskFeatures {
    TaskFeatures { keys: vec![f.clone()], values: vec![f.clone()], mean_final: vec![0.0; f.cols()] }
}

#[test]
fn single_task_full_weight_is_transparent_inside_its_span() {
    let mut mem = LayerMemory::empty(4);
    mem.psi.push(basis(&[unit(4, 0), unit(4, 1)]));
    let ctx = LayerContext::with_weights(&mem, vec![1.0]).unwrap();
    let mut rng = Stream::new(1, 0);
    let a = features_on_axes(3, 4, &[0, 1], &mut rng);
    let r = random_mat(4, 4, &mut rng);
    let got = ctx.modulate(&a, &r).unwrap();
    assert!(got.sub(&naive_matmul(&a, &r)).unwrap().max_abs() < 1e-14);
}

#[test]
fn all_zero_weights_remove_the_residual() {
    let mut rng = Stream::new(2, 0);
    let mut mem = LayerMemory::empty(6);
    mem.psi.push(random_basis(6, 2, &mut rng));
    mem.psi.push(random_basis(6, 1, &mut rng));
    let ctx = LayerContext::with_weights(&mem, vec![0.0, 0.0]).unwrap();
    let out = ctx.modulate(&random_mat(3, 6, &mut rng), &random_mat(6, 6, &mut rng)).unwrap();
    assert_eq!(out.max_abs(), 0.0);
}

#[test]
fn weights_select_tasks_componentwise() {
    let mut rng = Stream::new(3, 0);
    let mut mem = LayerMemory::empty(6);
    let p1 = basis(&[unit(6, 0), unit(6, 1)]);
    let p2 = basis(&[unit(6, 2)]);
    mem.psi.push(p1.clone());
    mem.psi.push(p2);
    let ctx = LayerContext::with_weights(&mem, vec![1.0, 0.0]).unwrap();
    assert_eq!(ctx.omega.shape(), (3, 6));
    let a = random_mat(4, 6, &mut rng);
    let r = random_mat(6, 6, &mut rng);
    let want = naive_matmul(&naive_matmul(&a, &p1.projector()), &r);
    assert!(ctx.modulate(&a, &r).unwrap().sub(&want).unwrap().max_abs() < 1e-13);
    let gram = ctx.gram();
    for i in 0..6 {
        for j in 0..6 {
            let want = if i == j && i < 2 { 1.0 } else { 0.0 };
            assert!((gram[(i, j)] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn orthogonal_tasks_give_orthogonal_residual_bases() {
    let mut rng = Stream::new(4, 0);
    let mut mem = FeatureMemory::new(1, 8);
    let f1 = features_on_axes(10, 8, &[0, 1], &mut rng);
    let f2 = features_on_axes(10, 8, &[2, 3], &mut rng);
    assert_eq!(update_feature_memory(&mut mem, &one_layer(&f1), 0.99).unwrap(), vec![2]);
    assert_eq!(update_feature_memory(&mut mem, &one_layer(&f2), 0.99).unwrap(), vec![2]);
    let l = &mem.layers[0];
    let cross = naive_matmul(l.psi[0].vectors(), &l.psi[1].vectors().transpose());
    assert!(cross.max_abs() < 1e-12);
    assert_eq!(l.phi_v.rank(), 4);
    assert!(l.phi_v.orthonormality_error() < 1e-12);
    assert_eq!(l.r_prime(), 4);
}

#[test]
fn repeated_features_add_nothing() {
    let mut rng = Stream::new(5, 0);
    let mut mem = FeatureMemory::new(1, 8);
    let f = features_on_axes(10, 8, &[1, 4], &mut rng);
    update_feature_memory(&mut mem, &one_layer(&f), 0.95).unwrap();
    assert_eq!(update_feature_memory(&mut mem, &one_layer(&f), 0.95).unwrap(), vec![0]);
    assert!(mem.layers[0].latest_psi().is_empty());
    assert_eq!(mem.tasks(), 2);
}

#[test]
fn zero_features_add_nothing() {
    let mut mem = FeatureMemory::new(1, 4);
    assert_eq!(update_feature_memory(&mut mem, &one_layer(&Mat::zeros(3, 4)), 0.9).unwrap(), vec![0]);
}

#[test]
fn gradient_projections_annihilate_stored_directions() {
    let mut rng = Stream::new(6, 0);
    let (d, r) = (8, 2);
    let mut mem = LayerMemory::empty(d);
    mem.phi_k = random_basis(d, 3, &mut rng);
    mem.phi_v = random_basis(d, 3, &mut rng);
    let psi = random_basis(d, 3, &mut rng);
    let mut g = LayerAdapterGrads {
        a_k: random_mat(r, d, &mut rng),
        b_k: random_mat(d, r, &mut rng),
        a_v: random_mat(r, d, &mut rng),
        b_v: random_mat(d, r, &mut rng),
        a_r: random_mat(r, d, &mut rng),
        b_r: random_mat(d, r, &mut rng),
    };
    let before = g.clone();
    project_orthogonal_gradients(&mut g, &mem).unwrap();
    project_residual_gradients(&mut g, &psi).unwrap();
    assert!(naive_matmul(mem.phi_k.vectors(), &g.a_k.transpose()).max_abs() < 1e-12);
    assert!(naive_matmul(mem.phi_v.vectors(), &g.b_v).max_abs() < 1e-12);
    // B_r stays inside span(Ψ): removing that span leaves nothing
    let outside = g.b_r.sub(&naive_matmul(&psi.projector(), &g.b_r)).unwrap();
    assert!(outside.max_abs() < 1e-12);
    assert_eq!(g.b_k, before.b_k);
    assert_eq!(g.a_v, before.a_v);
    assert_eq!(g.a_r, before.a_r);
}

#[test]
fn features_are_the_class_token_taps() {
    let (model, _) = fixture(8, true);
    let mut rng = Stream::new(8, 5);
    let images: Vec<Vec<f64>> = (0..5).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
    let feats = collect_features(&model, &images, 5, 77).unwrap();
    let taps: Vec<_> = images
        .iter()
        .map(|im| model.forward_tapped(im, ForwardMode::Infer).unwrap().taps.unwrap())
        .collect();
    for l in 0..2 {
        assert_eq!(feats.keys[l].shape(), (5, 8));
        for i in 0..5 {
            let hit = taps.iter().any(|t| {
                t[l].q_class.as_slice() == feats.keys[l].row(i) && t[l].s_class.as_slice() == feats.values[l].row(i)
            });
            assert!(hit, "layer {l} row {i} is not a tap of any image");
        }
    }
    for c in 0..8 {
        let mean = taps.iter().map(|t| t[1].s_class[c]).sum::<f64>() / 5.0;
        assert!((feats.mean_final[c] - mean).abs() < 1e-12);
    }
    assert!(collect_features(&model, &images, 6, 0).is_err());
    assert!(collect_features(&model, &images, 0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn relevance_is_bounded(seed in 0u64..1_000_000, d in 2usize..10, r_frac in 0.05f64..1.0) {
        let mut rng = Stream::new(seed, 9);
        let r = (((d as f64) * r_frac) as usize).max(1);
        let psi = random_basis(d, r, &mut rng);
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let w = relevance(&psi, &v);
        prop_assert!(w >= 0.0);
        prop_assert!(w <= 1.0 / r as f64 + 1e-12);
    }
}
