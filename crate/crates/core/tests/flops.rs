mod common;

use common::gradcheck::small_config;
use duallora::flops::{
    adapter_flops, report, scheme_flops, svd_flops, vit_forward, AdapterKind, ArchParams, Convention, Phase,
    Scheme,
};
use duallora::linalg::flop_counter;
use duallora::vit::{ForwardMode, Head, VitMini};

fn with_batch(b: u64) -> ArchParams {
    ArchParams { batch: b, ..ArchParams::vit_base() }
}

fn flops(s: Scheme, ph: Phase, p: &ArchParams, c: Convention) -> f64 {
    let mut p = *p;
    if s.is_prompt() {
        p.prompt = duallora::flops::PromptParams::published(s);
    }
    scheme_flops(s, ph, &p, c).unwrap().flops
}

#[test]
fn inference_is_linear_in_batch() {
    for s in Scheme::ALL {
        let one = flops(s, Phase::Infer, &with_batch(1), Convention::Consistent);
        let many = flops(s, Phase::Infer, &with_batch(6), Convention::Consistent);
        assert!((many - 6.0 * one).abs() <= 1e-9 * many, "{s}");
    }
    assert_eq!(vit_forward(12, 8, 197, 768), 8 * vit_forward(12, 1, 197, 768));
    let a1 = adapter_flops(AdapterKind::Duallora, 12, 1, 197, 768, 10, Convention::Consistent);
    let a8 = adapter_flops(AdapterKind::Duallora, 12, 8, 197, 768, 10, Convention::Consistent);
    assert_eq!(a8, 8 * a1);
}

#[test]
fn training_never_costs_less_than_inference() {
    for p in [ArchParams::vit_base(), ArchParams { layers: 6, batch: 2, tokens: 5, dim: 8, rank: 2, samples: 3, prompt: None }] {
        for conv in [Convention::Consistent, Convention::StrictPaper] {
            for s in Scheme::ALL {
                assert!(flops(s, Phase::Infer, &p, conv) <= flops(s, Phase::Train, &p, conv), "{s} {conv:?}");
            }
        }
    }
}

#[test]
fn duallora_training_decomposes() {
    let p = ArchParams::vit_base();
    let (l, b, n, d, r, m) = (p.layers, p.batch, p.tokens, p.dim, p.rank, p.samples);
    let want = 3 * vit_forward(l, b, n, d) + 12 * l * b * n * d * r + l * (2 * d * m * m + 11 * m * m * m);
    assert_eq!(flops(Scheme::Duallora, Phase::Train, &p, Convention::Consistent), want as f64);
    assert_eq!(svd_flops(d, m), 2 * d * m * m + 11 * m * m * m);
    let strict = 3 * vit_forward(l, b, n, d) + 12 * l * n * d * r + l * svd_flops(d, m);
    assert_eq!(flops(Scheme::Duallora, Phase::Train, &p, Convention::StrictPaper), strict as f64);
}

#[test]
fn inflora_small_example() {
    let p = ArchParams { layers: 2, batch: 1, tokens: 4, dim: 8, rank: 2, samples: 3, prompt: None };
    assert_eq!(flops(Scheme::Inflora, Phase::Infer, &p, Convention::Consistent), 14336.0);
    assert_eq!(flops(Scheme::Vit, Phase::Infer, &p, Convention::Consistent), 13312.0);
}

#[test]
fn report_covers_every_scheme_and_phase() {
    let r = report(&ArchParams::vit_base(), Convention::Consistent).unwrap();
    for s in Scheme::ALL {
        for ph in [Phase::Train, Phase::Infer] {
            assert_eq!(r.iter().filter(|p| p.scheme == s && p.phase == ph).count(), 1);
        }
    }
    assert!(r.iter().all(|p| p.flops.is_finite() && p.flops > 0.0));
    assert!(report(&ArchParams { layers: 0, ..ArchParams::vit_base() }, Convention::Consistent).is_err());
}

#[test]
fn counted_forward_matches_the_model() {
    let mut model = VitMini::new(small_config(), 1).unwrap();
    model.backbone.freeze();
    model.heads.push(Head::zeros(8, 3));
    let image = vec![0.5; 16];
    let (out, counted) = flop_counter::measure(|| model.forward(&image, ForwardMode::Infer).unwrap());
    assert_eq!(out.logits.len(), 3);
    let c = &model.config;
    assert_eq!(counted, vit_forward(c.layers as u64, 1, c.seq_len() as u64, c.embed_dim as u64));
}
