//! Finite-difference gradient checks on a d=8, L=2 model.

use super::head_cross_entropy;
use duallora::dual_lora::AdapterSet;
use duallora::rng::Stream;
use duallora::vit::{EncoderConfig, ForwardMode, Head, VitMini};
use duallora::Mat;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-9;

pub fn small_config() -> EncoderConfig {
    EncoderConfig { layers: 2, embed_dim: 8, image_side: 4, patch_side: 2, channels: 1, ffn_ratio: 4 }
}

fn fill(m: &mut Mat, std: f64, rng: &mut Stream) {
    for v in m.as_mut_slice() {
        *v = std * rng.normal();
    }
}

pub fn fixture(seed: u64, frozen: bool) -> (VitMini, Vec<f64>) {
    let mut model = VitMini::new(small_config(), seed).unwrap();
    if frozen {
        model.backbone.freeze();
    }
    let mut rng = Stream::new(seed, 99);
    model.adapters = AdapterSet::new(2, 8, 2, true).unwrap();
    for ad in &mut model.adapters.layers {
        for m in [&mut ad.a_k, &mut ad.b_k, &mut ad.a_v, &mut ad.b_v, &mut ad.a_r, &mut ad.b_r] {
            fill(m, 0.4, &mut rng);
        }
        for m in [&mut ad.merged_k, &mut ad.merged_v, &mut ad.merged_r] {
            fill(m, 0.1, &mut rng);
        }
    }
    for classes in [2, 3] {
        let mut h = Head::zeros(8, classes);
        fill(&mut h.weight, 0.5, &mut rng);
        fill(&mut h.bias, 0.1, &mut rng);
        model.heads.push(h);
    }
    let image = (0..16).map(|_| rng.normal()).collect();
    (model, image)
}

pub const HEAD: usize = 1;
pub const LABEL: usize = 2;

pub fn loss(model: &VitMini, image: &[f64]) -> f64 {
    let out = model.forward(image, ForwardMode::Infer).unwrap();
    head_cross_entropy(&out.logits, model.heads.range(HEAD), LABEL).0
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Default)]
pub struct GradCheck {
    /// Largest relative error over entries with non-negligible gradient.
    pub worst_rel: f64,
    /// First entry outside `REL_TOL·scale + ABS_FLOOR`.
    pub failure: Option<String>,
}

impl GradCheck {
    fn merge(&mut self, other: GradCheck) {
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        if self.failure.is_none() {
            self.failure = other.failure;
        }
    }
}

pub fn check(name: &str, analytic: &Mat, mut perturb: impl FnMut(usize, f64) -> f64) -> GradCheck {
    let mut out = GradCheck::default();
    for i in 0..analytic.as_slice().len() {
        let plus = perturb(i, STEP);
        let minus = perturb(i, -STEP);
        let fd = (plus - minus) / (2.0 * STEP);
        let an = analytic.as_slice()[i];
        let err = (fd - an).abs();
        let scale = fd.abs().max(an.abs());
        if err > REL_TOL * scale + ABS_FLOOR && out.failure.is_none() {
            out.failure = Some(format!("{name}[{i}]: analytic {an:.9e}, finite difference {fd:.9e}"));
        }
        if scale > 1e-6 {
            out.worst_rel = out.worst_rel.max(err / scale);
        }
    }
    out
}

/// Runs the finite-difference comparison for every adapter factor and head.
pub fn adapter_and_head_check(seed: u64) -> GradCheck {
    let (model, image) = fixture(seed, true);
    let fwd = model.forward(&image, ForwardMode::Train).unwrap();
    let (_, dlogits) = head_cross_entropy(&fwd.logits, model.heads.range(HEAD), LABEL);
    let grads = model.backward(&fwd, &dlogits).unwrap();
    assert!(grads.backbone.is_none());

    let mut worst = GradCheck::default();
    for l in 0..2 {
        for k in 0..6 {
            let analytic = grads.adapters[l].tensors()[k].clone();
            let mut m = model.clone();
            worst.merge(check(&format!("layer{l}.factor{k}"), &analytic, |i, h| {
                let slot = {
                    let ad = &mut m.adapters.layers[l];
                    [&mut ad.a_k, &mut ad.b_k, &mut ad.a_v, &mut ad.b_v, &mut ad.a_r, &mut ad.b_r]
                        .into_iter()
                        .nth(k)
                        .unwrap()
                };
                let orig = slot.as_slice()[i];
                slot.as_mut_slice()[i] = orig + h;
                let v = loss(&m, &image);
                let ad = &mut m.adapters.layers[l];
                let slot = [&mut ad.a_k, &mut ad.b_k, &mut ad.a_v, &mut ad.b_v, &mut ad.a_r, &mut ad.b_r]
                    .into_iter()
                    .nth(k)
                    .unwrap();
                slot.as_mut_slice()[i] = orig;
                v
            }));
        }
    }
    for t in 0..2 {
        let mut m = model.clone();
        worst.merge(check("head.weight", &grads.heads[t].weight, |i, h| {
            let orig = m.heads.heads[t].weight.as_slice()[i];
            m.heads.heads[t].weight.as_mut_slice()[i] = orig + h;
            let v = loss(&m, &image);
            m.heads.heads[t].weight.as_mut_slice()[i] = orig;
            v
        }));
        worst.merge(check("head.bias", &grads.heads[t].bias, |i, h| {
            let orig = m.heads.heads[t].bias.as_slice()[i];
            m.heads.heads[t].bias.as_mut_slice()[i] = orig + h;
            let v = loss(&m, &image);
            m.heads.heads[t].bias.as_mut_slice()[i] = orig;
            v
        }));
    }
    // the head outside the loss receives nothing
    if grads.heads[0].weight.max_abs() != 0.0 || grads.heads[0].bias.max_abs() != 0.0 {
        worst.failure.get_or_insert_with(|| "inactive head received a gradient".into());
    }
    worst
}
