//! Backward pass against central finite differences.

mod common;

use common::gradcheck::{adapter_and_head_check, check, fixture, loss, HEAD, LABEL};
use common::head_cross_entropy;
use duallora::vit::ForwardMode;

#[test]
fn adapter_and_head_gradients_match_finite_differences() {
    for seed in 0..20 {
        let r = adapter_and_head_check(seed);
        assert!(r.failure.is_none(), "seed {seed}: {}", r.failure.unwrap());
    }
}

#[test]
fn backbone_gradients_match_finite_differences() {
    for seed in [3, 11] {
        let (model, image) = fixture(seed, false);
        let fwd = model.forward(&image, ForwardMode::Train).unwrap();
        let (_, dlogits) = head_cross_entropy(&fwd.logits, model.heads.range(HEAD), LABEL);
        let grads = model.backward(&fwd, &dlogits).unwrap();
        let bb = grads.backbone.expect("unfrozen backbone has gradients");
        let count = model.backbone.tensors().len();
        for k in 0..count {
            let mut m = model.clone();
            let r = check(&format!("backbone{k}"), &bb.tensors()[k], |i, h| {
                let orig = m.backbone.tensors()[k].as_slice()[i];
                m.backbone.tensors_mut()[k].as_mut_slice()[i] = orig + h;
                let v = loss(&m, &image);
                m.backbone.tensors_mut()[k].as_mut_slice()[i] = orig;
                v
            });
            assert!(r.failure.is_none(), "{}", r.failure.unwrap());
        }
    }
}

#[test]
fn backward_requires_training_forward() {
    let (model, image) = fixture(1, true);
    let fwd = model.forward(&image, ForwardMode::Infer).unwrap();
    assert!(model.backward(&fwd, &vec![0.0; 5]).is_err());
}
