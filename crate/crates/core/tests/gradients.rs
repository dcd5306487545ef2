use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reuse_attn::attention::AttentionConfig;
use reuse_attn::backbone::{synthetic_images, UniFormConfig, UniFormModel};
use reuse_attn::verify::{attention_gradient_error, GRADIENT_TOLERANCE};
use reuse_attn::{Tensor64, UniFormModel64};

#[test]
fn reuse_backward_over_random_small_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in 0..24 {
        let h = rng.random_range(1..=4usize);
        let d = rng.random_range(1..=8 / h);
        let gh = rng.random_range(1..=2usize);
        let gw = rng.random_range(1..=4usize);
        let cfg = AttentionConfig::reuse(gh * gw, d * h, h, (gh, gw)).unwrap();
        let err = attention_gradient_error(&cfg, t).unwrap();
        assert!(err <= GRADIENT_TOLERANCE, "N={} d={d} h={h}: {err:e}", gh * gw);
    }
}

#[test]
fn mha_backward_over_random_small_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for t in 0..24 {
        let h = rng.random_range(1..=4usize);
        let d = rng.random_range(1..=8 / h);
        let n = rng.random_range(1..=8usize);
        let cfg = AttentionConfig::multi_head(n, d * h, h).unwrap();
        let err = attention_gradient_error(&cfg, t).unwrap();
        assert!(err <= GRADIENT_TOLERANCE, "N={n} d={d} h={h}: {err:e}");
    }
}

#[test]
fn spec_sized_examples() {
    let reuse = AttentionConfig::reuse(6, 4, 2, (2, 3)).unwrap();
    assert!(attention_gradient_error(&reuse, 1).unwrap() <= GRADIENT_TOLERANCE);
    let mha = AttentionConfig::multi_head(5, 4, 2).unwrap();
    assert!(attention_gradient_error(&mha, 2).unwrap() <= GRADIENT_TOLERANCE);
}

fn loss(model: &UniFormModel64, image: &Tensor64, weights: &Tensor64) -> f64 {
    let batch = image.clone().reshape(&[1, 32, 32, 3]).unwrap();
    let logits = model.forward(&batch).unwrap();
    logits.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn backbone_gradient_per_block_matches_finite_differences() {
    let cfg = UniFormConfig::tiny().with_resolution(32).with_num_classes(5);
    let model = UniFormModel::<f64>::build(&cfg, 5).unwrap();
    let image = synthetic_images::<f64>(1, 32, 6).reshape(&[32, 32, 3]).unwrap();
    let weights = Tensor64::from_fn(&[5], |i| 0.5 - 0.3 * i as f64);
    let (_, grad) = model.backward(&image, &weights).unwrap();
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor64> = grad.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let blocks = ["stage1.0.", "stage2.0.", "stage2.1.", "stage3.0.", "stage3.1."];
    for prefix in blocks {
        let candidates: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(prefix)).collect();
        let pi = candidates[rng.random_range(0..candidates.len())];
        let ei = rng.random_range(0..analytic[pi].len());
        let eps = 1e-6;
        let mut m = model.clone();
        let base = m.parameters_mut()[pi].data()[ei];
        m.parameters_mut()[pi].data_mut()[ei] = base + eps;
        let up = loss(&m, &image, &weights);
        m.parameters_mut()[pi].data_mut()[ei] = base - eps;
        let down = loss(&m, &image, &weights);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[pi].data()[ei];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "{}[{ei}] analytic {a} numeric {numeric}", names[pi]);
    }
}
