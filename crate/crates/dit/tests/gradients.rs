use layered_core::compositor::CueKind;
use layered_core::Raster;
use layered_dit::model::ToyDit;
use layered_dit::{seeded_noise, Conditioning, ToyModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ToyModelConfig {
    ToyModelConfig {
        image_size: 8,
        d_model: 16,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        cue_resolution: 4,
        lora_rank_content: 4,
        lora_rank_control: 8,
        ..Default::default()
    }
}

fn fixture() -> (ToyDit, Raster, Raster, f64, Conditioning) {
    let mut model = ToyDit::new(small_config(), 11).unwrap();
    model.randomize_lora(12, 0.2);
    let x = Raster::from_fn(8, 8, 3, |a, b, c| ((a * 5 + b * 3 + c) % 9) as f64 / 8.0);
    let eps = seeded_noise(8, 8, 3, 13);
    let ctx = Raster::from_fn(8, 8, 3, |a, b, c| ((a + 2 * b + c) % 4) as f64 / 3.0);
    let cond = Conditioning::new(1)
        .with_context(ctx)
        .with_cue(CueKind::Color, Raster::from_fn(4, 4, 3, |a, b, c| ((a + b + c) % 3) as f64 / 2.0), 1.5)
        .with_cue(CueKind::Structural, Raster::from_fn(4, 4, 1, |a, b, _| ((a + b) % 2) as f64), 0.7);
    (model, x, eps, 0.37, cond)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let (model, x, eps, t, cond) = fixture();
    let (_, grads) = model.loss_and_grads(&x, &eps, t, &cond).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-4;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.params().names().to_vec();
    // the spatial-cue tensors are unused by this conditioning and have zero gradient
    for (id, name) in names.iter().enumerate() {
        if name.contains("cue0") {
            continue;
        }
        let n = model.params().values()[id].len();
        for _ in 0..2 {
            let idx = rng.random_range(0..n);
            let analytic = grads[id].as_slice().unwrap()[idx];
            let mut plus = model.clone();
            plus.params_mut().values_mut()[id].as_slice_mut().unwrap()[idx] += h;
            let mut minus = model.clone();
            minus.params_mut().values_mut()[id].as_slice_mut().unwrap()[idx] -= h;
            let fd = (plus.loss(&x, &eps, t, &cond).unwrap() - minus.loss(&x, &eps, t, &cond).unwrap()) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs());
            let rel = if denom < 1e-9 { 0.0 } else { (analytic - fd).abs() / denom };
            worst = worst.max(rel);
            assert!(rel < 1e-3, "{name}[{idx}]: analytic {analytic:e} vs numeric {fd:e} (rel {rel:e})");
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} parameters checked");
    println!("checked {checked} entries, worst relative error {worst:e}");
}

#[test]
fn zero_output_loss_is_unit_in_expectation() {
    let cfg = small_config();
    let mut model = ToyDit::new(cfg, 1).unwrap();
    for name in ["final.out.w", "final.out.b"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().values_mut()[id].fill(0.0);
    }
    let x = Raster::new(8, 8, 3);
    let cond = Conditioning::new(0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 10_000 / (8 * 8 * 3) + 1;
    let mut total = 0.0;
    for _ in 0..draws {
        let eps = model.noise(&mut rng);
        total += model.loss(&x, &eps, rng.random(), &cond).unwrap();
    }
    let mean = total / draws as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean loss {mean}");
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let x = Raster::from_fn(4, 4, 3, |a, b, _| (a * b) as f64 / 9.0);
    let eps = seeded_noise(4, 4, 3, 3);
    let target = layered_dit::rf_target(&x, &eps).unwrap();
    assert_eq!(layered_core::metrics::l2(&target, &layered_dit::rf_target(&x, &eps).unwrap()).unwrap(), 0.0);
}
