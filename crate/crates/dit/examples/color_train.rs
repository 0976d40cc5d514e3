//! Trains the toy model on the synthetic colour task and prints the loss
//! every 50 steps: `cargo run --release --example color_train -- 2000 4`.

use std::time::Instant;

use layered_core::Exec;
use layered_dit::{task, train, TrainConfig, ToyDit, ToyModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(200);
    let batch = args.get(1).copied().unwrap_or(4);
    let cfg = ToyModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = task::color_dataset(&cfg, 512, &mut rng);
    let mut model = ToyDit::new(cfg, 0).expect("valid config");
    let tc = TrainConfig { steps, batch_size: batch, ..Default::default() };
    let start = Instant::now();
    let report = train(&mut model, &data, &tc, Exec::default(), |step, _| {
        if step % 50 == 49 {
            eprintln!("step {}: {:.2}s", step + 1, start.elapsed().as_secs_f64());
        }
    })
    .expect("training runs");
    let window = 100.min(steps);
    println!(
        "first {window}: {:.4}  last {window}: {:.4}  elapsed {:.1}s",
        report.mean(0..window),
        report.mean(steps - window..steps),
        start.elapsed().as_secs_f64()
    );
    let held_out = task::color_dataset(model.config(), 32, &mut rng);
    let (on, off) = task::cue_adherence(&model, &held_out, 1000, model.config().denoise_steps).expect("sampling runs");
    println!("cue L1 with sigma=1: {on:.4}  sigma=0: {off:.4}");
}
