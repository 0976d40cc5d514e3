//! Rectified-flow training with AdamW.

use std::io::Write;
use std::path::Path;

use layered_core::{Exec, Raster};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DitError, Result};
use crate::model::{Conditioning, ToyDit};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x: Raster,
    pub cond: Conditioning,
}

/// The random draws of one example in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw {
    pub t: f64,
    pub eps: Raster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the model's configured learning rate.
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Train only LoRA tensors; every other tensor stays bitwise fixed.
    pub freeze_base: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seed: 0,
            learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            freeze_base: false,
        }
    }
}

/// Mean loss and mean gradients over a batch. Per-example work runs under
/// `exec`; results are reduced in index order so the sum is deterministic.
pub fn rf_loss(
    model: &ToyDit,
    batch: &[&TrainExample],
    draws: &[FlowDraw],
    exec: Exec,
) -> Result<(f64, Vec<Array2<f64>>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(DitError::Input(format!("batch of {} with {} draws", batch.len(), draws.len())));
    }
    let per = exec.map_range(batch.len(), |i| model.loss_and_grads(&batch[i].x, &draws[i].eps, draws[i].t, &batch[i].cond));
    let mut loss = 0.0;
    let mut total: Option<Vec<Array2<f64>>> = None;
    for r in per {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        }
    }
    let n = batch.len() as f64;
    let mut grads = total.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v / n));
    Ok((loss / n, grads))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u32,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            t: 0,
        }
    }

    /// Updates the parameters whose `trainable` flag is set.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], trainable: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
            ndarray::Zip::from(&mut params[i])
                .and(&grads[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + wd * *p);
                });
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn mean(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Draws `t ~ U[0, 1]` and `ε ~ N(0, I)` for one example.
pub fn draw(model: &ToyDit, rng: &mut impl Rng) -> FlowDraw {
    let t = rng.random::<f64>();
    FlowDraw { t, eps: model.noise(rng) }
}

/// Trains `model` in place. Batches are drawn uniformly with replacement
/// from `data`; all randomness comes from `cfg.seed`.
pub fn train(
    model: &mut ToyDit,
    data: &[TrainExample],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(DitError::Config("steps and batch size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(DitError::Input("training set is empty".into()));
    }
    let lr = cfg.learning_rate.unwrap_or(model.config().learning_rate);
    let shapes = model.params().shapes();
    let trainable: Vec<bool> = (0..shapes.len()).map(|i| !cfg.freeze_base || model.params().is_lora(i)).collect();
    let mut opt = AdamW::new(&shapes, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let batch: Vec<&TrainExample> = (0..cfg.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let draws: Vec<FlowDraw> = (0..cfg.batch_size).map(|_| draw(model, &mut rng)).collect();
        let (loss, grads) = rf_loss(model, &batch, &draws, exec)?;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(DitError::Diverged { step, loss });
        }
        opt.step(model.params_mut().values_mut(), &grads, &trainable);
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok(report)
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}
