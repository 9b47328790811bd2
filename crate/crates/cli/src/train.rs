//! Mini-batch Adam training and needle evaluation for the toy models.

use longgen_core::model::{adam_step, forward, loss_and_grads_masked, AdamConfig, AdamState};
use longgen_core::{HybridModel, LayerMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::task::{Example, SyntheticTask, DEPTH_BUCKETS};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    /// Linear warm-up steps; cosine decay to `0.1 · peak_lr` afterwards.
    pub warmup: usize,
    /// Training lengths are drawn log-uniformly from `[min_len, task.seq_len]`.
    pub min_len: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            peak_lr: 5e-3,
            warmup: 50,
            min_len: 32,
            clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak_lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = 0.1 * self.peak_lr;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Log-uniform length in `[lo, hi]`: short, cheap sequences dominate while
/// every length up to `hi` is still seen.
fn sample_len(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let x = rng.gen_range((lo as f64).ln()..=((hi + 1) as f64).ln()).exp();
    (x as usize).clamp(lo, hi)
}

/// Trains in place. Stops with [`CliError::Diverged`] on a non-finite loss
/// or gradient.
pub fn train(
    model: &mut HybridModel,
    map: &LayerMap,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>, CliError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let mut log = Vec::with_capacity(cfg.steps);
    let min_len = cfg.min_len.clamp(3, task.seq_len);
    for step in 0..cfg.steps {
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let len = sample_len(&mut rng, min_len, task.seq_len);
            let ex = task.with_len(len).sample(&mut rng);
            let (l, g) = loss_and_grads_masked(model, map, &ex.tokens, &ex.targets)?;
            loss += l;
            grads.add_assign(&g);
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        grads.scale(inv);
        let grad_norm = grads.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(CliError::Diverged { step, loss });
        }
        if cfg.clip > 0.0 && grad_norm > cfg.clip {
            grads.scale(cfg.clip / grad_norm);
        }
        let lr = cfg.lr_at(step);
        let adam = AdamConfig {
            lr,
            ..AdamConfig::default()
        };
        adam_step(model, &grads, &mut state, &adam)?;
        let rec = TrainRecord {
            step,
            loss,
            lr,
            grad_norm,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Needle accuracy overall and per depth bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    pub buckets: [(usize, usize); DEPTH_BUCKETS],
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.correct as f64 / self.total as f64
    }

    pub fn bucket_accuracy(&self, b: usize) -> Option<f64> {
        let (c, t) = self.buckets[b];
        (t > 0).then(|| c as f64 / t as f64)
    }
}

/// Fixed evaluation set: the same seed gives the same sequences.
pub fn eval_set(task: &SyntheticTask, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| task.sample(&mut rng)).collect()
}

/// Exact-match accuracy of the argmax prediction at every targeted position.
pub fn evaluate(model: &HybridModel, map: &LayerMap, set: &[Example]) -> Result<EvalReport, CliError> {
    let mut report = EvalReport {
        correct: 0,
        total: 0,
        buckets: [(0, 0); DEPTH_BUCKETS],
    };
    for ex in set {
        let logits = forward(model, map, &ex.tokens)?;
        for (pos, target) in ex.targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let row = logits.row(pos);
            let pred = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap_or(0);
            let hit = usize::from(pred == target);
            report.correct += hit;
            report.total += 1;
            let b = &mut report.buckets[ex.depth_bucket()];
            b.0 += hit;
            b.1 += 1;
        }
    }
    Ok(report)
}
