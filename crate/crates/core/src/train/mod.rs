//! Data, objectives and the two training stages.

pub mod autoencoder;
pub mod data;
pub mod diffusion;
pub mod losses;
pub mod one_stage;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use autoencoder::{pretrain_autoencoder, AeStepRecord, AeTrainer};
pub use data::{make_synthetic_dataset, Shape};
pub use diffusion::{
    diffusion_losses, prepare_items, train_diffusion, DiffStepRecord, DiffusionTrainer, LossWeights, PreparedItem,
};
pub use one_stage::{train_one_stage, OneStageRecord, OneStageTrainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up length in steps.
    #[serde(default)]
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    #[serde(default = "default_final_ratio")]
    pub final_lr_ratio: f64,
}

fn default_final_ratio() -> f64 {
    0.05
}

/// Learning-rate multiplier at `step`: linear warm-up then cosine decay.
pub fn cosine_lr(s: &StageSchedule, step: usize) -> f64 {
    if step < s.warmup {
        return (step + 1) as f64 / s.warmup as f64;
    }
    let span = s.steps.saturating_sub(s.warmup).max(1) as f64;
    let t = ((step - s.warmup) as f64 / span).min(1.0);
    s.final_lr_ratio + (1.0 - s.final_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Items for `step`, drawn without replacement per epoch from a stream that
/// depends only on `(seed, epoch)`.
pub(crate) fn batch_indices(seed: u64, step: usize, n: usize, batch: usize) -> Vec<usize> {
    let b = batch.min(n).max(1);
    let per_epoch = n.div_ceil(b);
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let start = (step % per_epoch) * b;
    order[start..(start + b).min(n)].to_vec()
}

/// Independent RNG stream for item `item` of step `step`.
pub(crate) fn item_rng(seed: u64, step: usize, item: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ step as u64);
    r.set_stream(item as u64 + 1);
    r
}
