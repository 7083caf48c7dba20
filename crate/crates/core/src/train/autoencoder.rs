//! Stage one: autoencoder pretraining on Chamfer distance.

use serde::{Deserialize, Serialize};

use super::losses::chamfer_tape;
use super::{batch_indices, cosine_lr, StageSchedule};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::latent::LatentAutoencoder;
use crate::nn::{Adam, AdamConfig, GradAccumulator, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeStepRecord {
    pub step: usize,
    pub loss: f64,
}

/// Resumable optimizer state for autoencoder pretraining.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeTrainer {
    pub sched: StageSchedule,
    pub opt: Adam,
    pub step: usize,
    pub seed: u64,
}

impl AeTrainer {
    pub fn new(sched: StageSchedule, seed: u64) -> Self {
        let opt = Adam::new(AdamConfig { lr: sched.lr, ..Default::default() });
        AeTrainer { sched, opt, step: 0, seed }
    }

    /// One optimizer step; returns the mean batch Chamfer loss.
    pub fn step(&mut self, ae: &LatentAutoencoder, store: &mut ParamStore, data: &[PointCloud]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let items = batch_indices(self.seed, self.step, data.len(), self.sched.batch_size);
        let mut acc = GradAccumulator::new();
        let mut total = 0.0;
        for &i in &items {
            let mut g = Graph::new();
            let rec = ae.reconstruct(&mut g, store, data[i].points())?;
            let loss = chamfer_tape(&mut g, rec, data[i].points());
            let l = g.value(loss).item();
            if !l.is_finite() {
                return Err(Error::Diverged { step: self.step, msg: format!("non-finite Chamfer loss on item {i}") });
            }
            total += l;
            acc.add(g.backward(loss).param_grads());
        }
        let grads = acc.mean(None);
        let lr_scale = cosine_lr(&self.sched, self.step);
        self.opt.step(store, &grads, lr_scale);
        self.step += 1;
        Ok(total / items.len() as f64)
    }
}

/// Runs the whole stage and returns the per-step history.
pub fn pretrain_autoencoder(
    ae: &LatentAutoencoder,
    store: &mut ParamStore,
    data: &[PointCloud],
    trainer: &mut AeTrainer,
    mut on_step: impl FnMut(&AeStepRecord),
) -> Result<Vec<AeStepRecord>> {
    let mut history = Vec::new();
    while trainer.step < trainer.sched.steps {
        let loss = trainer.step(ae, store, data)?;
        let rec = AeStepRecord { step: trainer.step, loss };
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}
