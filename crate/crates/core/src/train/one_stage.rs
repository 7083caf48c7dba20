//! Single-stage ablation: the autoencoder's own latents, quantized and coded
//! with a context-free density, trained on Chamfer distance plus rate.

use serde::{Deserialize, Serialize};

use super::losses::chamfer_tape;
use super::{batch_indices, cosine_lr, item_rng, StageSchedule};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Adam, AdamConfig, GradAccumulator};
use crate::sparse::{quantize, snap_positions, QuantMode, COORD_BITS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneStageRecord {
    pub step: usize,
    pub cd: f64,
    pub bpp_est: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OneStageTrainer {
    pub sched: StageSchedule,
    pub lambda: f64,
    pub opt: Adam,
    pub step: usize,
    pub seed: u64,
}

impl OneStageTrainer {
    pub fn new(sched: StageSchedule, lambda: f64, seed: u64) -> Self {
        let opt = Adam::new(AdamConfig { lr: sched.lr, ..Default::default() });
        OneStageTrainer { sched, lambda, opt, step: 0, seed }
    }

    pub fn step(&mut self, model: &mut Model, data: &[Tensor]) -> Result<OneStageRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let density = model
            .feature_density
            .clone()
            .ok_or_else(|| Error::ConfigMismatch("not a one-stage model".into()))?;
        let items = batch_indices(self.seed, self.step, data.len(), self.sched.batch_size);
        let mut acc = GradAccumulator::new();
        let (mut cd, mut bpp, mut tot) = (0.0, 0.0, 0.0);
        for (slot, &i) in items.iter().enumerate() {
            let mut rng = item_rng(self.seed, self.step, slot);
            let pts = &data[i];
            let mut g = Graph::new();
            let enc = model.ae.encoder.forward(&mut g, &model.store, pts)?;
            let fv = g.value(enc.features).clone();
            let delta = quantize(&fv, QuantMode::Noise, &mut rng).zip_map(&fv, |q, x| q - x);
            let d = g.constant(delta);
            let noisy = g.add(enc.features, d);
            let pos = g.constant(snap_positions(&enc.positions));
            let rec = model.ae.decoder.forward(&mut g, &model.store, pos, noisy)?;
            let loss_cd = chamfer_tape(&mut g, rec, pts);

            let (r, c) = fv.shape();
            let flat = g.reshape(noisy, r * c, 1);
            let chans: Vec<usize> = (0..r * c).map(|k| k % c).collect();
            let p = density.pmf_tape(&mut g, &model.store, &chans, flat);
            let bits = crate::entropy::bits_tape(&mut g, p);
            let bits = g.add_scalar(bits, 3.0 * COORD_BITS as f64 * r as f64);
            let b = g.scale(bits, 1.0 / pts.rows() as f64);
            let total = if self.lambda != 0.0 {
                let w = g.scale(b, self.lambda);
                g.add(loss_cd, w)
            } else {
                loss_cd
            };
            let t = g.value(total).item();
            if !t.is_finite() {
                return Err(Error::Diverged { step: self.step, msg: format!("non-finite loss on item {i}") });
            }
            cd += g.value(loss_cd).item();
            bpp += g.value(b).item();
            tot += t;
            acc.add(g.backward(total).param_grads());
        }
        let grads = acc.mean(None);
        let lr_scale = cosine_lr(&self.sched, self.step);
        self.opt.step(&mut model.store, &grads, lr_scale);
        self.step += 1;
        let k = items.len() as f64;
        Ok(OneStageRecord { step: self.step, cd: cd / k, bpp_est: bpp / k, loss_total: tot / k })
    }
}

pub fn train_one_stage(
    model: &mut Model,
    data: &[Tensor],
    trainer: &mut OneStageTrainer,
    mut on_step: impl FnMut(&OneStageRecord),
) -> Result<Vec<OneStageRecord>> {
    let mut history = Vec::new();
    while trainer.step < trainer.sched.steps {
        let rec = trainer.step(model, data)?;
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}
