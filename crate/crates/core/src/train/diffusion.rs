//! Stage two: joint training of the denoiser and the sparse prior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::loss_recon_tape;
use super::{batch_indices, cosine_lr, item_rng, StageSchedule};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{LatentNorm, Model};
use crate::nn::{Adam, AdamConfig, Ema, GradAccumulator};
use crate::sparse::{gmm_nll_tape, QuantMode, COORD_BITS};
use crate::tensor::Tensor;

/// A training cloud and its normalized target latent state.
#[derive(Clone, Debug)]
pub struct PreparedItem {
    pub points: Tensor,
    pub x0: Tensor,
}

/// Encodes every cloud with the frozen autoencoder, fits the latent
/// normalization into `model` and returns the prepared items.
pub fn prepare_items(model: &mut Model, clouds: &[Tensor]) -> Result<Vec<PreparedItem>> {
    let states = clouds.iter().map(|p| model.latent_state(p)).collect::<Result<Vec<_>>>()?;
    model.norm = LatentNorm::fit(&states, model.cfg.position_gain)?;
    Ok(clouds.iter().zip(&states).map(|(p, s)| PreparedItem { points: p.clone(), x0: model.norm.normalize(s) }).collect())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffStepRecord {
    pub step: usize,
    pub loss_recon: f64,
    /// Estimated bits per point of the transmitted symbols.
    pub loss_comp: f64,
    pub bpp_est: f64,
    pub loss_gmm: f64,
    pub loss_total: f64,
    pub cd_val: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the rate term.
    pub lambda: f64,
    /// Weight of the mixture negative log-likelihood.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1e-3, gamma: 1e-3 }
    }
}

/// Per-item loss terms on one tape.
pub struct LossTerms {
    pub recon: Var,
    pub bpp: Var,
    pub gmm: Option<Var>,
    pub total: Var,
}

/// Builds the stage-two objective for one item with its own RNG stream.
pub fn diffusion_losses(
    g: &mut Graph,
    model: &Model,
    item: &PreparedItem,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let st = model.stage_two()?;
    let sp = &st.sparse;
    let store = &model.store;
    let variant = model.cfg.variant;
    let sf = sp.forward(g, store, &item.points, QuantMode::Noise, rng)?;
    let cond = model.conditioning(g, &sf);

    let t = rng.gen_range(1..=model.schedule.steps());
    let (r, c) = item.x0.shape();
    let eps = Tensor::from_vec(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect());
    let x_t = model.schedule.forward_noising(&item.x0, t, &eps)?;
    let x_t = g.constant(x_t);
    let eps_hat = st.denoiser.predict_noise(g, store, x_t, t, &cond)?;
    let eps = g.constant(eps);
    let recon = loss_recon_tape(g, eps, eps_hat);

    let mut bits = if variant.laplace_coded() {
        sp.bits_y_laplace(g, sf.y_rate, sf.synth.mu, sf.synth.sigma)
    } else {
        sp.bits_factorized(g, store, &sp.y_density, sf.y_rate)
    };
    if variant.uses_hyper() {
        let bz = sp.bits_z(g, store, sf.z_hat);
        bits = g.add(bits, bz);
    }
    let n = item.points.rows() as f64;
    let coord_bits = 3.0 * COORD_BITS as f64 * sf.positions.rows() as f64;
    let bits = g.add_scalar(bits, coord_bits);
    let bpp = g.scale(bits, 1.0 / n);

    let gmm = variant.uses_hyper().then(|| {
        let xs = g.constant(sf.positions.clone());
        let means = g.add(xs, sf.synth.offsets);
        gmm_nll_tape(g, &item.points, means, sf.synth.vars)
    });

    let mut total = recon;
    if weights.lambda != 0.0 {
        let w = g.scale(bpp, weights.lambda);
        total = g.add(total, w);
    }
    if let (Some(l), true) = (gmm, weights.gamma != 0.0) {
        let w = g.scale(l, weights.gamma);
        total = g.add(total, w);
    }
    Ok(LossTerms { recon, bpp, gmm, total })
}

/// Resumable optimizer state for stage two.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionTrainer {
    pub sched: StageSchedule,
    pub weights: LossWeights,
    pub opt: Adam,
    pub step: usize,
    pub seed: u64,
    /// Update the autoencoder too.
    #[serde(default)]
    pub finetune_ae: bool,
    /// Weight average used for sampling; `None` trains without one.
    #[serde(default)]
    pub ema: Option<Ema>,
}

impl DiffusionTrainer {
    pub fn new(sched: StageSchedule, weights: LossWeights, seed: u64) -> Self {
        let opt = Adam::new(AdamConfig { lr: sched.lr, ..Default::default() });
        DiffusionTrainer { sched, weights, opt, step: 0, seed, finetune_ae: false, ema: Some(Ema::new(0.999)) }
    }

    /// Installs the averaged weights in `model` (no-op without EMA or when already installed).
    pub fn install_average(&mut self, model: &mut Model) {
        if let Some(e) = self.ema.as_mut() {
            if !e.is_swapped() {
                e.swap(&mut model.store);
            }
        }
    }

    /// Restores the raw training weights after [`install_average`](Self::install_average).
    pub fn restore_raw(&mut self, model: &mut Model) {
        if let Some(e) = self.ema.as_mut() {
            if e.is_swapped() {
                e.swap(&mut model.store);
            }
        }
    }

    pub fn step(&mut self, model: &mut Model, data: &[PreparedItem]) -> Result<DiffStepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        self.restore_raw(model);
        let items = batch_indices(self.seed, self.step, data.len(), self.sched.batch_size);
        let mut acc = GradAccumulator::new();
        let (mut rec, mut comp, mut gmm, mut tot) = (0.0, 0.0, 0.0, 0.0);
        for (slot, &i) in items.iter().enumerate() {
            let mut rng = item_rng(self.seed, self.step, slot);
            let mut g = Graph::new();
            let terms = diffusion_losses(&mut g, model, &data[i], &self.weights, &mut rng)?;
            let total = g.value(terms.total).item();
            if !total.is_finite() {
                return Err(Error::Diverged { step: self.step, msg: format!("non-finite loss on item {i}") });
            }
            rec += g.value(terms.recon).item();
            comp += g.value(terms.bpp).item();
            gmm += terms.gmm.map_or(0.0, |v| g.value(v).item());
            tot += total;
            acc.add(g.backward(terms.total).param_grads());
        }
        let finetune = self.finetune_ae;
        let m: &Model = model;
        let keep = |id| finetune || !m.is_ae_param(id);
        let grads = acc.mean(Some(&keep));
        let lr_scale = cosine_lr(&self.sched, self.step);
        self.opt.step(&mut model.store, &grads, lr_scale);
        if let Some(e) = self.ema.as_mut() {
            e.update(&model.store, grads.iter().map(|(id, _)| *id));
        }
        self.step += 1;
        let k = items.len() as f64;
        Ok(DiffStepRecord {
            step: self.step,
            loss_recon: rec / k,
            loss_comp: comp / k,
            bpp_est: comp / k,
            loss_gmm: gmm / k,
            loss_total: tot / k,
            cd_val: None,
        })
    }
}

/// Runs stage two to completion. `eval` is called every `eval_every` steps
/// (and on the last) with the averaged weights installed to fill `cd_val`.
/// On return the averaged weights are installed.
pub fn train_diffusion(
    model: &mut Model,
    data: &[PreparedItem],
    trainer: &mut DiffusionTrainer,
    eval_every: usize,
    mut eval: impl FnMut(&Model) -> Result<f64>,
    mut on_step: impl FnMut(&DiffStepRecord),
) -> Result<Vec<DiffStepRecord>> {
    let mut history = Vec::new();
    while trainer.step < trainer.sched.steps {
        let mut rec = trainer.step(model, data)?;
        if eval_every > 0 && (rec.step % eval_every == 0 || rec.step == trainer.sched.steps) {
            trainer.install_average(model);
            rec.cd_val = Some(eval(model)?);
            trainer.restore_raw(model);
        }
        on_step(&rec);
        history.push(rec);
    }
    trainer.install_average(model);
    Ok(history)
}
