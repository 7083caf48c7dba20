//! Complete codec model: autoencoder, sparse prior, denoiser and the
//! latent normalization, built from one configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::diffusion::{
    ddim_sample_clipped, make_schedule, ConditioningBundle, Denoiser, DenoiserConfig, DiffusionSchedule, NoisePredictor,
};
use crate::entropy::FactorizedDensity;
use crate::error::{Error, Result};
use crate::latent::{AutoencoderConfig, DecoderConfig, EncoderConfig, LatentAutoencoder, LatentSet};
use crate::nn::{Init, ParamId, ParamStore};
use crate::sparse::{SparseConfig, SparseForward, SparsePrior, Synthesis};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Latents shrunk to the sparse size and coded directly.
    OneStage,
    /// Sparse fusion only; `Y_s` coded with a context-free model.
    FusionOnly,
    /// Fusion and prior attention; `Y_s` coded with a context-free model.
    AttentionOnly,
    /// Fusion, prior attention and hyperprior coding of `Y_s`.
    Full,
}

impl Variant {
    pub fn two_stage(self) -> bool {
        self != Variant::OneStage
    }

    /// Whether `Z_s` is transmitted.
    pub fn uses_hyper(self) -> bool {
        matches!(self, Variant::AttentionOnly | Variant::Full)
    }

    /// Whether `Y_s` is coded under the Laplace hyperprior model.
    pub fn laplace_coded(self) -> bool {
        self == Variant::Full
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::OneStage => "one_stage",
            Variant::FusionOnly => "fusion_only",
            Variant::AttentionOnly => "attention_only",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_stage" | "m1" => Ok(Variant::OneStage),
            "fusion_only" | "m2" => Ok(Variant::FusionOnly),
            "attention_only" | "m3" => Ok(Variant::AttentionOnly),
            "full" | "m4" => Ok(Variant::Full),
            _ => Err(Error::Parse(format!("unknown model variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub points: usize,
    pub variant: Variant,
    pub autoencoder: AutoencoderConfig,
    pub sparse: SparseConfig,
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub ddim_steps: usize,
    /// Extra factor on the position columns of the normalized diffusion state.
    #[serde(default = "unit_gain")]
    pub position_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

fn one_stage_autoencoder(base: &AutoencoderConfig, points: usize, sparse: usize) -> AutoencoderConfig {
    let mut rates = base.encoder.rates.clone();
    let kept: f64 = rates[..rates.len() - 1].iter().product::<f64>() * points as f64;
    *rates.last_mut().unwrap() = sparse as f64 / kept;
    AutoencoderConfig {
        encoder: EncoderConfig { rates, ..base.encoder.clone() },
        decoder: DecoderConfig { factors: vec![3; base.decoder.factors.len()], ..base.decoder.clone() },
    }
}

impl ModelConfig {
    fn build(points: usize, variant: Variant, ae: AutoencoderConfig, sparse: SparseConfig, mut dn: DenoiserConfig) -> Self {
        let autoencoder = if variant == Variant::OneStage {
            let n_s = sparse.encoder.stage_counts(points).map(|c| *c.last().unwrap()).unwrap_or(1);
            one_stage_autoencoder(&ae, points, n_s)
        } else {
            ae
        };
        if variant == Variant::FusionOnly {
            dn.down_attn = false;
            dn.up_attn = false;
        }
        ModelConfig { points, variant, autoencoder, sparse, denoiser: dn, schedule: ScheduleConfig::default(), ddim_steps: 50, position_gain: 1.0 }
    }

    /// 512-point desk-scale configuration.
    pub fn smoke(variant: Variant) -> Self {
        Self::smoke_with_points(variant, 512)
    }

    /// 2048-point configuration.
    pub fn full(variant: Variant) -> Self {
        Self::full_with_points(variant, 2048)
    }

    pub fn smoke_with_points(variant: Variant, points: usize) -> Self {
        Self::build(points, variant, AutoencoderConfig::smoke(), SparseConfig::smoke(), DenoiserConfig::smoke())
    }

    pub fn full_with_points(variant: Variant, points: usize) -> Self {
        Self::build(points, variant, AutoencoderConfig::full(), SparseConfig::full(), DenoiserConfig::full())
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.sparse.validate()?;
        self.denoiser.validate()?;
        if !(self.position_gain > 0.0 && self.position_gain.is_finite()) {
            return Err(Error::ConfigMismatch(format!("position_gain must be positive, got {}", self.position_gain)));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.schedule.steps {
            return Err(Error::ConfigMismatch(format!("ddim_steps {} outside [1, {}]", self.ddim_steps, self.schedule.steps)));
        }
        let lat = self.autoencoder.encoder.stage_counts(self.points)?;
        let sp = self.sparse.encoder.stage_counts(self.points)?;
        if self.variant.two_stage() && sp.last() >= lat.last() {
            return Err(Error::ConfigMismatch("sparse set must be smaller than the latent set".into()));
        }
        Ok(())
    }
}

/// Per-column affine normalization of the diffusion state. Positions share
/// one isotropic scale so neighbourhoods keep their shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Bound applied to sampled `x0` estimates in the normalized frame.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl LatentNorm {
    pub fn identity(cols: usize) -> Self {
        LatentNorm { mean: vec![0.0; cols], std: vec![1.0; cols], clip: None }
    }

    /// Fits column statistics; positions are scaled to std `position_gain`.
    pub fn fit(states: &[Tensor], position_gain: f64) -> Result<Self> {
        let cols = states.first().ok_or_else(|| Error::InvalidArgument("no latent states to fit".into()))?.cols();
        let mut sum = vec![0.0; cols];
        let mut sq = vec![0.0; cols];
        let mut n = 0usize;
        for s in states {
            if s.cols() != cols {
                return Err(Error::Shape("latent states of different widths".into()));
            }
            for r in 0..s.rows() {
                for (c, v) in s.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += s.rows();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let var: Vec<f64> = (0..cols).map(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0)).collect();
        let pos_std = ((var[0] + var[1] + var[2]) / 3.0).sqrt().max(1e-6) / position_gain;
        let std = (0..cols).map(|c| if c < 3 { pos_std } else { var[c].sqrt().max(1e-6) }).collect();
        let mut norm = LatentNorm { mean, std, clip: None };
        let peak = states.iter().map(|s| norm.normalize(s).max_abs()).fold(0.0, f64::max);
        norm.clip = Some(1.1 * peak);
        Ok(norm)
    }

    pub fn normalize(&self, s: &Tensor) -> Tensor {
        let mut out = s.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, s: &Tensor) -> Tensor {
        let mut out = s.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    /// Maps unit-cube positions into the state frame.
    pub fn normalize_positions(&self, p: &Tensor) -> Tensor {
        let mut out = p.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Second-stage modules.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTwo {
    pub sparse: SparsePrior,
    pub denoiser: Denoiser,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ae: LatentAutoencoder,
    pub stage_two: Option<StageTwo>,
    /// Context-free model of the one-stage latent features.
    pub feature_density: Option<FactorizedDensity>,
    pub norm: LatentNorm,
    pub schedule: DiffusionSchedule,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let ae = LatentAutoencoder::new(&mut init, &cfg.autoencoder)?;
        let d = ae.latent_dim();
        let (stage_two, feature_density) = if cfg.variant.two_stage() {
            let sparse = SparsePrior::new(&mut init, &cfg.sparse)?;
            let dist_dim = 6 + 2 * cfg.sparse.code_dim;
            let denoiser = Denoiser::new(&mut init, &cfg.denoiser, 3 + d, cfg.sparse.code_dim, dist_dim)?;
            (Some(StageTwo { sparse, denoiser }), None)
        } else {
            let s = &cfg.sparse;
            let fd = FactorizedDensity::new(&mut init, "feat_density", d, s.density_depth, s.density_width, s.density_init_scale);
            (None, Some(fd))
        };
        let schedule = make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)?;
        Ok(Model { cfg: cfg.clone(), store, ae, stage_two, feature_density, norm: LatentNorm::identity(3 + d), schedule })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn state_dim(&self) -> usize {
        3 + self.ae.latent_dim()
    }

    pub fn latent_count(&self) -> Result<usize> {
        self.ae.latent_count(self.cfg.points)
    }

    /// Sparse point count (the one-stage latent count for [`Variant::OneStage`]).
    pub fn sparse_count(&self) -> Result<usize> {
        match &self.stage_two {
            Some(s) => s.sparse.sparse_count(self.cfg.points),
            None => self.latent_count(),
        }
    }

    pub fn stage_two(&self) -> Result<&StageTwo> {
        self.stage_two.as_ref().ok_or_else(|| Error::ConfigMismatch("model has no diffusion stage".into()))
    }

    /// Parameters that belong to the autoencoder.
    pub fn is_ae_param(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with("ae.")
    }

    /// Un-normalized `[X_l ∥ F_l]` for a normalized cloud.
    pub fn latent_state(&self, points: &Tensor) -> Result<Tensor> {
        Ok(self.ae.encode_latent(&self.store, points)?.to_state())
    }

    /// Distribution features handed to prior attention: `[v ∥ √var ∥ μ ∥ σ]`.
    pub fn dist_features(g: &mut Graph, synth: &Synthesis) -> crate::autograd::Var {
        let sd = g.sqrt(synth.vars);
        g.concat_cols(&[synth.offsets, sd, synth.mu, synth.sigma])
    }

    /// Conditioning from a tape pass of the sparse prior.
    pub fn conditioning(&self, g: &mut Graph, sf: &SparseForward) -> ConditioningBundle {
        let dist = if self.cfg.variant.uses_hyper() {
            Self::dist_features(g, &sf.synth)
        } else {
            let n = sf.positions.rows();
            g.constant(Tensor::zeros(n, 6 + 2 * self.cfg.sparse.code_dim))
        };
        ConditioningBundle { positions: self.norm.normalize_positions(&sf.positions), features: sf.y_hat, dist }
    }

    /// Runs DDIM from decoded priors and returns the latent set in the unit-cube frame.
    pub fn sample_latents(&self, priors: &DecodedPriors, steps: usize, seed: u64) -> Result<LatentSet> {
        let st = self.stage_two()?;
        let pred = PriorPredictor { model: self, st, priors };
        let n = self.latent_count()?;
        let x = ddim_sample_clipped(&self.schedule, &pred, (n, self.state_dim()), steps, seed, self.norm.clip)?;
        Ok(LatentSet::from_state(&self.norm.denormalize(&x)))
    }

    /// Decoder-side distribution parameters from `Ẑ_s` (zeros when no hyperprior is used).
    pub fn decode_priors(&self, positions: Tensor, y_hat: Tensor, z_hat: Option<&Tensor>) -> Result<DecodedPriors> {
        let st = self.stage_two()?;
        let n = positions.rows();
        let c = self.cfg.sparse.code_dim;
        let dist = match z_hat {
            Some(z) if self.cfg.variant.uses_hyper() => {
                let mut g = Graph::new();
                let zv = g.constant(z.clone());
                let s = st.sparse.synthesis_transform(&mut g, &self.store, zv, n)?;
                let d = Self::dist_features(&mut g, &s);
                g.value(d).clone()
            }
            _ => Tensor::zeros(n, 6 + 2 * c),
        };
        Ok(DecodedPriors { positions, y_hat, dist })
    }
}

/// Sparse positions, decoded symbols and distribution features, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedPriors {
    pub positions: Tensor,
    pub y_hat: Tensor,
    pub dist: Tensor,
}

struct PriorPredictor<'a> {
    model: &'a Model,
    st: &'a StageTwo,
    priors: &'a DecodedPriors,
}

impl NoisePredictor for PriorPredictor<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_t.clone());
        let cond = ConditioningBundle {
            positions: self.model.norm.normalize_positions(&self.priors.positions),
            features: g.constant(self.priors.y_hat.clone()),
            dist: g.constant(self.priors.dist.clone()),
        };
        let e = self.st.denoiser.predict_noise(&mut g, &self.model.store, x, t, &cond)?;
        Ok(g.value(e).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_counts() {
        let m = Model::new(&ModelConfig::smoke(Variant::Full), 0).unwrap();
        assert_eq!((m.latent_count().unwrap(), m.sparse_count().unwrap()), (64, 19));
        let one = Model::new(&ModelConfig::smoke(Variant::OneStage), 0).unwrap();
        assert_eq!(one.latent_count().unwrap(), 19);
        assert_eq!(one.cfg.autoencoder.decoder.output_count(19), 513);
        let full = ModelConfig::full(Variant::Full);
        let n_s = full.sparse.encoder.stage_counts(2048).unwrap();
        assert_eq!(*n_s.last().unwrap(), 76);
    }

    #[test]
    fn norm_roundtrip() {
        let s = Tensor::from_vec(3, 4, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 5.0, -1.0, 2.0, 2.0, 2.0, 0.5]);
        let n = LatentNorm::fit(std::slice::from_ref(&s), 1.0).unwrap();
        let back = n.denormalize(&n.normalize(&s));
        assert!(back.zip_map(&s, |a, b| (a - b).abs()).max_abs() < 1e-12);
        assert_eq!(n.std[0], n.std[2]);
    }
}
