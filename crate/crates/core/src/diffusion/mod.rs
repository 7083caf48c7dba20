//! Diffusion schedule, samplers and the prior-conditioned denoiser.

mod denoiser;
mod schedule;

pub use denoiser::{
    sinusoidal_embedding, AttentionOutput, ConditioningBundle, Denoiser, DenoiserConfig, FeaturePropagation,
    FusionLayer, PriorCrossAttention, SetAbstraction,
};
pub use schedule::{
    ddim_sample, ddim_sample_clipped, gaussian, make_schedule, reverse_step_ddpm, DiffusionSchedule, NoisePredictor,
};
