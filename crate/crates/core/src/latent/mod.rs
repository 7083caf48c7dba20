//! Latent point autoencoder: staged FPS downsampling to `(X_l, F_l)` and
//! candidate-based upsampling back to a dense cloud.

mod decoder;
mod encoder;

use serde::{Deserialize, Serialize};

pub use decoder::{lattice_directions, select_top, PointDecoder, UpsampleBlock};
pub use encoder::{geometry_embedding_inputs, DownsampleBlock, PointEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Fraction of points kept by each stage.
    pub rates: Vec<f64>,
    /// Output feature width of each stage.
    pub dims: Vec<usize>,
    /// Width of the explicit local-geometry embedding.
    pub embed_dim: usize,
    pub k_neighbors: usize,
    /// Seeds the canonical first FPS pick of every stage.
    pub fps_seed: u64,
}

impl EncoderConfig {
    pub fn stages(&self) -> usize {
        self.rates.len()
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&3)
    }

    /// Point counts after each stage for an `n`-point input.
    pub fn stage_counts(&self, n: usize) -> Result<Vec<usize>> {
        let mut cur = n;
        let mut out = Vec::with_capacity(self.rates.len());
        for (s, &r) in self.rates.iter().enumerate() {
            let m = (r * cur as f64 - 1e-9).ceil();
            if !(r > 0.0 && r <= 1.0) || m < 1.0 {
                return Err(Error::InvalidArgument(format!("stage {s}: rate {r} on {cur} points keeps no point")));
            }
            cur = m as usize;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || self.rates.len() != self.dims.len() {
            return Err(Error::ConfigMismatch("encoder needs one feature width per stage".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::ConfigMismatch("k_neighbors must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Children kept per parent at each upsampling stage.
    pub factors: Vec<usize>,
    /// Candidates generated per parent.
    pub k_cand: usize,
    /// Output feature width of each stage (including the final refinement).
    pub dims: Vec<usize>,
    /// Neighbourhood size for the post-selection context step; `0` disables it.
    pub context_k: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != self.factors.len() + 1 {
            return Err(Error::ConfigMismatch("decoder needs one width per stage plus the refinement".into()));
        }
        if let Some(&f) = self.factors.iter().find(|&&f| f == 0 || f >= self.k_cand) {
            return Err(Error::ConfigMismatch(format!("upsample factor {f} must satisfy 1 <= f_s < k_cand = {}", self.k_cand)));
        }
        Ok(())
    }

    pub fn output_count(&self, n_latent: usize) -> usize {
        n_latent * self.factors.iter().product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl AutoencoderConfig {
    /// 512-point smoke configuration: 3 halving stages to 64 latents.
    pub fn smoke() -> Self {
        AutoencoderConfig {
            encoder: EncoderConfig {
                rates: vec![0.5, 0.5, 0.5],
                dims: vec![16, 32, 16],
                embed_dim: 16,
                k_neighbors: 8,
                fps_seed: 7,
            },
            decoder: DecoderConfig { factors: vec![2, 2, 2], k_cand: 4, dims: vec![32, 32, 24, 16], context_k: 4 },
        }
    }

    /// 2048-point configuration: 256 latents of width 64.
    pub fn full() -> Self {
        AutoencoderConfig {
            encoder: EncoderConfig {
                rates: vec![0.5, 0.5, 0.5],
                dims: vec![32, 64, 64],
                embed_dim: 32,
                k_neighbors: 16,
                fps_seed: 7,
            },
            decoder: DecoderConfig { factors: vec![2, 2, 2], k_cand: 8, dims: vec![64, 64, 48, 32], context_k: 8 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

/// Positions `X_l` and features `F_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSet {
    pub positions: Tensor,
    pub features: Tensor,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `[positions ∥ features]`, one row per latent point.
    pub fn to_state(&self) -> Tensor {
        Tensor::concat_cols(&[&self.positions, &self.features])
    }

    pub fn from_state(state: &Tensor) -> LatentSet {
        LatentSet { positions: state.slice_cols(0, 3), features: state.slice_cols(3, state.cols()) }
    }
}

/// `[0, 0, …, 1, 1, …]`: each of `n` indices repeated `k` times.
pub(crate) fn repeat_each(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

use crate::autograd::{Graph, Var};
use crate::nn::{Init, ParamStore};

/// Encoder and decoder sharing one parameter store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentAutoencoder {
    pub cfg: AutoencoderConfig,
    pub encoder: PointEncoder,
    pub decoder: PointDecoder,
}

impl LatentAutoencoder {
    pub fn new(init: &mut Init<'_>, cfg: &AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = PointEncoder::new(init, "ae.enc", &cfg.encoder)?;
        let decoder = PointDecoder::new(init, "ae.dec", &cfg.decoder, cfg.encoder.out_dim())?;
        Ok(LatentAutoencoder { cfg: cfg.clone(), encoder, decoder })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.encoder.out_dim()
    }

    pub fn latent_count(&self, n: usize) -> Result<usize> {
        Ok(*self.cfg.encoder.stage_counts(n)?.last().unwrap())
    }

    /// `(X_l, F_l) = Θ_L(X)` for a normalized cloud.
    pub fn encode_latent(&self, store: &ParamStore, points: &Tensor) -> Result<LatentSet> {
        let mut g = Graph::new();
        let out = self.encoder.forward(&mut g, store, points)?;
        Ok(LatentSet { positions: out.positions, features: g.value(out.features).clone() })
    }

    pub fn decode_points(&self, store: &ParamStore, latent: &LatentSet) -> Result<Tensor> {
        if latent.dim() != self.latent_dim() || latent.positions.cols() != 3 {
            return Err(Error::Shape(format!(
                "latent width {} does not match decoder width {}",
                latent.dim(),
                self.latent_dim()
            )));
        }
        let mut g = Graph::new();
        let p = g.constant(latent.positions.clone());
        let f = g.constant(latent.features.clone());
        let out = self.decoder.forward(&mut g, store, p, f)?;
        Ok(g.value(out).clone())
    }

    /// Encode then decode on the tape; returns the reconstructed points.
    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, points: &Tensor) -> Result<Var> {
        let enc = self.encoder.forward(g, store, points)?;
        let p = g.constant(enc.positions);
        self.decoder.forward(g, store, p, enc.features)
    }
}
