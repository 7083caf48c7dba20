//! Sparse skeleton `(X_s, F_s)`, its analysis/hyper transforms and the
//! distribution heads used for entropy coding and the mixture surrogate.

mod gmm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gmm::{gmm_log_likelihood, gmm_nll_tape, GmmParams};

use crate::autograd::{Graph, Var};
use crate::entropy::{bits_tape, FactorizedDensity};
use crate::error::{Error, Result};
use crate::latent::{EncoderConfig, PointEncoder};
use crate::nn::{Init, Linear, ParamStore};
use crate::tensor::Tensor;

/// Scale applied to the raw mixture offset head.
const OFFSET_SCALE: f64 = 0.05;
/// Scale applied to softplus of the raw mixture variance head.
const VAR_SCALE: f64 = 0.01;
/// Bits per coordinate of the fixed-point sparse positions.
pub const COORD_BITS: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisInput {
    /// `X_s ∥ F_s`.
    Feat,
    /// `X_s` only.
    Pt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseBlock {
    /// Kernel-3 convolution along the FPS order.
    Conv,
    /// Per-point linear layers.
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Noise,
    Round,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    pub encoder: EncoderConfig,
    pub analysis_input: AnalysisInput,
    pub base_block: BaseBlock,
    /// Channels `c` of `Y_s`.
    pub code_dim: usize,
    /// Channels `h` of `Z_s`.
    pub hyper_dim: usize,
    pub hidden: usize,
    /// Keep `Z_s` at `N_s` rows; otherwise halve it.
    pub preserved_size: bool,
    pub sigma_floor: f64,
    pub var_floor: f64,
    pub density_depth: usize,
    pub density_width: usize,
    pub density_init_scale: f64,
    /// Symbols are clipped to `[-q_max, q_max]` when coded.
    pub q_max: i64,
    /// Let the rate term reach the sparse encoder.
    pub rate_grad_to_encoder: bool,
}

impl SparseConfig {
    /// 512 → 19 sparse points.
    pub fn smoke() -> Self {
        SparseConfig {
            encoder: EncoderConfig {
                rates: vec![0.25, 0.25, 19.0 / 32.0],
                dims: vec![16, 16, 16],
                embed_dim: 16,
                k_neighbors: 8,
                fps_seed: 11,
            },
            analysis_input: AnalysisInput::Feat,
            base_block: BaseBlock::Conv,
            code_dim: 8,
            hyper_dim: 4,
            hidden: 32,
            preserved_size: true,
            sigma_floor: 1e-6,
            var_floor: 1e-4,
            density_depth: 3,
            density_width: 8,
            density_init_scale: 4.0,
            q_max: 64,
            rate_grad_to_encoder: true,
        }
    }

    /// 2048 → 76 sparse points, `c = h = 32`.
    pub fn full() -> Self {
        SparseConfig {
            encoder: EncoderConfig {
                rates: vec![0.25, 0.25, 19.0 / 32.0],
                dims: vec![32, 32, 32],
                embed_dim: 32,
                k_neighbors: 16,
                fps_seed: 11,
            },
            code_dim: 32,
            hyper_dim: 32,
            hidden: 64,
            ..Self::smoke()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.code_dim == 0 || self.hyper_dim == 0 || self.hidden == 0 {
            return Err(Error::ConfigMismatch("sparse prior widths must be positive".into()));
        }
        if !(self.sigma_floor > 0.0) || !(self.var_floor > 0.0) {
            return Err(Error::ConfigMismatch("sigma and variance floors must be positive".into()));
        }
        if self.q_max < 1 || self.q_max > 1 << 14 {
            return Err(Error::ConfigMismatch(format!("q_max {} out of range", self.q_max)));
        }
        Ok(())
    }

    pub fn hyper_rows(&self, n_s: usize) -> usize {
        if self.preserved_size {
            n_s
        } else {
            n_s.div_ceil(2)
        }
    }
}

/// `round` with ties away from zero, or additive `U(-0.5, 0.5)` noise.
pub fn quantize(v: &Tensor, mode: QuantMode, rng: &mut impl Rng) -> Tensor {
    match mode {
        QuantMode::Round => v.map(f64::round),
        QuantMode::Noise => v.map(|x| x + rng.gen_range(-0.5..0.5)),
    }
}

/// Unit-cube coordinate to its 16-bit fixed-point code.
pub fn coord_to_fixed(x: f64) -> u16 {
    let levels = ((1u32 << COORD_BITS) - 1) as f64;
    ((x + 0.5).clamp(0.0, 1.0) * levels).round() as u16
}

pub fn fixed_to_coord(q: u16) -> f64 {
    q as f64 / ((1u32 << COORD_BITS) - 1) as f64 - 0.5
}

/// Snaps every coordinate to the fixed-point grid.
pub fn snap_positions(p: &Tensor) -> Tensor {
    p.map(|x| fixed_to_coord(coord_to_fixed(x)))
}

/// Kernel-3 (or pointwise) 1-D convolution over the row sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SeqLayer {
    lin: Linear,
    conv: bool,
}

impl SeqLayer {
    fn new(init: &mut Init<'_>, name: &str, base: BaseBlock, fan_in: usize, fan_out: usize) -> Self {
        let conv = base == BaseBlock::Conv;
        let k = if conv { 3 } else { 1 };
        SeqLayer { lin: Linear::new(init, name, k * fan_in, fan_out), conv }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let x = if self.conv {
            let prev = g.shift_rows(x, 1);
            let next = g.shift_rows(x, -1);
            g.concat_cols(&[prev, x, next])
        } else {
            x
        };
        self.lin.forward(g, store, x)
    }
}

fn run_stack(layers: &[SeqLayer], g: &mut Graph, store: &ParamStore, mut x: Var, final_act: bool) -> Var {
    for (i, l) in layers.iter().enumerate() {
        x = l.forward(g, store, x);
        if final_act || i + 1 < layers.len() {
            x = g.relu(x);
        }
    }
    x
}

/// Outputs of the synthesis transform.
#[derive(Clone, Copy, Debug)]
pub struct Synthesis {
    /// `N_s×c` Laplace locations.
    pub mu: Var,
    /// `N_s×c` Laplace scales.
    pub sigma: Var,
    /// `N_s×3` mixture offsets `v`.
    pub offsets: Var,
    /// `N_s×3` mixture variances.
    pub vars: Var,
}

/// One tape pass through the whole prior.
pub struct SparseForward {
    pub positions: Tensor,
    pub features: Var,
    pub y: Var,
    /// Noisy or rounded `Y_s` seen by the decoder side.
    pub y_hat: Var,
    /// `y_hat` as routed into the rate term.
    pub y_rate: Var,
    pub z: Var,
    pub z_hat: Var,
    pub synth: Synthesis,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsePrior {
    pub cfg: SparseConfig,
    pub encoder: PointEncoder,
    analysis: Vec<SeqLayer>,
    hyper_analysis: Vec<SeqLayer>,
    hyper_synthesis_in: SeqLayer,
    hyper_synthesis_out: SeqLayer,
    mu_head: Linear,
    sigma_head: Linear,
    offset_head: Linear,
    var_head: Linear,
    pub z_density: FactorizedDensity,
    /// Context-free model for `Y_s`, used by the ablations that skip the hyperprior.
    pub y_density: FactorizedDensity,
}

impl SparsePrior {
    pub fn new(init: &mut Init<'_>, cfg: &SparseConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = PointEncoder::new(init, "sp.enc", &cfg.encoder)?;
        let b = cfg.base_block;
        let (c, h, w) = (cfg.code_dim, cfg.hyper_dim, cfg.hidden);
        let a_in = match cfg.analysis_input {
            AnalysisInput::Feat => 3 + cfg.encoder.out_dim(),
            AnalysisInput::Pt => 3,
        };
        init.scoped("sp", |init| {
            Ok(SparsePrior {
                cfg: cfg.clone(),
                encoder,
                analysis: vec![
                    SeqLayer::new(init, "ga0", b, a_in, w),
                    SeqLayer::new(init, "ga1", b, w, w),
                    SeqLayer::new(init, "ga2", b, w, c),
                ],
                hyper_analysis: vec![SeqLayer::new(init, "ha0", b, c, w), SeqLayer::new(init, "ha1", b, w, h)],
                hyper_synthesis_in: SeqLayer::new(init, "hs0", b, h, w),
                hyper_synthesis_out: SeqLayer::new(init, "hs1", b, w, w),
                mu_head: Linear::with_std(init, "mu", w, c, 0.05),
                sigma_head: Linear::with_std(init, "sigma", w, c, 0.05),
                offset_head: Linear::with_std(init, "offset", w, 3, 0.05),
                var_head: Linear::with_std(init, "var", w, 3, 0.05),
                z_density: FactorizedDensity::new(init, "z_density", h, cfg.density_depth, cfg.density_width, cfg.density_init_scale),
                y_density: FactorizedDensity::new(init, "y_density", c, cfg.density_depth, cfg.density_width, cfg.density_init_scale),
            })
        })
    }

    /// Number of sparse points for an `n`-point input.
    pub fn sparse_count(&self, n: usize) -> Result<usize> {
        Ok(*self.cfg.encoder.stage_counts(n)?.last().unwrap())
    }

    /// `(X_s, F_s) = Θ_S(X)` on the tape.
    pub fn encode_sparse(&self, g: &mut Graph, store: &ParamStore, points: &Tensor) -> Result<(Tensor, Var)> {
        let out = self.encoder.forward(g, store, points)?;
        Ok((out.positions, out.features))
    }

    /// `(X_s, F_s)` as plain values.
    pub fn encode_sparse_values(&self, store: &ParamStore, points: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let (p, f) = self.encode_sparse(&mut g, store, points)?;
        Ok((p, g.value(f).clone()))
    }

    fn check_rows(&self, g: &Graph, v: Var, cols: usize, what: &str) -> Result<usize> {
        let (r, c) = g.shape(v);
        if c != cols {
            return Err(Error::Shape(format!("{what} has {c} columns, expected {cols}")));
        }
        Ok(r)
    }

    /// `Y_s` from the configured input.
    pub fn analysis(&self, g: &mut Graph, store: &ParamStore, positions: &Tensor, features: Var) -> Result<Var> {
        let n = positions.rows();
        let x = g.constant(positions.clone());
        let input = match self.cfg.analysis_input {
            AnalysisInput::Feat => {
                let r = self.check_rows(g, features, self.cfg.encoder.out_dim(), "F_s")?;
                if r != n {
                    return Err(Error::Shape(format!("{n} sparse positions but {r} feature rows")));
                }
                g.concat_cols(&[x, features])
            }
            AnalysisInput::Pt => x,
        };
        Ok(run_stack(&self.analysis, g, store, input, false))
    }

    /// `Z_s = H_a(Y_s)`.
    pub fn hyper_analysis(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
        let n = self.check_rows(g, y, self.cfg.code_dim, "Y_s")?;
        let h = self.hyper_analysis[0].forward(g, store, y);
        let h = g.relu(h);
        let h = if self.cfg.preserved_size { h } else { g.gather(h, (0..n).step_by(2).collect()) };
        Ok(self.hyper_analysis[1].forward(g, store, h))
    }

    /// `(Y_s, Z_s)` for a sparse set.
    pub fn analysis_transform(&self, g: &mut Graph, store: &ParamStore, positions: &Tensor, features: Var) -> Result<(Var, Var)> {
        let y = self.analysis(g, store, positions, features)?;
        let z = self.hyper_analysis(g, store, y)?;
        Ok((y, z))
    }

    /// `H_s(Ẑ_s)` for `n_s` sparse points.
    pub fn synthesis_transform(&self, g: &mut Graph, store: &ParamStore, z_hat: Var, n_s: usize) -> Result<Synthesis> {
        let rows = self.check_rows(g, z_hat, self.cfg.hyper_dim, "Z_s")?;
        if rows != self.cfg.hyper_rows(n_s) {
            return Err(Error::Shape(format!("{rows} hyper rows do not match {n_s} sparse points")));
        }
        let h = self.hyper_synthesis_in.forward(g, store, z_hat);
        let h = g.relu(h);
        let h = if self.cfg.preserved_size { h } else { g.gather(h, (0..n_s).map(|i| i / 2).collect()) };
        let h = self.hyper_synthesis_out.forward(g, store, h);
        let h = g.relu(h);
        let mu = self.mu_head.forward(g, store, h);
        let s = self.sigma_head.forward(g, store, h);
        let s = g.softplus(s);
        let sigma = g.add_scalar(s, self.cfg.sigma_floor);
        let o = self.offset_head.forward(g, store, h);
        let offsets = g.scale(o, OFFSET_SCALE);
        let v = self.var_head.forward(g, store, h);
        let v = g.softplus(v);
        let v = g.scale(v, VAR_SCALE);
        let vars = g.add_scalar(v, self.cfg.var_floor);
        Ok(Synthesis { mu, sigma, offsets, vars })
    }

    /// Quantizes `v` on the tape: additive noise, or rounding with a straight-through gradient.
    pub fn quantize_tape(&self, g: &mut Graph, v: Var, mode: QuantMode, rng: &mut impl Rng) -> Var {
        let val = g.value(v);
        let delta = quantize(val, mode, rng).zip_map(val, |q, x| q - x);
        let d = g.constant(delta);
        g.add(v, d)
    }

    /// Full pass: sparse encoding, analysis, quantization and synthesis.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &Tensor, mode: QuantMode, rng: &mut impl Rng) -> Result<SparseForward> {
        let (positions, features) = self.encode_sparse(g, store, points)?;
        let positions = snap_positions(&positions);
        self.forward_from_sparse(g, store, positions, features, mode, rng)
    }

    pub fn forward_from_sparse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        positions: Tensor,
        features: Var,
        mode: QuantMode,
        rng: &mut impl Rng,
    ) -> Result<SparseForward> {
        let n_s = positions.rows();
        let y = self.analysis(g, store, &positions, features)?;
        let yv = g.value(y).clone();
        let delta = quantize(&yv, mode, rng).zip_map(&yv, |q, x| q - x);
        let d = g.constant(delta);
        let y_hat = g.add(y, d);
        let y_rate = if self.cfg.rate_grad_to_encoder {
            y_hat
        } else {
            let f = g.detach(features);
            let y2 = self.analysis(g, store, &positions, f)?;
            g.add(y2, d)
        };
        let z = self.hyper_analysis(g, store, y_rate)?;
        let z_hat = self.quantize_tape(g, z, mode, rng);
        let synth = self.synthesis_transform(g, store, z_hat, n_s)?;
        Ok(SparseForward { positions, features, y, y_hat, y_rate, z, z_hat, synth })
    }

    /// Laplace bits of `y_hat` under `(mu, sigma)`.
    pub fn bits_y_laplace(&self, g: &mut Graph, y_hat: Var, mu: Var, sigma: Var) -> Var {
        let p = g.laplace_bin(y_hat, mu, sigma);
        bits_tape(g, p)
    }

    /// Factorized bits of a `rows×channels` symbol matrix.
    pub fn bits_factorized(&self, g: &mut Graph, store: &ParamStore, density: &FactorizedDensity, v: Var) -> Var {
        let (r, c) = g.shape(v);
        let flat = g.reshape(v, r * c, 1);
        let chans: Vec<usize> = (0..r * c).map(|i| i % c).collect();
        let p = density.pmf_tape(g, store, &chans, flat);
        bits_tape(g, p)
    }

    pub fn bits_z(&self, g: &mut Graph, store: &ParamStore, z_hat: Var) -> Var {
        self.bits_factorized(g, store, &self.z_density, z_hat)
    }

    /// Mixture parameters from sparse positions and synthesis outputs.
    pub fn gmm_params(&self, positions: &Tensor, offsets: &Tensor, vars: &Tensor) -> GmmParams {
        let means = positions.zip_map(offsets, |p, o| p + o);
        GmmParams::uniform(means, vars.clone())
    }
}
