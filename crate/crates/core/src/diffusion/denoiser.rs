use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::sampling::{farthest_point_sampling_from, knn};
use crate::nn::{Init, Linear, Mlp, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Fraction of points kept by each down level.
    pub level_rates: Vec<f64>,
    pub width: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub k_neighbors: usize,
    /// Neighbours interpolated by feature propagation.
    pub fp_k: usize,
    pub down_fusion: bool,
    pub down_attn: bool,
    pub up_fusion: bool,
    pub up_attn: bool,
    /// Octaves of sin/cos features of the noisy positions fed to the input embedding (0 = none).
    #[serde(default)]
    pub pos_frequencies: usize,
}

impl DenoiserConfig {
    pub fn smoke() -> Self {
        DenoiserConfig {
            level_rates: vec![0.5, 0.5],
            width: 32,
            time_dim: 32,
            attn_dim: 16,
            k_neighbors: 8,
            fp_k: 3,
            down_fusion: true,
            down_attn: true,
            up_fusion: true,
            up_attn: true,
            pos_frequencies: 0,
        }
    }

    pub fn full() -> Self {
        DenoiserConfig { width: 64, attn_dim: 32, k_neighbors: 16, ..Self::smoke() }
    }

    pub fn levels(&self) -> usize {
        self.level_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_rates.is_empty() || self.level_rates.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::ConfigMismatch("denoiser level rates must lie in (0, 1)".into()));
        }
        if self.width == 0 || self.attn_dim == 0 || self.k_neighbors == 0 || self.fp_k == 0 || self.time_dim < 2 {
            return Err(Error::ConfigMismatch("denoiser widths and neighbourhood sizes must be positive".into()));
        }
        Ok(())
    }

    /// Point counts per level for `n` inputs: `counts[0] = n`.
    pub fn level_counts(&self, n: usize) -> Vec<usize> {
        let mut out = vec![n];
        for r in &self.level_rates {
            let last = *out.last().unwrap();
            out.push(((r * last as f64 - 1e-9).ceil() as usize).max(1));
        }
        out
    }
}

fn embed_dims(cfg: &DenoiserConfig, state_dim: usize) -> Vec<usize> {
    if cfg.pos_frequencies == 0 {
        vec![state_dim, cfg.width]
    } else {
        vec![state_dim + 6 * cfg.pos_frequencies, cfg.width, cfg.width]
    }
}

/// Per row `[sin(2^k·π·p), cos(2^k·π·p)]` for each coordinate `p` and `k < octaves`.
pub fn fourier_features(pos: &Tensor, octaves: usize) -> Tensor {
    let (n, d) = (pos.rows(), pos.cols());
    let mut out = Vec::with_capacity(n * d * 2 * octaves);
    for r in 0..n {
        for &p in pos.row(r) {
            for k in 0..octaves {
                let a = (1u64 << k) as f64 * std::f64::consts::PI * p;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
    Tensor::from_vec(n, d * 2 * octaves, out)
}

/// Sparse priors as seen by the denoiser, in its coordinate frame.
pub struct ConditioningBundle {
    /// `N_s×3` sparse positions, FPS ordered.
    pub positions: Tensor,
    /// `N_s×c` decoded symbols.
    pub features: Var,
    /// `N_s×p` distribution parameters.
    pub dist: Var,
}

/// `[sin(t·f_i), cos(t·f_i)]` with geometric frequencies.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(1, dim);
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out.set(0, i, (t * f).sin());
        out.set(0, half + i, (t * f).cos());
    }
    out
}

/// Relative offsets from each centre to its `k` neighbours, plus the centre itself repeated.
fn neighbourhood_geometry(pos: &Tensor, centers: &Tensor, nbr: &[usize], k: usize) -> (Tensor, Tensor) {
    let m = centers.rows();
    let mut rel = Tensor::zeros(m * k, 3);
    let mut abs = Tensor::zeros(m * k, 3);
    for i in 0..m {
        let c = centers.row(i);
        for j in 0..k {
            let p = pos.row(nbr[i * k + j]);
            rel.row_mut(i * k + j).copy_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            abs.row_mut(i * k + j).copy_from_slice(c);
        }
    }
    (rel, abs)
}

/// Neighbourhood aggregation around given centres with attention pooling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SetAbstraction {
    mlp: Mlp,
    score: Linear,
    k: usize,
}

impl SetAbstraction {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, k: usize) -> Self {
        init.scoped(name, |init| SetAbstraction {
            mlp: Mlp::new(init, "mlp", &[6 + width, width, width]),
            score: Linear::new(init, "score", width, 1),
            k,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos: &Tensor, feats: Var, centers: &Tensor) -> Result<Var> {
        let k = self.k.min(pos.rows());
        let m = centers.rows();
        let nbr = knn(centers, pos, k)?;
        let (rel, abs) = neighbourhood_geometry(pos, centers, &nbr, k);
        let rel = g.constant(rel);
        let abs = g.constant(abs);
        let nf = g.gather(feats, nbr);
        let x = g.concat_cols(&[rel, abs, nf]);
        let h = self.mlp.forward_act(g, store, x);
        let s = self.score.forward(g, store, h);
        let s = g.reshape(s, m, k);
        let a = g.softmax_rows(s);
        let a = g.reshape(a, m * k, 1);
        let w = g.mul_col(h, a);
        Ok(g.group_sum(w, k))
    }
}

/// Concatenate latents and sparse points along the point axis, transform
/// per point, inject time, then abstract onto the centres.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionLayer {
    phi: Mlp,
    time: Linear,
    sa: SetAbstraction,
}

impl FusionLayer {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, k: usize) -> Self {
        init.scoped(name, |init| FusionLayer {
            phi: Mlp::new(init, "phi", &[width, width, width]),
            time: Linear::new(init, "time", width, width),
            sa: SetAbstraction::new(init, "sa", width, k),
        })
    }

    /// Positions and features of the combined set (latents first).
    pub fn combine(
        g: &mut Graph,
        lat_pos: &Tensor,
        lat_feats: Var,
        sparse: Option<(&Tensor, Var)>,
    ) -> Result<(Tensor, Var)> {
        match sparse {
            Some((sp, sf)) if sp.rows() > 0 => {
                let (wl, ws) = (g.shape(lat_feats).1, g.shape(sf).1);
                if wl != ws {
                    return Err(Error::Shape(format!("latent width {wl} but sparse width {ws}")));
                }
                Ok((Tensor::concat_rows(&[lat_pos, sp]), g.concat_rows(&[lat_feats, sf])))
            }
            _ => Ok((lat_pos.clone(), lat_feats)),
        }
    }

    /// Returns the centre positions and their features. `centers = Err(m)`
    /// picks `m` centres by FPS over the combined set.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lat_pos: &Tensor,
        lat_feats: Var,
        sparse: Option<(&Tensor, Var)>,
        temb: Var,
        centers: std::result::Result<&Tensor, usize>,
    ) -> Result<(Tensor, Var)> {
        let (pos, feats) = Self::combine(g, lat_pos, lat_feats, sparse)?;
        let h = self.phi.forward_act(g, store, feats);
        let t = self.time.forward(g, store, temb);
        let h = g.add_row(h, t);
        let centers = match centers {
            Ok(c) => c.clone(),
            Err(m) => pos.gather_rows(&farthest_point_sampling_from(&pos, m.min(pos.rows()), 0)?),
        };
        let out = self.sa.forward(g, store, &pos, h, &centers)?;
        Ok((centers, out))
    }
}

/// Cross-attention from coarse features to sparse anchors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorCrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    pub pre_residual: Var,
    pub weights: Var,
}

impl PriorCrossAttention {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, attn_dim: usize, value_dim: usize) -> Self {
        init.scoped(name, |init| PriorCrossAttention {
            q: Linear::new(init, "q", width, attn_dim),
            k: Linear::new(init, "k", 3, attn_dim),
            v: Linear::new(init, "v", value_dim, width),
            dim: attn_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, coarse: Var, key_pos: &Tensor, values: Var) -> Result<AttentionOutput> {
        let vr = g.shape(values).0;
        if vr != key_pos.rows() {
            return Err(Error::Shape(format!("{} keys but {vr} values", key_pos.rows())));
        }
        let q = self.q.forward(g, store, coarse);
        let kp = g.constant(key_pos.clone());
        let k = self.k.forward(g, store, kp);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax_rows(logits);
        let v = self.v.forward(g, store, values);
        let pre_residual = g.matmul(weights, v);
        let out = g.add(coarse, pre_residual);
        Ok(AttentionOutput { out, pre_residual, weights })
    }
}

/// Upsampling by attention over the nearest coarse points, then a skip merge.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeaturePropagation {
    score: Linear,
    mlp: Mlp,
    k: usize,
}

impl FeaturePropagation {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, k: usize) -> Self {
        init.scoped(name, |init| FeaturePropagation {
            score: Linear::new(init, "score", 3 + width, 1),
            mlp: Mlp::new(init, "mlp", &[2 * width, width, width]),
            k,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src_pos: &Tensor,
        src_feats: Var,
        tgt_pos: &Tensor,
        skip: Var,
    ) -> Result<Var> {
        let k = self.k.min(src_pos.rows());
        let m = tgt_pos.rows();
        let nbr = knn(tgt_pos, src_pos, k)?;
        let (rel, _) = neighbourhood_geometry(src_pos, tgt_pos, &nbr, k);
        let rel = g.constant(rel);
        let nf = g.gather(src_feats, nbr);
        let x = g.concat_cols(&[rel, nf]);
        let s = self.score.forward(g, store, x);
        let s = g.reshape(s, m, k);
        let a = g.softmax_rows(s);
        let a = g.reshape(a, m * k, 1);
        let w = g.mul_col(nf, a);
        let up = g.group_sum(w, k);
        let cat = g.concat_cols(&[up, skip]);
        Ok(self.mlp.forward_act(g, store, cat))
    }
}

/// U-shaped conditional noise predictor `ε_θ(x_t, t | priors)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub state_dim: usize,
    pub code_dim: usize,
    pub dist_dim: usize,
    embed: Mlp,
    time_mlp: Mlp,
    align: Vec<Mlp>,
    down: Vec<FusionLayer>,
    down_attn: Vec<PriorCrossAttention>,
    fp: Vec<FeaturePropagation>,
    up: Vec<FusionLayer>,
    up_attn: Vec<PriorCrossAttention>,
    head: Linear,
}

impl Denoiser {
    pub fn new(init: &mut Init<'_>, cfg: &DenoiserConfig, state_dim: usize, code_dim: usize, dist_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let (w, k, l) = (cfg.width, cfg.k_neighbors, cfg.levels());
        init.scoped("dn", |init| {
            Ok(Denoiser {
                cfg: cfg.clone(),
                state_dim,
                code_dim,
                dist_dim,
                embed: Mlp::new(init, "embed", &embed_dims(cfg, state_dim)),
                time_mlp: Mlp::new(init, "time", &[cfg.time_dim, w, w]),
                align: (0..=l).map(|i| Mlp::new(init, &format!("align{i}"), &[3 + code_dim, w, w])).collect(),
                down: (0..l).map(|i| FusionLayer::new(init, &format!("down{i}"), w, k)).collect(),
                down_attn: (0..l)
                    .map(|i| PriorCrossAttention::new(init, &format!("down_attn{i}"), w, cfg.attn_dim, dist_dim))
                    .collect(),
                fp: (0..l).map(|i| FeaturePropagation::new(init, &format!("fp{i}"), w, cfg.fp_k)).collect(),
                up: (0..l).map(|i| FusionLayer::new(init, &format!("up{i}"), w, k)).collect(),
                up_attn: (0..l)
                    .map(|i| PriorCrossAttention::new(init, &format!("up_attn{i}"), w, cfg.attn_dim, dist_dim))
                    .collect(),
                head: Linear::with_std(init, "head", w + state_dim, state_dim, 0.01),
            })
        })
    }

    /// Nested sparse subsets per level: level `i` keeps the first `m_i` of the FPS order.
    pub fn sparse_levels(&self, positions: &Tensor) -> Result<Vec<Vec<usize>>> {
        let order = farthest_point_sampling_from(positions, positions.rows(), 0)?;
        Ok(self.cfg.level_counts(positions.rows()).into_iter().map(|m| order[..m].to_vec()).collect())
    }

    pub fn predict_noise(&self, g: &mut Graph, store: &ParamStore, x_t: Var, t: usize, cond: &ConditioningBundle) -> Result<Var> {
        let (n, d) = g.shape(x_t);
        if d != self.state_dim {
            return Err(Error::ConfigMismatch(format!("state width {d}, denoiser expects {}", self.state_dim)));
        }
        let ns = cond.positions.rows();
        if ns == 0 || g.shape(cond.features) != (ns, self.code_dim) || g.shape(cond.dist) != (ns, self.dist_dim) {
            return Err(Error::ConfigMismatch("conditioning bundle does not match the denoiser".into()));
        }
        let l = self.cfg.levels();
        let counts = self.cfg.level_counts(n);
        let levels = self.sparse_levels(&cond.positions)?;

        let te = g.constant(sinusoidal_embedding(t as f64, self.cfg.time_dim));
        let temb = self.time_mlp.forward_act(g, store, te);

        let xs = g.constant(cond.positions.clone());
        let sp_in = g.concat_cols(&[xs, cond.features]);
        let mut sparse: Vec<(Tensor, Var, Var)> = Vec::with_capacity(l + 1);
        for (i, idx) in levels.iter().enumerate() {
            let f = g.gather(sp_in, idx.clone());
            let f = self.align[i].forward_act(g, store, f);
            let dist = g.gather(cond.dist, idx.clone());
            sparse.push((cond.positions.gather_rows(idx), f, dist));
        }

        let pos0 = g.value(x_t).slice_cols(0, 3);
        let h0 = if self.cfg.pos_frequencies > 0 {
            let ff = g.constant(fourier_features(&pos0, self.cfg.pos_frequencies));
            let x = g.concat_cols(&[x_t, ff]);
            self.embed.forward_act(g, store, x)
        } else {
            self.embed.forward_act(g, store, x_t)
        };
        let mut pos = vec![pos0];
        let mut feats = vec![h0];
        for i in 0..l {
            let sp = self.cfg.down_fusion.then(|| (&sparse[i].0, sparse[i].1));
            let (c, mut f) =
                self.down[i].forward(g, store, &pos[i], feats[i], sp, temb, Err(counts[i + 1]))?;
            if self.cfg.down_attn {
                let (kp, _, dist) = &sparse[i + 1];
                f = self.down_attn[i].forward(g, store, f, kp, *dist)?.out;
            }
            pos.push(c);
            feats.push(f);
        }

        let mut cur = feats[l];
        for i in (0..l).rev() {
            let up = self.fp[i].forward(g, store, &pos[i + 1], cur, &pos[i], feats[i])?;
            let sp = self.cfg.up_fusion.then(|| (&sparse[i].0, sparse[i].1));
            let (_, mut f) = self.up[i].forward(g, store, &pos[i], up, sp, temb, Ok(&pos[i]))?;
            if self.cfg.up_attn {
                let (kp, _, dist) = &sparse[i];
                f = self.up_attn[i].forward(g, store, f, kp, *dist)?.out;
            }
            cur = f;
        }
        let out = g.concat_cols(&[cur, x_t]);
        Ok(self.head.forward(g, store, out))
    }
}
