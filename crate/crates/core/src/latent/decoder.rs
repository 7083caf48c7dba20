use serde::{Deserialize, Serialize};

use super::{repeat_each, DecoderConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::sampling::knn;
use crate::nn::{Init, Linear, ParamStore};
use crate::tensor::Tensor;

/// The 26 unit vectors pointing from a lattice cell to its neighbours.
pub fn lattice_directions() -> Tensor {
    let mut rows = Vec::with_capacity(26);
    for x in -1i32..=1 {
        for y in -1i32..=1 {
            for z in -1i32..=1 {
                if x == 0 && y == 0 && z == 0 {
                    continue;
                }
                let n = ((x * x + y * y + z * z) as f64).sqrt();
                rows.push([x as f64 / n, y as f64 / n, z as f64 / n]);
            }
        }
    }
    Tensor::from_rows(&rows)
}

/// Indices (into the flattened `parents × k_cand` candidates) of the `f_s`
/// most confident candidates of every parent, ascending within a parent.
/// Ties go to the lower candidate index.
pub fn select_top(conf: &[f64], parents: usize, k_cand: usize, f_s: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(parents * f_s);
    let mut order: Vec<usize> = Vec::with_capacity(k_cand);
    for p in 0..parents {
        let c = &conf[p * k_cand..(p + 1) * k_cand];
        order.clear();
        order.extend(0..k_cand);
        order.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = order[..f_s].to_vec();
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|j| p * k_cand + j));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Context {
    k: usize,
    mix: Linear,
    out: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpsampleBlock {
    pub f_s: usize,
    pub k_cand: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    sub: Linear,
    dir: Linear,
    scale: Linear,
    conf: Linear,
    context: Option<Context>,
}

pub struct UpsampleOutput {
    pub positions: Var,
    pub features: Var,
    /// All `parents × k_cand` candidate positions before selection.
    pub candidates: Var,
    pub selected: Vec<usize>,
}

impl UpsampleBlock {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        f_s: usize,
        k_cand: usize,
        in_dim: usize,
        out_dim: usize,
        context_k: usize,
    ) -> Self {
        init.scoped(name, |init| UpsampleBlock {
            f_s,
            k_cand,
            in_dim,
            out_dim,
            sub: Linear::new(init, "sub", in_dim, k_cand * out_dim),
            dir: Linear::new(init, "dir", out_dim, 26),
            scale: Linear::zeros(init, "scale", out_dim, 1),
            conf: Linear::new(init, "conf", out_dim, 1),
            context: (context_k > 0).then(|| Context {
                k: context_k,
                mix: Linear::new(init, "ctx_mix", 3 + out_dim, out_dim),
                out: Linear::new(init, "ctx_out", out_dim, out_dim),
            }),
        })
    }

    /// Parameter of the residual scale head; zeroing it pins every candidate to its parent.
    pub fn scale_head(&self) -> &Linear {
        &self.scale
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos: Var, feats: Var) -> Result<UpsampleOutput> {
        let n = g.shape(pos).0;
        if g.shape(feats) != (n, self.in_dim) {
            return Err(Error::Shape(format!(
                "upsample block expects {n}x{} features, got {:?}",
                self.in_dim,
                g.shape(feats)
            )));
        }
        let kc = self.k_cand;
        // Sub-point convolution: one feature vector per candidate.
        let c = self.sub.forward(g, store, feats);
        let c = g.relu(c);
        let c = g.reshape(c, n * kc, self.out_dim);

        let logits = self.dir.forward(g, store, c);
        let w = g.softmax_rows(logits);
        let dirs = g.constant(lattice_directions());
        let dir = g.matmul(w, dirs);
        let s = self.scale.forward(g, store, c);
        let offset = g.mul_col(dir, s);
        let parent = g.gather(pos, repeat_each(n, kc));
        let candidates = g.add(parent, offset);

        let conf = self.conf.forward(g, store, c);
        let selected = select_top(g.value(conf).data(), n, kc, self.f_s);
        let positions = g.gather(candidates, selected.clone());
        let cf = g.gather(c, selected.clone());
        let cs = g.gather(conf, selected.clone());
        let cs = g.sigmoid(cs);
        let mut features = g.mul_col(cf, cs);

        if let Some(ctx) = &self.context {
            let m = n * self.f_s;
            let k = ctx.k.min(m);
            if k > 1 {
                let pv = g.value(positions).clone();
                let nbr = knn(&pv, &pv, k)?;
                let np = g.gather(positions, nbr.clone());
                let cp = g.gather(positions, repeat_each(m, k));
                let rel = g.sub(np, cp);
                let nf = g.gather(features, nbr);
                let x = g.concat_cols(&[rel, nf]);
                let h = ctx.mix.forward(g, store, x);
                let h = g.relu(h);
                let h = g.group_mean(h, k);
                let h = ctx.out.forward(g, store, h);
                features = g.add(features, h);
            }
        }
        Ok(UpsampleOutput { positions, features, candidates, selected })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointDecoder {
    pub cfg: DecoderConfig,
    pub blocks: Vec<UpsampleBlock>,
}

impl PointDecoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &DecoderConfig, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let blocks = init.scoped(name, |init| {
            let mut in_dim = latent_dim;
            let mut blocks = Vec::new();
            let factors = cfg.factors.iter().copied().chain(std::iter::once(1));
            for (s, (f, &d)) in factors.zip(&cfg.dims).enumerate() {
                blocks.push(UpsampleBlock::new(init, &format!("stage{s}"), f, cfg.k_cand, in_dim, d, cfg.context_k));
                in_dim = d;
            }
            blocks
        });
        Ok(PointDecoder { cfg: cfg.clone(), blocks })
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks[0].in_dim
    }

    /// Reconstructed points (`N_l · Π f_s` rows).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pos: Var, feats: Var) -> Result<Var> {
        let mut p = pos;
        let mut f = feats;
        for b in &self.blocks {
            let out = b.forward(g, store, p, f)?;
            p = out.positions;
            f = out.features;
        }
        Ok(p)
    }
}
