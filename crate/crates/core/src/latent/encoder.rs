use serde::{Deserialize, Serialize};

use super::{repeat_each, EncoderConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::sampling::{fps_canonical, knn};
use crate::nn::{Init, Linear, Mlp, ParamStore};
use crate::tensor::Tensor;

/// `[unit direction, distance]` from `center` to each neighbour (`k×4`).
/// A coincident neighbour gets the zero direction.
pub fn geometry_embedding_inputs(center: [f64; 3], neighbors: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(neighbors.rows(), 4);
    for j in 0..neighbors.rows() {
        let p = neighbors.row(j);
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let row = out.row_mut(j);
        if len > 0.0 {
            row[0] = d[0] / len;
            row[1] = d[1] / len;
            row[2] = d[2] / len;
        }
        row[3] = len;
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownsampleBlock {
    pub in_dim: usize,
    pub out_dim: usize,
    pub k: usize,
    emb: Linear,
    gate: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    rel: Linear,
    merge: Mlp,
}

pub struct StageOutput {
    pub positions: Tensor,
    pub features: Var,
    /// Indices of the kept points within the stage input.
    pub kept: Vec<usize>,
}

impl DownsampleBlock {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, embed_dim: usize, k: usize) -> Self {
        init.scoped(name, |init| DownsampleBlock {
            in_dim,
            out_dim,
            k,
            emb: Linear::new(init, "emb", 4 + in_dim, embed_dim),
            gate: Linear::new(init, "gate", embed_dim, embed_dim),
            wq: Linear::no_bias(init, "q", in_dim, out_dim),
            wk: Linear::no_bias(init, "k", in_dim, out_dim),
            wv: Linear::new(init, "v", in_dim, out_dim),
            rel: Linear::new(init, "rel", 3, out_dim),
            merge: Mlp::new(init, "merge", &[embed_dim + out_dim, out_dim, out_dim]),
        })
    }

    /// Explicit embedding of each neighbourhood: per-neighbour linear map,
    /// sigmoid self-gate, mean over the `k` neighbours.
    pub fn local_geometry_embedding(&self, g: &mut Graph, store: &ParamStore, geom: Var, nbr_feats: Var) -> Var {
        let x = g.concat_cols(&[geom, nbr_feats]);
        let e = self.emb.forward(g, store, x);
        let e = g.relu(e);
        let gl = self.gate.forward(g, store, e);
        let gate = g.sigmoid(gl);
        let gated = g.mul(e, gate);
        g.group_mean(gated, self.k)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pos: &Tensor,
        feats: Var,
        keep: usize,
        seed: u64,
    ) -> Result<StageOutput> {
        let n = pos.rows();
        let k = self.k.min(n);
        let kept = fps_canonical(pos, keep, seed)?;
        let centers = pos.gather_rows(&kept);
        let nbr = knn(&centers, pos, k)?;
        let mut geom = Tensor::zeros(keep * k, 4);
        let mut rel = Tensor::zeros(keep * k, 3);
        for i in 0..keep {
            let c = centers.point(i);
            let block = geometry_embedding_inputs(c, &pos.gather_rows(&nbr[i * k..(i + 1) * k]));
            for j in 0..k {
                geom.row_mut(i * k + j).copy_from_slice(block.row(j));
                let p = pos.row(nbr[i * k + j]);
                rel.row_mut(i * k + j).copy_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
        }
        let geom = g.constant(geom);
        let rel = g.constant(rel);
        let nbr_feats = g.gather(feats, nbr);
        let explicit = if self.k == k {
            self.local_geometry_embedding(g, store, geom, nbr_feats)
        } else {
            let shrunk = DownsampleBlock { k, ..self.clone() };
            shrunk.local_geometry_embedding(g, store, geom, nbr_feats)
        };

        // Transformer-style aggregation: kept points query their neighbourhood.
        let self_feats = g.gather(feats, kept.clone());
        let q = self.wq.forward(g, store, self_feats);
        let q = g.gather(q, repeat_each(keep, k));
        let delta = self.rel.forward(g, store, rel);
        let kk = self.wk.forward(g, store, nbr_feats);
        let kk = g.add(kk, delta);
        let qk = g.mul(q, kk);
        let logits = g.row_sums(qk);
        let logits = g.scale(logits, 1.0 / (self.out_dim as f64).sqrt());
        let logits = g.reshape(logits, keep, k);
        let attn = g.softmax_rows(logits);
        let attn = g.reshape(attn, keep * k, 1);
        let v = self.wv.forward(g, store, nbr_feats);
        let v = g.add(v, delta);
        let weighted = g.mul_col(v, attn);
        let agg = g.group_sum(weighted, k);

        let merged = g.concat_cols(&[explicit, agg]);
        let features = self.merge.forward(g, store, merged);
        Ok(StageOutput { positions: centers, features, kept })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointEncoder {
    pub cfg: EncoderConfig,
    blocks: Vec<DownsampleBlock>,
}

pub struct EncoderOutput {
    pub positions: Tensor,
    pub features: Var,
    /// Indices of the output points within the encoder input.
    pub source_indices: Vec<usize>,
}

impl PointEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = init.scoped(name, |init| {
            let mut in_dim = 3;
            cfg.dims
                .iter()
                .enumerate()
                .map(|(s, &d)| {
                    let b = DownsampleBlock::new(init, &format!("stage{s}"), in_dim, d, cfg.embed_dim, cfg.k_neighbors);
                    in_dim = d;
                    b
                })
                .collect()
        });
        Ok(PointEncoder { cfg: cfg.clone(), blocks })
    }

    /// Runs every stage; initial features are the coordinates themselves.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &Tensor) -> Result<EncoderOutput> {
        if points.cols() != 3 {
            return Err(Error::Shape(format!("encoder expects Nx3 points, got {}x{}", points.rows(), points.cols())));
        }
        let counts = self.cfg.stage_counts(points.rows())?;
        let mut pos = points.clone();
        let mut feats = g.constant(points.clone());
        let mut source: Vec<usize> = (0..points.rows()).collect();
        for (s, (block, &m)) in self.blocks.iter().zip(&counts).enumerate() {
            let seed = self.cfg.fps_seed.wrapping_add(s as u64);
            let out = block.forward(g, store, &pos, feats, m, seed)?;
            source = out.kept.iter().map(|&i| source[i]).collect();
            pos = out.positions;
            feats = out.features;
        }
        Ok(EncoderOutput { positions: pos, features: feats, source_indices: source })
    }
}
