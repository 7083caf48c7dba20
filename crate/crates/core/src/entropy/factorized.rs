//! Per-channel non-parametric density built from a monotone CDF network.
//!
//! Each channel owns a small chain of layers `h ↦ g(softplus(H)·h + b)`
//! with `g(x) = x + tanh(a)·tanh(x)` between layers and a logistic
//! sigmoid at the end. Positive matrices and `|tanh(a)| < 1` keep the map
//! strictly increasing.

use serde::{Deserialize, Serialize};

use super::cdf::CdfTable;
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorizedDensity {
    pub channels: usize,
    /// Layer widths including the scalar input and output, e.g. `[1, 8, 8, 1]`.
    pub dims: Vec<usize>,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FactorizedDensity {
    /// `depth` layers with hidden width `width`. `init_scale` sets the
    /// initial spread of the density.
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, depth: usize, width: usize, init_scale: f64) -> Self {
        assert!(depth >= 1 && channels >= 1);
        let mut dims = vec![1];
        dims.extend(std::iter::repeat_n(width, depth - 1));
        dims.push(1);
        let scale = init_scale.powf(1.0 / depth as f64);
        init.scoped(name, |init| {
            let mut matrices = Vec::new();
            let mut biases = Vec::new();
            let mut factors = Vec::new();
            for k in 0..depth {
                let (i, o) = (dims[k], dims[k + 1]);
                let raw = (1.0 / scale / o as f64).exp_m1().ln();
                matrices.push(init.constant(&format!("m{k}"), channels, o * i, raw));
                biases.push(init.uniform(&format!("b{k}"), channels, o, -0.5, 0.5));
                if k + 1 < depth {
                    factors.push(init.constant(&format!("a{k}"), channels, o, 0.0));
                }
            }
            FactorizedDensity { channels, dims, matrices, biases, factors }
        })
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).copied()
    }

    /// Pre-sigmoid CDF value of channel `ch` at `x`.
    pub fn logit(&self, store: &ParamStore, ch: usize, x: f64) -> f64 {
        let mut h = vec![x];
        let depth = self.dims.len() - 1;
        for k in 0..depth {
            let (i, o) = (self.dims[k], self.dims[k + 1]);
            let m = store.get(self.matrices[k]).row(ch);
            let b = store.get(self.biases[k]).row(ch);
            let mut next = vec![0.0; o];
            for a in 0..o {
                let mut s = b[a];
                for j in 0..i {
                    s += softplus(m[a * i + j]) * h[j];
                }
                next[a] = s;
            }
            if k + 1 < depth {
                let f = store.get(self.factors[k]).row(ch);
                for a in 0..o {
                    next[a] += f[a].tanh() * next[a].tanh();
                }
            }
            h = next;
        }
        h[0]
    }

    pub fn cdf(&self, store: &ParamStore, ch: usize, x: f64) -> f64 {
        sigmoid(self.logit(store, ch, x))
    }

    /// `CDF(z + 1/2) - CDF(z - 1/2)`, evaluated on the side of the median
    /// where the two sigmoids are far from saturation.
    pub fn pmf(&self, store: &ParamStore, ch: usize, z: f64) -> f64 {
        let lu = self.logit(store, ch, z + 0.5);
        let ll = self.logit(store, ch, z - 0.5);
        let s = if lu + ll > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * lu) - sigmoid(s * ll)).abs()
    }

    /// Table for channel `ch` over `[-q_max, q_max]` with tails folded into the end symbols.
    pub fn table(&self, store: &ParamStore, ch: usize, q_max: i64, precision: u32) -> Result<CdfTable> {
        let lo = -q_max;
        let pmf: Vec<f64> = (lo..=q_max)
            .map(|k| {
                let y = k as f64;
                if k == lo && k == q_max {
                    1.0
                } else if k == lo {
                    self.cdf(store, ch, y + 0.5)
                } else if k == q_max {
                    sigmoid(-self.logit(store, ch, y - 0.5))
                } else {
                    self.pmf(store, ch, y)
                }
            })
            .collect();
        CdfTable::from_pmf(&pmf, lo, precision)
    }

    /// Logits on the tape for the column `x` (`R×1`) with row `r` in channel `chans[r]`.
    pub fn logits_tape(&self, g: &mut Graph, store: &ParamStore, chans: &[usize], x: Var) -> Var {
        let mut h = x;
        let depth = self.dims.len() - 1;
        for k in 0..depth {
            let m = g.param(store, self.matrices[k]);
            let m = g.gather(m, chans.to_vec());
            let m = g.softplus(m);
            let b = g.param(store, self.biases[k]);
            let b = g.gather(b, chans.to_vec());
            let lin = g.row_matvec(m, h);
            h = g.add(lin, b);
            if k + 1 < depth {
                let a = g.param(store, self.factors[k]);
                let a = g.gather(a, chans.to_vec());
                let ta = g.tanh(a);
                let th = g.tanh(h);
                let gate = g.mul(ta, th);
                h = g.add(h, gate);
            }
        }
        h
    }

    /// Bin probabilities on the tape for real-valued `y` (`R×1`).
    pub fn pmf_tape(&self, g: &mut Graph, store: &ParamStore, chans: &[usize], y: Var) -> Var {
        let n = chans.len();
        let up = g.add_scalar(y, 0.5);
        let down = g.add_scalar(y, -0.5);
        let both = g.concat_rows(&[up, down]);
        let mut cc = chans.to_vec();
        cc.extend_from_slice(chans);
        let l = self.logits_tape(g, store, &cc, both);
        let lu = g.slice_rows(l, 0, n);
        let ll = g.slice_rows(l, n, 2 * n);
        let signs: Vec<f64> = {
            let (u, d) = (g.value(lu), g.value(ll));
            (0..n).map(|r| if u.data()[r] + d.data()[r] > 0.0 { -1.0 } else { 1.0 }).collect()
        };
        let s = g.constant(Tensor::from_vec(n, 1, signs));
        let su = g.mul(lu, s);
        let sl = g.mul(ll, s);
        let pu = g.sigmoid(su);
        let pl = g.sigmoid(sl);
        let d = g.sub(pu, pl);
        g.abs(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (ParamStore, FactorizedDensity) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng);
        let m = FactorizedDensity::new(&mut init, "fd", 3, 3, 8, 4.0);
        for id in m.param_ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.3 * ((i as f64) * 1.7).sin();
            }
        }
        (store, m)
    }

    #[test]
    fn cdf_is_monotone_with_saturated_tails() {
        let (store, m) = model();
        for ch in 0..3 {
            let mut prev = 0.0;
            for i in -400..=400 {
                let c = m.cdf(&store, ch, i as f64 * 0.1);
                assert!(c >= prev);
                prev = c;
            }
            assert!(m.cdf(&store, ch, -200.0) < 1e-6);
            assert!(m.cdf(&store, ch, 200.0) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn tape_matches_scalar_path() {
        let (store, m) = model();
        let chans = vec![0, 2, 1, 1];
        let ys = [0.0, -3.0, 2.0, 40.0];
        let mut g = Graph::new();
        let y = g.input(Tensor::from_vec(4, 1, ys.to_vec()));
        let p = m.pmf_tape(&mut g, &store, &chans, y);
        for r in 0..4 {
            let want = m.pmf(&store, chans[r], ys[r]);
            assert!((g.value(p).data()[r] - want).abs() < 1e-14);
        }
    }
}
