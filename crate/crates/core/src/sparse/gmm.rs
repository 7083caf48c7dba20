//! Diagonal Gaussian mixture likelihood of a cloud under the sparse anchors.

use std::f64::consts::PI;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    /// `N_s×3` component means (`X_s + v`).
    pub means: Tensor,
    /// `N_s×3` per-axis variances.
    pub vars: Tensor,
    /// `N_s` mixture weights.
    pub weights: Vec<f64>,
}

impl GmmParams {
    pub fn uniform(means: Tensor, vars: Tensor) -> Self {
        let n = means.rows();
        GmmParams { means, vars, weights: vec![1.0 / n as f64; n] }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `Σ_j log Σ_i w_i N(x_j | mean_i, diag(var_i))`.
pub fn gmm_log_likelihood(points: &Tensor, gmm: &GmmParams) -> Result<f64> {
    let k = gmm.means.rows();
    if gmm.vars.shape() != (k, 3) || gmm.means.cols() != 3 || gmm.weights.len() != k {
        return Err(Error::Shape("mixture means, variances and weights disagree".into()));
    }
    if gmm.weights.iter().any(|w| *w < 0.0) || !(gmm.weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::InvalidArgument("mixture weights must be non-negative and not all zero".into()));
    }
    let log_w: Vec<f64> = gmm.weights.iter().map(|w| w.ln()).collect();
    let log_norm: Vec<f64> =
        (0..k).map(|i| -0.5 * gmm.vars.row(i).iter().map(|v| (2.0 * PI * v).ln()).sum::<f64>()).collect();
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for j in 0..points.rows() {
        let x = points.row(j);
        for i in 0..k {
            let m = gmm.means.row(i);
            let v = gmm.vars.row(i);
            let q: f64 = (0..3).map(|a| (x[a] - m[a]) * (x[a] - m[a]) / v[a]).sum();
            terms[i] = log_w[i] + log_norm[i] - 0.5 * q;
        }
        total += log_sum_exp(&terms);
    }
    Ok(total)
}

/// Mean negative log-likelihood per point under uniform weights, on the tape.
pub fn gmm_nll_tape(g: &mut Graph, points: &Tensor, means: Var, vars: Var) -> Var {
    let k = g.shape(means).0;
    let n = points.rows();
    let x = g.constant(points.clone());
    let x2 = g.constant(points.map(|v| v * v));
    let log_var = g.ln(vars);
    let neg = g.scale(log_var, -1.0);
    let inv = g.exp(neg);
    // Σ_a (x_a - m_a)^2 / v_a = x²·inv - 2 x·(m·inv) + Σ m²·inv
    let a = g.matmul_nt(x2, inv);
    let m_inv = g.mul(means, inv);
    let b = g.matmul_nt(x, m_inv);
    let m2 = g.mul(means, m_inv);
    let c = g.row_sums(m2);
    let lv = g.row_sums(log_var);
    let c = g.add(c, lv);
    let c = g.transpose(c);
    let b2 = g.scale(b, -2.0);
    let q = g.add(a, b2);
    let q = g.add_row(q, c);
    let logits = g.scale(q, -0.5);
    let logits = g.add_scalar(logits, -1.5 * (2.0 * PI).ln() - (k as f64).ln());
    let lse = g.logsumexp_rows(logits);
    let s = g.sum(lse);
    g.scale(s, -1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_unit_component_at_the_query() {
        let gmm = GmmParams::uniform(Tensor::zeros(1, 3), Tensor::full(1, 3, 1.0));
        let ll = gmm_log_likelihood(&Tensor::zeros(1, 3), &gmm).unwrap();
        assert!((ll + 1.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((ll + 2.75682).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_are_rejected() {
        let mut gmm = GmmParams::uniform(Tensor::zeros(1, 3), Tensor::full(1, 3, 1.0));
        gmm.weights = vec![0.0];
        assert!(gmm_log_likelihood(&Tensor::zeros(1, 3), &gmm).is_err());
    }

    #[test]
    fn tape_matches_direct_evaluation() {
        let pts = Tensor::from_rows(&[[0.1, 0.2, -0.3], [0.4, -0.1, 0.0], [-0.2, 0.3, 0.25]]);
        let means = Tensor::from_rows(&[[0.0, 0.1, -0.2], [0.3, 0.0, 0.1]]);
        let vars = Tensor::from_rows(&[[0.01, 0.02, 0.03], [0.05, 0.01, 0.02]]);
        let direct = gmm_log_likelihood(&pts, &GmmParams::uniform(means.clone(), vars.clone())).unwrap();
        let mut g = Graph::new();
        let m = g.input(means);
        let v = g.input(vars);
        let nll = gmm_nll_tape(&mut g, &pts, m, v);
        assert!((g.value(nll).item() + direct / 3.0).abs() < 1e-10);
    }
}
