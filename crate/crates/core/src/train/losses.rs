//! Training objectives.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::metrics::nn_indices;
use crate::tensor::Tensor;

/// Chamfer distance between the tape points `pred` and a fixed `target`,
/// squared-distance convention. Nearest neighbours are chosen on values.
pub fn chamfer_tape(g: &mut Graph, pred: Var, target: &Tensor) -> Var {
    let pv = g.value(pred).clone();
    let fwd: Vec<usize> = nn_indices(&pv, target).into_iter().map(|(_, j)| j).collect();
    let bwd: Vec<usize> = nn_indices(target, &pv).into_iter().map(|(_, j)| j).collect();
    let matched = g.constant(target.gather_rows(&fwd));
    let d1 = g.sub(pred, matched);
    let d1 = g.square(d1);
    let s1 = g.sum(d1);
    let a = g.scale(s1, 1.0 / pv.rows() as f64);
    let tgt = g.constant(target.clone());
    let back = g.gather(pred, bwd);
    let d2 = g.sub(back, tgt);
    let d2 = g.square(d2);
    let s2 = g.sum(d2);
    let b = g.scale(s2, 1.0 / target.rows() as f64);
    g.add(a, b)
}

/// Mean squared error `mean((eps - eps_hat)^2)`.
pub fn loss_recon(eps: &Tensor, eps_hat: &Tensor) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", eps.shape(), eps_hat.shape())));
    }
    let n = eps.len().max(1) as f64;
    Ok(eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn loss_recon_tape(g: &mut Graph, eps: Var, eps_hat: Var) -> Var {
    let d = g.sub(eps_hat, eps);
    let d = g.square(d);
    g.mean(d)
}
