//! Ideal code lengths.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Added to probabilities on the tape so a vanishing bin cannot produce an
/// infinite loss.
pub const LIKELIHOOD_EPS: f64 = 1e-9;

/// `Σ -log2 pmf(i, symbol_i)` over the stream.
pub fn rate_estimate<S: Copy + Into<i64>>(symbols: &[S], mut pmf: impl FnMut(usize, i64) -> f64) -> Result<f64> {
    let mut bits = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        let s: i64 = s.into();
        let p = pmf(i, s);
        if !(p > 0.0) {
            return Err(Error::ZeroProbability { symbol: s });
        }
        bits -= p.log2();
    }
    Ok(bits)
}

/// Total bits `-Σ log2(p + ε)` of a tensor of probabilities, as a `1×1` node.
pub fn bits_tape(g: &mut Graph, probs: Var) -> Var {
    let p = g.add_scalar(probs, LIKELIHOOD_EPS);
    let l = g.ln(p);
    let s = g.sum(l);
    g.scale(s, -1.0 / std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_256_is_eight_bits_per_symbol() {
        let syms: Vec<i32> = (0..100).collect();
        assert_eq!(rate_estimate(&syms, |_, _| 1.0 / 256.0).unwrap(), 800.0);
    }

    #[test]
    fn certain_symbol_costs_nothing() {
        assert_eq!(rate_estimate(&[5i32; 10], |_, _| 1.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_probability_is_an_error() {
        assert!(matches!(rate_estimate(&[3i32], |_, _| 0.0), Err(Error::ZeroProbability { symbol: 3 })));
    }
}
