//! Conditional Laplace model for quantized symbols.

use super::cdf::CdfTable;
use crate::autograd;
use crate::error::Result;

/// Laplace CDF with location `mu` and scale `b`.
pub fn laplace_cdf(x: f64, mu: f64, b: f64) -> f64 {
    let d = (x - mu) / b;
    if d < 0.0 {
        0.5 * d.exp()
    } else {
        1.0 - 0.5 * (-d).exp()
    }
}

/// Mass of the unit bin centred at `y`: `F(y + 1/2) - F(y - 1/2)`.
pub fn laplace_pmf(y: f64, mu: f64, b: f64) -> f64 {
    autograd::laplace_bin(y, mu, b).0
}

/// Table over `[-q_max, q_max]`; the end symbols absorb the tails.
pub fn laplace_table(mu: f64, b: f64, q_max: i64, precision: u32) -> Result<CdfTable> {
    let lo = -q_max;
    let pmf: Vec<f64> = (lo..=q_max)
        .map(|k| {
            let y = k as f64;
            if k == lo && k == q_max {
                1.0
            } else if k == lo {
                laplace_cdf(y + 0.5, mu, b)
            } else if k == q_max {
                1.0 - laplace_cdf(y - 0.5, mu, b)
            } else {
                laplace_pmf(y, mu, b)
            }
        })
        .collect();
    CdfTable::from_pmf(&pmf, lo, precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_centre_bin() {
        assert!((laplace_pmf(0.0, 0.0, 1.0) - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((laplace_pmf(0.0, 0.0, 1.0) - 0.393469).abs() < 1e-6);
    }

    #[test]
    fn pmf_is_cdf_difference() {
        for &(y, mu, b) in &[(0.0, 0.3, 0.7), (3.0, -1.2, 2.0), (-4.0, 0.0, 0.5)] {
            let direct = laplace_cdf(y + 0.5, mu, b) - laplace_cdf(y - 0.5, mu, b);
            assert!((laplace_pmf(y, mu, b) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn table_total_and_mode() {
        let t = laplace_table(2.2, 0.8, 20, 16).unwrap();
        assert_eq!(t.support(), 41);
        let best = (-20..=20).max_by_key(|&s| t.freq(s).unwrap()).unwrap();
        assert_eq!(best, 2);
    }
}
