//! Geometry quality and rate metrics.
//!
//! Chamfer distance uses squared nearest-neighbour distances and sums the
//! two directional means. D1 PSNR takes the larger of the two directional
//! MSEs against a caller-supplied peak.

use serde::{Deserialize, Serialize};

use super::kdtree::{sq_dist, KdTree};
use super::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned by [`d1_psnr`] when the reconstruction is exact.
pub const PSNR_CAP: f64 = 999.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdResult {
    pub bd_psnr: f64,
    /// Percent rate change of curve b relative to curve a at equal quality.
    pub bd_rate: f64,
}

/// Squared distance from every row of `from` to its nearest row of `to`.
pub fn nn_sq_dists(from: &Tensor, to: &Tensor) -> Vec<f64> {
    nn_indices(from, to).into_iter().map(|(d, _)| d).collect()
}

/// `(squared distance, index)` of the nearest row of `to` for every row of `from`.
pub fn nn_indices(from: &Tensor, to: &Tensor) -> Vec<(f64, usize)> {
    if to.rows() <= 64 {
        (0..from.rows())
            .map(|i| {
                let q = from.row(i);
                let mut best = (f64::INFINITY, 0usize);
                for j in 0..to.rows() {
                    let d = sq_dist(q, to.row(j));
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best
            })
            .collect()
    } else {
        let tree = KdTree::new(to);
        (0..from.rows()).map(|i| tree.nearest(from.row(i))).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ab = mean(&nn_sq_dists(a.points(), b.points()));
    let ba = mean(&nn_sq_dists(b.points(), a.points()));
    Ok(ab + ba)
}

/// Diagonal length of the bounding box of `pc`.
pub fn default_peak(pc: &PointCloud) -> f64 {
    let (lo, hi) = pc.bounds();
    (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
}

/// Point-to-point geometry PSNR in dB. `peak = None` uses [`default_peak`] of `reference`.
pub fn d1_psnr(reference: &PointCloud, rec: &PointCloud, peak: Option<f64>) -> Result<f64> {
    if reference.is_empty() || rec.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let peak = peak.unwrap_or_else(|| default_peak(reference));
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let a = mean(&nn_sq_dists(reference.points(), rec.points()));
    let b = mean(&nn_sq_dists(rec.points(), reference.points()));
    let mse = a.max(b);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Least-squares polynomial in a centred and scaled variable.
struct Poly {
    center: f64,
    scale: f64,
    coef: Vec<f64>,
}

impl Poly {
    fn fit(x: &[f64], y: &[f64], degree: usize) -> Result<Poly> {
        let n = x.len();
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let center = 0.5 * (lo + hi);
        let scale = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
        let cols = degree + 1;
        // Householder QR on the Vandermonde system.
        let mut a: Vec<Vec<f64>> =
            x.iter().map(|&xi| { let t = (xi - center) / scale; (0..cols).map(|p| t.powi(p as i32)).collect() }).collect();
        let mut b = y.to_vec();
        for k in 0..cols {
            let norm = (k..n).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument("degenerate abscissae for polynomial fit".into()));
            }
            let alpha = if a[k][k] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (k..n).map(|i| a[i][k]).collect();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            for j in k..cols {
                let dot: f64 = (k..n).map(|i| v[i - k] * a[i][j]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..n {
                    a[i][j] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..n).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                b[i] -= f * v[i - k];
            }
        }
        let mut coef = vec![0.0; cols];
        for k in (0..cols).rev() {
            let s: f64 = (k + 1..cols).map(|j| a[k][j] * coef[j]).sum();
            if a[k][k].abs() < 1e-300 {
                return Err(Error::InvalidArgument("rank-deficient polynomial fit".into()));
            }
            coef[k] = (b[k] - s) / a[k][k];
        }
        Ok(Poly { center, scale, coef })
    }

    /// `∫_lo^hi p(x) dx`.
    fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let t = (x - self.center) / self.scale;
            self.coef.iter().enumerate().map(|(p, c)| c * t.powi(p as i32 + 1) / (p as f64 + 1.0)).sum::<f64>()
        };
        self.scale * (anti(hi) - anti(lo))
    }
}

fn validate_curve(c: &[RdPoint], name: &str) -> Result<()> {
    if c.len() < 4 {
        return Err(Error::InvalidArgument(format!("curve {name} needs at least 4 points, got {}", c.len())));
    }
    for w in c.windows(2) {
        if !(w[1].bpp > w[0].bpp) {
            return Err(Error::InvalidArgument(format!("curve {name} must be strictly increasing in bpp")));
        }
    }
    if c.iter().any(|p| !(p.bpp > 0.0) || !p.psnr.is_finite()) {
        return Err(Error::InvalidArgument(format!("curve {name} has non-positive bpp or non-finite psnr")));
    }
    Ok(())
}

/// Bjøntegaard deltas of curve `b` relative to anchor `a`, using cubic fits
/// in the log10-rate domain.
pub fn bd_metrics(a: &[RdPoint], b: &[RdPoint]) -> Result<BdResult> {
    validate_curve(a, "a")?;
    validate_curve(b, "b")?;
    let ra: Vec<f64> = a.iter().map(|p| p.bpp.log10()).collect();
    let rb: Vec<f64> = b.iter().map(|p| p.bpp.log10()).collect();
    let pa: Vec<f64> = a.iter().map(|p| p.psnr).collect();
    let pb: Vec<f64> = b.iter().map(|p| p.psnr).collect();

    let overlap = |u: &[f64], v: &[f64]| -> Result<(f64, f64)> {
        let lo = u.iter().cloned().fold(f64::INFINITY, f64::min).max(v.iter().cloned().fold(f64::INFINITY, f64::min));
        let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        if hi > lo {
            Ok((lo, hi))
        } else {
            Err(Error::InvalidArgument("rate-distortion curves do not overlap".into()))
        }
    };

    let (lo, hi) = overlap(&ra, &rb)?;
    let fa = Poly::fit(&ra, &pa, 3)?;
    let fb = Poly::fit(&rb, &pb, 3)?;
    let bd_psnr = (fb.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);

    let (plo, phi) = overlap(&pa, &pb)?;
    let ga = Poly::fit(&pa, &ra, 3)?;
    let gb = Poly::fit(&pb, &rb, 3)?;
    let avg = (gb.integrate(plo, phi) - ga.integrate(plo, phi)) / (phi - plo);
    let bd_rate = (10f64.powf(avg) - 1.0) * 100.0;
    Ok(BdResult { bd_psnr, bd_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc(v: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_points(v).unwrap()
    }

    #[test]
    fn chamfer_hand_cases() {
        let a = pc(&[[0.0; 3]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn psnr_hand_cases() {
        let a = pc(&[[0.0; 3]]);
        let b = pc(&[[0.0, 0.0, 1.0]]);
        assert_eq!(d1_psnr(&a, &b, Some(1.0)).unwrap(), 0.0);
        assert_eq!(d1_psnr(&a, &a, Some(1.0)).unwrap(), PSNR_CAP);
        let p1 = d1_psnr(&a, &b, Some(3.0)).unwrap();
        let p2 = d1_psnr(&a, &b, Some(6.0)).unwrap();
        assert!((p2 - p1 - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!(d1_psnr(&a, &b, Some(0.0)).is_err());
    }

    fn curve(pts: &[(f64, f64)]) -> Vec<RdPoint> {
        pts.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()
    }

    #[test]
    fn bd_identical_and_shifted() {
        let a = curve(&[(0.1, 30.0), (0.2, 33.5), (0.4, 36.0), (0.8, 38.2)]);
        let r = bd_metrics(&a, &a).unwrap();
        assert!(r.bd_psnr.abs() < 1e-12 && r.bd_rate.abs() < 1e-9);
        let b: Vec<RdPoint> = a.iter().map(|p| RdPoint { bpp: p.bpp, psnr: p.psnr + 1.0 }).collect();
        assert!((bd_metrics(&a, &b).unwrap().bd_psnr - 1.0).abs() < 1e-9);
        assert!(bd_metrics(&a, &b).unwrap().bd_rate < 0.0);
    }

    #[test]
    fn bd_rejects_bad_curves() {
        let a = curve(&[(0.1, 30.0), (0.2, 33.5), (0.4, 36.0)]);
        assert!(bd_metrics(&a, &a).is_err());
        let a = curve(&[(0.1, 30.0), (0.2, 33.5), (0.4, 36.0), (0.8, 38.0)]);
        let far = curve(&[(10.0, 30.0), (20.0, 33.5), (40.0, 36.0), (80.0, 38.0)]);
        assert!(bd_metrics(&a, &far).is_err());
        let unsorted = curve(&[(0.2, 30.0), (0.1, 33.5), (0.4, 36.0), (0.8, 38.0)]);
        assert!(bd_metrics(&unsorted, &a).is_err());
    }
}
