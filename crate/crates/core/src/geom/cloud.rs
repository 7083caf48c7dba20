use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps normalized coordinates back to the original frame:
/// `original = normalized * scale + center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub center: [f64; 3],
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Tensor,
    pub norm: Option<NormalizationInfo>,
}

impl PointCloud {
    /// Builds a cloud from an `N×3` tensor, rejecting empty or non-finite input.
    pub fn new(points: Tensor) -> Result<Self> {
        if points.cols() != 3 {
            return Err(Error::Shape(format!("point cloud must be Nx3, got {}x{}", points.rows(), points.cols())));
        }
        if points.rows() == 0 {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = (0..points.rows()).find(|&i| !points.row(i).iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(PointCloud { points, norm: None })
    }

    pub fn from_points(pts: &[[f64; 3]]) -> Result<Self> {
        Self::new(Tensor::from_rows(pts))
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points.point(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    pub fn into_points(self) -> Tensor {
        self.points
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud { points: self.points.gather_rows(idx), norm: self.norm }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Centers the bounding box at the origin and scales its longest edge to 1.
    pub fn normalize_unit_cube(&self) -> Result<PointCloud> {
        if let Some(i) = (0..self.len()).find(|&i| !self.points.row(i).iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        let (lo, hi) = self.bounds();
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let scale = if extent > 0.0 { extent } else { 1.0 };
        let mut pts = self.points.clone();
        for r in 0..pts.rows() {
            let row = pts.row_mut(r);
            for a in 0..3 {
                row[a] = ((row[a] - center[a]) / scale).clamp(-0.5, 0.5);
            }
        }
        Ok(PointCloud { points: pts, norm: Some(NormalizationInfo { center, scale }) })
    }

    /// Inverse of [`PointCloud::normalize_unit_cube`] using `info`.
    pub fn denormalize_with(&self, info: &NormalizationInfo) -> PointCloud {
        let mut pts = self.points.clone();
        for r in 0..pts.rows() {
            let row = pts.row_mut(r);
            for a in 0..3 {
                row[a] = row[a] * info.scale + info.center[a];
            }
        }
        PointCloud { points: pts, norm: None }
    }

    /// Undoes the recorded normalization; identity when none is recorded.
    pub fn denormalize(&self) -> PointCloud {
        match &self.norm {
            Some(info) => self.denormalize_with(info),
            None => self.clone(),
        }
    }
}
