//! Point-cloud data model, file IO, sampling primitives and quality metrics.

mod cloud;
pub mod io;
mod kdtree;
pub mod metrics;
pub mod sampling;

pub use cloud::{NormalizationInfo, PointCloud};
pub use kdtree::KdTree;
pub use metrics::{bd_metrics, chamfer_distance, d1_psnr, default_peak, BdResult, RdPoint, PSNR_CAP};
pub use sampling::{farthest_point_sampling, farthest_point_sampling_from, fps_canonical, knn};
