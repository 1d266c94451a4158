//! Surface distance metrics.

use rayon::prelude::*;

use super::{Bvh, TriMesh};
use crate::Vec3;

/// Mean over `source` vertices of the distance to the closest point on
/// `target`. One-directional: pass the visible subset as `source`.
pub fn hausdorff_mean(source: &TriMesh, target: &TriMesh) -> f64 {
    hausdorff_mean_with(source.vertices(), &Bvh::new(target))
}

/// [`hausdorff_mean`] against a prebuilt hierarchy.
pub fn hausdorff_mean_with(points: &[Vec3], target: &Bvh) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let d: Vec<f64> = points
        .par_iter()
        .map(|p| target.closest_point(p).map_or(f64::INFINITY, |c| c.distance))
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}
