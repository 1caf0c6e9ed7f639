//! Per-point surface normals from k-nearest-neighbor PCA.

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::cloud::{Frame, PointCloud, Vec3};
use crate::overseg::OversegError;

/// Ratio λ1/λ2 below which a neighborhood counts as rank deficient (a line
/// or a single point).
const DEGENERATE_RATIO: f64 = 1e-10;

pub(crate) fn build_index(positions: &[Vec3]) -> KdTree<f64, usize, [f64; 3]> {
    let mut tree = KdTree::with_capacity(3, 32);
    for (i, p) in positions.iter().enumerate() {
        // Positions are validated finite by callers.
        tree.add([p.x, p.y, p.z], i).expect("finite point");
    }
    tree
}

/// Smallest-eigenvalue eigenvector of a neighborhood's scatter matrix, or
/// `None` when the neighborhood has rank < 2.
pub(crate) fn pca_normal(neighbors: impl Iterator<Item = Vec3> + Clone) -> Option<Vec3> {
    let n = neighbors.clone().count() as f64;
    if n < 3.0 {
        return None;
    }
    let centroid = neighbors.clone().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l1, l2) = (eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if l2 <= 0.0 || l1 <= DEGENERATE_RATIO * l2 {
        return None;
    }
    Some(eig.eigenvectors.column(order[0]).normalize())
}

/// Flips `n` toward the sensor (camera frame) or into the upper hemisphere
/// (gravity frame; horizontal normals point to +x, then +y).
pub(crate) fn orient_normal(n: Vec3, position: &Vec3, frame: Frame) -> Vec3 {
    let flip = match frame {
        Frame::Camera => n.dot(&(-position)) < 0.0,
        Frame::GravityAligned => {
            const EPS: f64 = 1e-9;
            if n.z.abs() > EPS {
                n.z < 0.0
            } else if n.x.abs() > EPS {
                n.x < 0.0
            } else {
                n.y < 0.0
            }
        }
    };
    if flip {
        -n
    } else {
        n
    }
}

/// The frame's up direction, used for degenerate neighborhoods.
fn up_vector(frame: Frame) -> Vec3 {
    match frame {
        Frame::GravityAligned => Vec3::z(),
        Frame::Camera => Vec3::new(0.0, -1.0, 0.0),
    }
}

/// Gives every point a unit normal from the PCA of its `k` nearest neighbors
/// (the point itself included). Rank-deficient neighborhoods get the up
/// vector and `degenerate_normal = true`.
pub fn compute_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud, OversegError> {
    if k < 3 {
        return Err(OversegError::Parameter(format!("normal neighbor count {k} must be >= 3")));
    }
    if cloud.len() < k {
        return Err(OversegError::Parameter(format!(
            "cloud has {} points, fewer than k = {k}",
            cloud.len()
        )));
    }
    cloud
        .validate()
        .map_err(|e| OversegError::Parameter(e.to_string()))?;
    let positions: Vec<Vec3> = cloud.positions().copied().collect();
    let tree = build_index(&positions);
    let frame = cloud.frame;

    let normals: Vec<Option<Vec3>> = positions
        .par_iter()
        .map(|p| {
            let found = tree
                .nearest(&[p.x, p.y, p.z], k, &squared_euclidean)
                .expect("finite query");
            pca_normal(found.iter().map(|(_, &i)| positions[i]))
                .map(|n| orient_normal(n, p, frame))
        })
        .collect();

    let mut out = cloud.clone();
    for (point, normal) in out.points.iter_mut().zip(normals) {
        point.degenerate_normal = normal.is_none();
        point.normal = Some(normal.unwrap_or_else(|| up_vector(frame)));
    }
    Ok(out)
}
