//! Ground-plane recovery and gravity alignment.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Frame, Label, PointCloud, Vec3};

#[derive(Debug, Error)]
pub enum GroundError {
    /// Not enough floor-labeled points: the frame is skipped.
    #[error("frame discarded: {found} floor points, need at least {required}")]
    NotEnoughFloor { found: usize, required: usize },
    #[error("ground plane fit failed: {0}")]
    Degenerate(String),
    #[error("invalid camera pose: {0}")]
    Pose(String),
}

/// Plane `{p : normal·p + offset = 0}` in the cloud's frame, oriented so the
/// origin (the camera) has non-negative height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: Vec3,
    pub offset: f64,
    pub camera_height: f64,
    pub inlier_count: usize,
}

impl GroundPlane {
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    /// The ground of an already gravity-aligned cloud.
    pub fn horizontal() -> Self {
        GroundPlane {
            normal: Vec3::z(),
            offset: 0.0,
            camera_height: 0.0,
            inlier_count: 0,
        }
    }

    fn from_normal_offset(mut normal: Vec3, mut offset: f64, inlier_count: usize) -> Self {
        let n = normal.norm();
        normal /= n;
        offset /= n;
        // Camera (origin) above the plane; for a camera lying on the plane
        // fall back to the camera-frame up direction (-y).
        if offset < 0.0 || (offset == 0.0 && normal.y > 0.0) {
            normal = -normal;
            offset = -offset;
        }
        GroundPlane {
            normal,
            offset,
            camera_height: offset,
            inlier_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacParams {
    pub iterations: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 200,
            threshold: 0.02,
            seed: 0,
        }
    }
}

/// Least-squares plane through `points`: centroid and the eigenvector of the
/// smallest covariance eigenvalue.
fn fit_plane(points: &[Vec3]) -> Option<(Vec3, f64)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    if values[1] <= 1e-12 * values[2].max(f64::MIN_POSITIVE) {
        return None; // collinear
    }
    let normal: Vec3 = eig.eigenvectors.column(imin).into();
    Some((normal, -normal.dot(&centroid)))
}

/// Fits the ground plane to the floor-labeled points of a camera-frame cloud:
/// RANSAC over plane hypotheses, then a least-squares refit on the inliers.
pub fn estimate_ground_plane(
    cloud: &PointCloud,
    min_floor_points: usize,
    params: &RansacParams,
) -> Result<GroundPlane, GroundError> {
    let floor: Vec<Vec3> = cloud
        .points
        .iter()
        .filter(|p| p.label == Some(Label::Floor))
        .map(|p| p.position)
        .collect();
    if floor.len() < min_floor_points.max(3) {
        return Err(GroundError::NotEnoughFloor {
            found: floor.len(),
            required: min_floor_points.max(3),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let count_inliers = |normal: &Vec3, offset: f64| {
        floor
            .iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= params.threshold)
            .count()
    };
    let mut best: Option<(Vec3, f64, usize)> = None;
    for _ in 0..params.iterations.max(1) {
        let a = floor[rng.random_range(0..floor.len())];
        let b = floor[rng.random_range(0..floor.len())];
        let c = floor[rng.random_range(0..floor.len())];
        let cross = (b - a).cross(&(c - a));
        let norm = cross.norm();
        if norm < 1e-12 {
            continue;
        }
        let normal = cross / norm;
        let offset = -normal.dot(&a);
        let inliers = count_inliers(&normal, offset);
        if best.is_none_or(|(_, _, n)| inliers > n) {
            best = Some((normal, offset, inliers));
        }
    }
    let (mut normal, mut offset, _) = best.ok_or_else(|| {
        GroundError::Degenerate("all sampled floor triples were collinear".into())
    })?;

    // Refit on inliers twice so the inlier set settles on the refined plane.
    let mut inlier_count = 0;
    for _ in 0..2 {
        let inliers: Vec<Vec3> = floor
            .iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= params.threshold)
            .copied()
            .collect();
        inlier_count = inliers.len();
        match fit_plane(&inliers) {
            Some((n, o)) => {
                // Keep orientation consistent with the hypothesis.
                let s = if n.dot(&normal) < 0.0 { -1.0 } else { 1.0 };
                normal = n * s;
                offset = o * s;
            }
            None => break,
        }
    }
    Ok(GroundPlane::from_normal_offset(normal, offset, inlier_count))
}

/// Known camera pose (robot mode): height above the floor plus pitch (positive
/// looking down) and roll, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub height: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl CameraPose {
    /// Ground plane expressed in the camera frame (x right, y down, z forward).
    pub fn ground_plane(&self) -> Result<GroundPlane, GroundError> {
        if !(self.height >= 0.0 && self.height.is_finite()) {
            return Err(GroundError::Pose(format!("height {} must be >= 0", self.height)));
        }
        if !self.pitch.is_finite() || !self.roll.is_finite() {
            return Err(GroundError::Pose("angles must be finite".into()));
        }
        let level_up = Vec3::new(0.0, -1.0, 0.0);
        let up = Rotation3::from_axis_angle(&Vec3::z_axis(), self.roll)
            * Rotation3::from_axis_angle(&Vec3::x_axis(), self.pitch)
            * level_up;
        Ok(GroundPlane {
            normal: up,
            offset: self.height,
            camera_height: self.height,
            inlier_count: 0,
        })
    }

    /// Parses `height`, `pitch` and `roll` keys, one `key value` per line.
    pub fn parse(text: &str) -> Result<Self, GroundError> {
        let (mut height, mut pitch, mut roll) = (None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, |c: char| c == '=' || c == ':' || c.is_whitespace());
            let key = parts.next().unwrap_or("");
            let value: f64 = parts
                .next()
                .map(str::trim)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| GroundError::Pose(format!("line {}: bad value", lineno + 1)))?;
            match key {
                "height" => height = Some(value),
                "pitch" => pitch = Some(value),
                "roll" => roll = Some(value),
                other => return Err(GroundError::Pose(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        Ok(CameraPose {
            height: height.ok_or_else(|| GroundError::Pose("missing `height`".into()))?,
            pitch: pitch.unwrap_or(0.0),
            roll: roll.unwrap_or(0.0),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GroundError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GroundError::Pose(format!("{}: {e}", path.display())))?;
        CameraPose::parse(&text)
    }
}

/// Rotation taking cloud coordinates to the gravity frame: rows are the new
/// x, y, z axes. z is the plane normal, x the projection of the old x axis
/// onto the plane (old z if x is nearly vertical).
pub fn gravity_rotation(plane: &GroundPlane) -> Matrix3<f64> {
    let z = plane.normal.normalize();
    let project = |v: Vec3| v - z * z.dot(&v);
    let mut x = project(Vec3::x());
    if x.norm() < 1e-6 {
        x = project(Vec3::z());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Rigidly maps the ground plane to z = 0 with +z up. Heights become the
/// signed distance to the plane and the camera origin lands at
/// `(0, 0, camera_height)`.
pub fn gravity_align(cloud: &PointCloud, plane: &GroundPlane) -> PointCloud {
    let rot = gravity_rotation(plane);
    let z = plane.normal.normalize();
    let mut out = cloud.clone();
    for p in &mut out.points {
        let q = rot * p.position;
        // Height straight from the plane equation for exactness.
        p.position = Vec3::new(q.x, q.y, z.dot(&p.position) + plane.offset);
        p.normal = p.normal.map(|n| (rot * n).normalize());
    }
    out.frame = Frame::GravityAligned;
    out
}
