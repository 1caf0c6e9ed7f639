//! The 14-dimensional patch descriptor.
//!
//! Index contract (bump [`FEATURE_CONTRACT_VERSION`] when it changes):
//!
//! | idx | feature |
//! |-----|---------|
//! | 0 | pointness λ0 (m²) |
//! | 1 | surfaceness λ1 − λ0 |
//! | 2 | linearness λ2 − λ1 |
//! | 3 | centroid height (m) |
//! | 4 | lowest point height |
//! | 5 | highest point height |
//! | 6 | angle of the mean normal to the ground plane (rad) |
//! | 7 | circular std of per-point normal angles (rad) |
//! | 8..11 | mean L, a, b |
//! | 11..14 | std L, a, b |

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{PointCloud, Vec3};
use crate::color::srgb_to_lab;
use crate::overseg::{Patch, PatchGraph};

pub const FEATURE_DIM: usize = 14;
pub const FEATURE_CONTRACT_VERSION: u32 = 1;

/// Lower clamp on the mean resultant length; caps the circular std at 4.
const MIN_RESULTANT: f64 = 3.354_626_279_025_119e-4; // e^-8
pub const MAX_CIRC_STD: f64 = 4.0;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "pointness",
    "surfaceness",
    "linearness",
    "centroid_height",
    "min_height",
    "max_height",
    "normal_angle",
    "normal_circ_std",
    "mean_l",
    "mean_a",
    "mean_b",
    "std_l",
    "std_a",
    "std_b",
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("patch has {0} points; at least 3 are needed")]
    TooFewPoints(usize),
    #[error("point {0} has no normal")]
    MissingNormal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn values(&self) -> &[f64; FEATURE_DIM] {
        &self.0
    }

    /// Checks the documented range and ordering constraints.
    pub fn check_invariants(&self) -> Result<(), String> {
        let v = &self.0;
        let tol = 1e-9;
        if v.iter().any(|x| !x.is_finite()) {
            return Err("non-finite value".into());
        }
        if v[..3].iter().any(|&x| x < -tol) {
            return Err(format!("negative spectral feature {:?}", &v[..3]));
        }
        if !(v[4] <= v[3] + tol && v[3] <= v[5] + tol) {
            return Err(format!("height order violated {:?}", &v[3..6]));
        }
        if !(-tol..=std::f64::consts::FRAC_PI_2 + tol).contains(&v[6]) {
            return Err(format!("normal angle {} out of range", v[6]));
        }
        if v[7] < 0.0 || v[7] > MAX_CIRC_STD + tol {
            return Err(format!("circular std {} out of range", v[7]));
        }
        if !(0.0..=100.0).contains(&v[8]) {
            return Err(format!("mean L {} out of range", v[8]));
        }
        if v[11..].iter().any(|&x| x < 0.0) {
            return Err("negative color std".into());
        }
        Ok(())
    }
}

fn positions<'a>(patch: &'a Patch, cloud: &'a PointCloud) -> impl Iterator<Item = Vec3> + Clone + 'a {
    patch.point_indices.iter().map(|&i| cloud.points[i].position)
}

/// `(λ0, λ1 − λ0, λ2 − λ1)` of the population covariance of member positions.
pub fn spectral_features(patch: &Patch, cloud: &PointCloud) -> Result<[f64; 3], FeatureError> {
    let n = patch.point_indices.len();
    if n < 3 {
        return Err(FeatureError::TooFewPoints(n));
    }
    let mean = positions(patch, cloud).sum::<Vec3>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in positions(patch, cloud) {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let mut l: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|&x| x.max(0.0))
        .collect();
    l.sort_by(f64::total_cmp);
    Ok([l[0], l[1] - l[0], l[2] - l[1]])
}

/// `(centroid z, min z, max z)` in a gravity-aligned cloud.
pub fn height_features(patch: &Patch, cloud: &PointCloud) -> [f64; 3] {
    let n = patch.point_indices.len() as f64;
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in positions(patch, cloud) {
        sum += p.z;
        lo = lo.min(p.z);
        hi = hi.max(p.z);
    }
    // Guard the mean against rounding just outside [lo, hi].
    [(sum / n).clamp(lo, hi), lo, hi]
}

/// `(mean angle, circular std)` of member normals relative to the ground
/// plane, both in radians.
///
/// Normals are sign-aligned to the dominant axis of their orientation tensor
/// before summing, so nearly horizontal normals with random vertical sign
/// (typical of walls) do not cancel. For upward-facing patches this agrees
/// with plain upper-hemisphere canonicalization.
pub fn normal_features(patch: &Patch, cloud: &PointCloud) -> Result<[f64; 2], FeatureError> {
    let mut normals = Vec::with_capacity(patch.point_indices.len());
    for &i in &patch.point_indices {
        normals.push(cloud.points[i].normal.ok_or(FeatureError::MissingNormal(i))?);
    }
    if normals.is_empty() {
        return Ok([0.0, MAX_CIRC_STD]);
    }

    let mut tensor = Matrix3::zeros();
    for n in &normals {
        tensor += n * n.transpose();
    }
    let eig = SymmetricEigen::new(tensor);
    let imax = eig.eigenvalues.imax();
    let mut axis: Vec3 = eig.eigenvectors.column(imax).into_owned();
    if axis.z < 0.0 {
        axis = -axis;
    }
    let sum = normals.iter().fold(Vec3::zeros(), |acc, n| {
        if n.dot(&axis) < 0.0 {
            acc - n
        } else {
            acc + n
        }
    });
    if sum.norm() <= 1e-12 {
        return Ok([0.0, MAX_CIRC_STD]);
    }
    let mean_angle = (sum.normalize().z.abs().min(1.0)).asin();

    let (mut c, mut s) = (0.0, 0.0);
    for n in &normals {
        let theta = (n.z.abs() / n.norm()).min(1.0).asin();
        c += (2.0 * theta).cos();
        s += (2.0 * theta).sin();
    }
    let k = normals.len() as f64;
    let r = ((c / k).powi(2) + (s / k).powi(2)).sqrt().clamp(MIN_RESULTANT, 1.0);
    Ok([mean_angle, (-2.0 * r.ln()).max(0.0).sqrt()])
}

/// Per-channel mean and population std of member colors in CIELAB.
pub fn color_features(patch: &Patch, cloud: &PointCloud) -> ([f64; 3], [f64; 3]) {
    let n = patch.point_indices.len() as f64;
    let labs: Vec<[f64; 3]> = patch
        .point_indices
        .iter()
        .map(|&i| srgb_to_lab(cloud.points[i].color))
        .collect();
    let mut mean = [0.0; 3];
    for lab in &labs {
        for k in 0..3 {
            mean[k] += lab[k] / n;
        }
    }
    let mut var = [0.0; 3];
    for lab in &labs {
        for k in 0..3 {
            var[k] += (lab[k] - mean[k]).powi(2) / n;
        }
    }
    mean[0] = mean[0].clamp(0.0, 100.0);
    (mean, var.map(f64::sqrt))
}

pub fn patch_features(patch: &Patch, cloud: &PointCloud) -> Result<FeatureVector, FeatureError> {
    let spectral = spectral_features(patch, cloud)?;
    let heights = height_features(patch, cloud);
    let normal = normal_features(patch, cloud)?;
    let (mean, std) = color_features(patch, cloud);
    let mut v = [0.0; FEATURE_DIM];
    v[..3].copy_from_slice(&spectral);
    v[3..6].copy_from_slice(&heights);
    v[6..8].copy_from_slice(&normal);
    v[8..11].copy_from_slice(&mean);
    v[11..].copy_from_slice(&std);
    Ok(FeatureVector(v))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractedFeatures {
    /// `(patch id, features)` in increasing patch id order.
    pub vectors: Vec<(usize, FeatureVector)>,
    /// Patches skipped because their features could not be computed.
    pub skipped: usize,
}

/// Features for every patch of a gravity-aligned cloud with normals.
pub fn extract_features(graph: &PatchGraph, cloud: &PointCloud) -> ExtractedFeatures {
    let results: Vec<(usize, Result<FeatureVector, FeatureError>)> = graph
        .patches
        .par_iter()
        .map(|p| (p.id, patch_features(p, cloud)))
        .collect();
    let mut out = ExtractedFeatures::default();
    for (id, r) in results {
        match r {
            Ok(v) => out.vectors.push((id, v)),
            Err(_) => out.skipped += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Frame, Point};
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn patch_of(cloud: &PointCloud) -> Patch {
        Patch {
            id: 0,
            point_indices: (0..cloud.len()).collect(),
            centroid: Vec3::zeros(),
            mean_normal: Vec3::z(),
            mean_color_lab: [0.0; 3],
        }
    }

    fn cloud_with(points: Vec<(Vec3, Vec3, [u8; 3])>) -> PointCloud {
        PointCloud::new(
            points
                .into_iter()
                .map(|(p, n, c)| {
                    let mut pt = Point::new(p, c);
                    pt.normal = Some(n);
                    pt
                })
                .collect(),
            Frame::GravityAligned,
        )
    }

    /// Cyclic Jacobi eigenvalue iteration, independent of nalgebra's solver.
    fn jacobi_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
        for _ in 0..100 {
            let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
            if off < 1e-30 {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut b = a;
                for k in 0..3 {
                    b[k][p] = c * a[k][p] - s * a[k][q];
                    b[k][q] = s * a[k][p] + c * a[k][q];
                }
                let mut r = b;
                for k in 0..3 {
                    r[p][k] = c * b[p][k] - s * b[q][k];
                    r[q][k] = s * b[p][k] + c * b[q][k];
                }
                a = r;
            }
        }
        let mut l = [a[0][0], a[1][1], a[2][2]];
        l.sort_by(f64::total_cmp);
        l
    }

    #[test]
    fn identical_points_have_zero_spectrum() {
        let cloud = cloud_with(vec![(Vec3::new(1.0, 2.0, 3.0), Vec3::z(), [0; 3]); 5]);
        assert_eq!(spectral_features(&patch_of(&cloud), &cloud).unwrap(), [0.0; 3]);
    }

    #[test]
    fn planar_patch_has_no_pointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = (0..200)
            .map(|_| (Vec3::new(rng.random(), rng.random(), 0.5), Vec3::z(), [0; 3]))
            .collect();
        let cloud = cloud_with(pts);
        assert!(spectral_features(&patch_of(&cloud), &cloud).unwrap()[0] <= 1e-12);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cloud = cloud_with(vec![(Vec3::zeros(), Vec3::z(), [0; 3]); 2]);
        assert_eq!(
            spectral_features(&patch_of(&cloud), &cloud),
            Err(FeatureError::TooFewPoints(2))
        );
    }

    #[test]
    fn spectral_sum_matches_independent_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pts: Vec<_> = (0..100)
                .map(|_| {
                    let p = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.2..0.2),
                    );
                    (p, Vec3::z(), [0; 3])
                })
                .collect();
            let n = pts.len() as f64;
            let mean = pts.iter().map(|(p, _, _)| *p).sum::<Vec3>() / n;
            let mut cov = [[0.0; 3]; 3];
            for (p, _, _) in &pts {
                let d = p - mean;
                for r in 0..3 {
                    for c in 0..3 {
                        cov[r][c] += d[r] * d[c] / n;
                    }
                }
            }
            let oracle = jacobi_eigenvalues(cov);
            let cloud = cloud_with(pts);
            let f = spectral_features(&patch_of(&cloud), &cloud).unwrap();
            assert!((f[0] - oracle[0]).abs() < 1e-9);
            assert!((f[0] + f[1] + f[2] - oracle[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn floor_heights_are_zero() {
        let pts = (0..10)
            .map(|i| (Vec3::new(i as f64 * 0.1, 0.0, 0.0), Vec3::z(), [0; 3]))
            .collect();
        let cloud = cloud_with(pts);
        let h = height_features(&patch_of(&cloud), &cloud);
        assert!(h.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn horizontal_and_vertical_normals() {
        let flat = cloud_with(vec![(Vec3::zeros(), Vec3::z(), [0; 3]); 10]);
        let [a, s] = normal_features(&patch_of(&flat), &flat).unwrap();
        assert!((a - FRAC_PI_2).abs() < 1e-12 && s.abs() < 1e-6);

        let wall = cloud_with(vec![(Vec3::zeros(), Vec3::x(), [0; 3]); 10]);
        let [a, _] = normal_features(&patch_of(&wall), &wall).unwrap();
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn noisy_wall_normals_do_not_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = (0..400)
            .map(|_| {
                let n = Vec3::new(1.0, rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05))
                    .normalize();
                // Orient like the gravity-frame convention: +z wins.
                let n = if n.z < 0.0 { -n } else { n };
                (Vec3::zeros(), n, [0; 3])
            })
            .collect();
        let cloud = cloud_with(pts);
        let [a, _] = normal_features(&patch_of(&cloud), &cloud).unwrap();
        assert!(a < 0.05, "{a}");
    }

    #[test]
    fn two_angle_mixture_circular_std() {
        // θ = 0 (horizontal normal) and θ = π/4; R = sqrt(0.5) → sqrt(ln 2).
        let diag = Vec3::new(FRAC_PI_4.cos(), 0.0, FRAC_PI_4.sin());
        let mut pts = vec![(Vec3::zeros(), Vec3::x(), [0; 3]); 50];
        pts.extend(vec![(Vec3::zeros(), diag, [0; 3]); 50]);
        let cloud = cloud_with(pts);
        let [_, s] = normal_features(&patch_of(&cloud), &cloud).unwrap();
        assert!((s - 2f64.ln().sqrt()).abs() < 1e-9, "{s}");
        assert!((s - 0.8326).abs() < 1e-4);
    }

    #[test]
    fn cancelling_normals_hit_the_clamp() {
        let pts = vec![(Vec3::zeros(), Vec3::zeros(), [0; 3]); 4];
        let cloud = cloud_with(pts);
        assert_eq!(normal_features(&patch_of(&cloud), &cloud).unwrap(), [0.0, MAX_CIRC_STD]);
    }

    #[test]
    fn white_and_black_colors() {
        let white = cloud_with(vec![(Vec3::zeros(), Vec3::z(), [255; 3]); 8]);
        let (m, s) = color_features(&patch_of(&white), &white);
        assert!((m[0] - 100.0).abs() <= 0.01 && m[1].abs() <= 0.01 && m[2].abs() <= 0.01);
        assert!(s.iter().all(|x| x.abs() < 1e-9));
        let black = cloud_with(vec![(Vec3::zeros(), Vec3::z(), [0; 3]); 8]);
        let (m, s) = color_features(&patch_of(&black), &black);
        assert_eq!(m[0], 0.0);
        assert_eq!(s, [0.0; 3]);
    }

    #[test]
    fn red_green_mix_matches_colorimetry_oracle() {
        // Reference Lab values from scikit-image rgb2lab (D65, 2°).
        let red = [53.240_587_94, 80.092_308_23, 67.202_751_04];
        let green = [87.735_099_49, -86.183_029_74, 83.179_703_18];
        let mut pts = vec![(Vec3::zeros(), Vec3::z(), [255, 0, 0]); 30];
        pts.extend(vec![(Vec3::zeros(), Vec3::z(), [0, 255, 0]); 30]);
        let cloud = cloud_with(pts);
        let (m, s) = color_features(&patch_of(&cloud), &cloud);
        for k in 0..3 {
            assert!((m[k] - (red[k] + green[k]) / 2.0).abs() < 1e-3, "mean {k}");
            assert!((s[k] - (red[k] - green[k]).abs() / 2.0).abs() < 1e-3, "std {k}");
        }
    }

    #[test]
    fn empty_graph_gives_no_features() {
        let cloud = cloud_with(Vec::new());
        let out = extract_features(&PatchGraph::default(), &cloud);
        assert!(out.vectors.is_empty() && out.skipped == 0);
    }

    fn random_patch_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let p = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..2.0),
                );
                let n = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.1..1.0),
                )
                .normalize();
                (p, n, [rng.random(), rng.random(), rng.random()])
            })
            .collect();
        cloud_with(pts)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn invariants_and_eigen_sum(seed in any::<u64>(), n in 3usize..80) {
            let cloud = random_patch_cloud(seed, n);
            let patch = patch_of(&cloud);
            let f = patch_features(&patch, &cloud).unwrap();
            prop_assert!(f.check_invariants().is_ok(), "{:?}", f.check_invariants());
            let l2 = {
                let n = cloud.len() as f64;
                let mean = cloud.positions().sum::<Vec3>() / n;
                let mut cov = [[0.0; 3]; 3];
                for p in cloud.positions() {
                    let d = p - mean;
                    for r in 0..3 { for c in 0..3 { cov[r][c] += d[r] * d[c] / n; } }
                }
                jacobi_eigenvalues(cov)[2]
            };
            prop_assert!((f.0[0] + f.0[1] + f.0[2] - l2).abs() < 1e-9);
        }

        #[test]
        fn yaw_and_translation_invariance(
            seed in any::<u64>(),
            yaw in -3.2f64..3.2,
            tx in -5.0f64..5.0,
            ty in -5.0f64..5.0,
            tz in -2.0f64..2.0,
        ) {
            let cloud = random_patch_cloud(seed, 60);
            let patch = patch_of(&cloud);
            let base = patch_features(&patch, &cloud).unwrap();

            let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), yaw);
            let mut moved = cloud.clone();
            for p in &mut moved.points {
                p.position = rot * p.position + Vec3::new(tx, ty, 0.0);
                p.normal = p.normal.map(|n| rot * n);
            }
            let f = patch_features(&patch, &moved).unwrap();
            for k in 0..FEATURE_DIM {
                prop_assert!((f.0[k] - base.0[k]).abs() < 1e-6, "feature {k}");
            }

            let mut lifted = cloud.clone();
            for p in &mut lifted.points {
                p.position.z += tz;
            }
            let f = patch_features(&patch, &lifted).unwrap();
            for k in 0..FEATURE_DIM {
                let expected = if (3..6).contains(&k) { base.0[k] + tz } else { base.0[k] };
                prop_assert!((f.0[k] - expected).abs() < 1e-6, "feature {k}");
            }
        }
    }
}
