//! Table clustering and robot search positions beside tables.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::{Deserialize, Serialize};

use crate::cloud::{Label, PointCloud};

pub type Vec2 = Vector2<f64>;

/// Relative eigenvalue gap below which the 2D PCA counts as isotropic.
const ISOTROPY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchParams {
    pub cluster_radius: f64,
    pub min_points: usize,
    /// Clearance between the table edge and the robot position.
    pub security_distance: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            cluster_radius: 0.05,
            min_points: 200,
            security_distance: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCluster {
    pub id: usize,
    pub point_indices: Vec<usize>,
    pub centroid_2d: Vec2,
    /// Major axis.
    pub e1: Vec2,
    pub e2: Vec2,
    pub h1: f64,
    pub h2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchPosition {
    pub position_2d: Vec2,
    pub heading: Vec2,
    pub source_cluster: usize,
}

/// Connected components of `points` where pairs closer than `radius` link.
pub fn euclidean_clusters(points: &[Vec2], radius: f64) -> Vec<Vec<usize>> {
    let cell = |p: &Vec2| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = radius * radius;
    let mut seen = vec![false; points.len()];
    let mut clusters = Vec::new();
    for start in 0..points.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (cx, cy) = cell(&points[i]);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                    for &j in bucket {
                        if !seen[j] && (points[j] - points[i]).norm_squared() <= r2 {
                            seen[j] = true;
                            members.push(j);
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

/// Principal axes of a 2D point set: `(centroid, e1, e2, h1, h2)`.
///
/// `e1` is the major axis with non-negative x (non-negative y when vertical)
/// and `e2` is `e1` turned by +90°. Isotropic sets use `e2 = (1, 0)`.
pub fn principal_axes(points: &[Vec2]) -> (Vec2, Vec2, Vec2, f64, f64) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vec2>() / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let (imax, imin) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let (lmax, lmin) = (eig.eigenvalues[imax], eig.eigenvalues[imin]);

    let extent = |e: &Vec2| points.iter().map(|p| (p - c).dot(e).abs()).fold(0.0, f64::max);
    let (mut e1, mut e2);
    if lmax - lmin <= ISOTROPY_TOL * (lmax + lmin).max(f64::MIN_POSITIVE) {
        e2 = Vec2::new(1.0, 0.0);
        e1 = Vec2::new(0.0, 1.0);
        if extent(&e1) < extent(&e2) {
            std::mem::swap(&mut e1, &mut e2);
        }
    } else {
        e1 = eig.eigenvectors.column(imax).normalize();
        if e1.x < 0.0 || (e1.x == 0.0 && e1.y < 0.0) {
            e1 = -e1;
        }
        e2 = Vec2::new(-e1.y, e1.x);
    }
    (c, e1, e2, extent(&e1), extent(&e2))
}

/// Clusters table-labeled points (ground projection) and describes each
/// cluster with at least `min_points` members.
pub fn cluster_tables(cloud: &PointCloud, params: &SearchParams) -> Vec<TableCluster> {
    let table_idx: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.label == Some(Label::Table))
        .map(|(i, _)| i)
        .collect();
    let projected: Vec<Vec2> = table_idx
        .iter()
        .map(|&i| Vec2::new(cloud.points[i].position.x, cloud.points[i].position.y))
        .collect();
    euclidean_clusters(&projected, params.cluster_radius)
        .into_iter()
        .filter(|members| members.len() >= params.min_points.max(1))
        .enumerate()
        .map(|(id, members)| {
            let pts: Vec<Vec2> = members.iter().map(|&m| projected[m]).collect();
            let (c, e1, e2, h1, h2) = principal_axes(&pts);
            TableCluster {
                id,
                point_indices: members.iter().map(|&m| table_idx[m]).collect(),
                centroid_2d: c,
                e1,
                e2,
                h1,
                h2,
            }
        })
        .collect()
}

/// The two positions on the minor axis, `d` beyond the table edge, facing
/// the centroid.
pub fn search_positions(cluster: &TableCluster, d: f64) -> [SearchPosition; 2] {
    let offset = cluster.e2 * (cluster.h2 + d);
    [1.0, -1.0].map(|s| SearchPosition {
        position_2d: cluster.centroid_2d + s * offset,
        heading: -s * cluster.e2,
        source_cluster: cluster.id,
    })
}

/// One `cluster_id x y heading_x heading_y` line per position.
pub fn format_positions(positions: &[SearchPosition]) -> String {
    let mut out = String::new();
    for p in positions {
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            p.source_cluster, p.position_2d.x, p.position_2d.y, p.heading.x, p.heading.y
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{Frame, Point, Vec3};
    use nalgebra::Rotation2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table_cloud(xy: &[Vec2]) -> PointCloud {
        let pts = xy
            .iter()
            .map(|p| Point::new(Vec3::new(p.x, p.y, 0.7), [0; 3]).with_label(Label::Table))
            .collect();
        PointCloud::new(pts, Frame::GravityAligned)
    }

    fn rectangle(center: Vec2, w: f64, h: f64, step: f64) -> Vec<Vec2> {
        let nx = (w / step).round() as usize;
        let ny = (h / step).round() as usize;
        let mut out = Vec::new();
        for i in 0..=nx {
            for j in 0..=ny {
                out.push(center + Vec2::new(-w / 2.0 + i as f64 * step, -h / 2.0 + j as f64 * step));
            }
        }
        out
    }

    #[test]
    fn no_tables_no_clusters() {
        let mut cloud = table_cloud(&rectangle(Vec2::zeros(), 1.0, 1.0, 0.02));
        for p in &mut cloud.points {
            p.label = Some(Label::Floor);
        }
        assert!(cluster_tables(&cloud, &SearchParams::default()).is_empty());
    }

    #[test]
    fn two_tables_two_clusters() {
        let mut pts = rectangle(Vec2::zeros(), 1.0, 0.6, 0.02);
        let n_first = pts.len();
        pts.extend(rectangle(Vec2::new(3.0, 0.0), 1.0, 0.6, 0.02));
        let clusters = cluster_tables(&table_cloud(&pts), &SearchParams::default());
        assert_eq!(clusters.len(), 2);
        // Gap oracle: closest cross pair is far beyond the radius.
        let gap = pts[..n_first]
            .iter()
            .flat_map(|a| pts[n_first..].iter().map(move |b| (a - b).norm()))
            .fold(f64::INFINITY, f64::min);
        assert!(gap > 0.05);
        assert!(clusters[0].point_indices.iter().all(|&i| i < n_first));
    }

    #[test]
    fn rectangle_axes_and_positions() {
        let pts = rectangle(Vec2::zeros(), 2.0, 1.0, 0.01);
        let clusters = cluster_tables(&table_cloud(&pts), &SearchParams::default());
        assert_eq!(clusters.len(), 1);
        let c = &clusters[0];
        assert!((c.e1.x.abs() - 1.0).abs() < 1e-3);
        assert!((c.h1 - 1.0).abs() < 1e-3 && (c.h2 - 0.5).abs() < 1e-3);
        assert!(c.e1.dot(&c.e2).abs() < 1e-9);
        let pos = search_positions(c, 0.4);
        let mut ys: Vec<f64> = pos.iter().map(|p| p.position_2d.y).collect();
        ys.sort_by(f64::total_cmp);
        assert!((ys[0] + 0.9).abs() < 1e-2 && (ys[1] - 0.9).abs() < 1e-2);
        for p in &pos {
            assert!(p.position_2d.x.abs() < 1e-2);
            let toward = (c.centroid_2d - p.position_2d).normalize();
            assert!((p.heading - toward).norm() < 1e-9);
            // Clearance from every member point.
            let clearance = pts.iter().map(|q| (q - p.position_2d).norm()).fold(f64::INFINITY, f64::min);
            assert!(clearance >= 0.4 - 1e-6);
        }
        let zero = search_positions(c, 0.0);
        assert!((zero[0].position_2d.y.abs() - c.h2).abs() < 1e-12);
    }

    #[test]
    fn disk_uses_the_tie_rule() {
        // Polar grid with 4-fold symmetry: isotropic covariance.
        let mut pts = vec![Vec2::zeros()];
        for ring in 1..=20 {
            let r = 0.4 * ring as f64 / 20.0;
            let m = 8 * ring;
            for k in 0..m {
                let a = std::f64::consts::TAU * k as f64 / m as f64;
                pts.push(Vec2::new(r * a.cos(), r * a.sin()));
            }
        }
        let (_, e1, e2, _, h2) = principal_axes(&pts);
        assert_eq!(e2, Vec2::new(1.0, 0.0));
        assert_eq!(e1, Vec2::new(0.0, 1.0));
        let cluster = TableCluster {
            id: 0,
            point_indices: vec![],
            centroid_2d: Vec2::zeros(),
            e1,
            e2,
            h1: 0.4,
            h2,
        };
        for p in search_positions(&cluster, 0.3) {
            assert!((p.position_2d.norm() - 0.7).abs() < 1e-9);
            assert!(p.position_2d.y.abs() < 1e-12);
        }
    }

    #[test]
    fn rigid_transform_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<Vec2> = (0..2000)
            .map(|_| Vec2::new(rng.random_range(-0.8..0.8), rng.random_range(-0.35..0.35)))
            .collect();
        let params = SearchParams::default();
        let reference = search_positions(&cluster_tables(&table_cloud(&base), &params)[0], 0.4);
        for _ in 0..10 {
            let rot = Rotation2::new(rng.random_range(-3.1..3.1));
            let t = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let moved: Vec<Vec2> = base.iter().map(|p| rot * p + t).collect();
            let got = search_positions(&cluster_tables(&table_cloud(&moved), &params)[0], 0.4);
            // Positions are an unordered pair.
            for r in &reference {
                let expected = rot * r.position_2d + t;
                let heading = rot * r.heading;
                let best = got
                    .iter()
                    .map(|g| (g.position_2d - expected).norm() + (g.heading - heading).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "{best}");
            }
        }
    }

    #[test]
    fn positions_file_format() {
        let p = SearchPosition {
            position_2d: Vec2::new(0.0, 0.9),
            heading: Vec2::new(0.0, -1.0),
            source_cluster: 3,
        };
        assert_eq!(format_positions(&[p]), "3 0.000000 0.900000 0.000000 -1.000000\n");
    }
}
