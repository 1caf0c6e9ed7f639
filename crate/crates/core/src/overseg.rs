//! Supervoxel oversegmentation and the patch adjacency graph.
//!
//! Points are binned into voxels; seed voxels are picked on a coarser seed
//! grid and patches grow best-first over the 26-connected voxel adjacency.
//! The cost of adding voxel `v` to the patch seeded at `s` is
//!
//! ```text
//! D = w_spatial * |x_v - x_s| / (sqrt(3) * seed_resolution)
//!   + w_normal  * (1 - |n_v . n_s|)
//!   + w_color   * |lab_v - lab_s| / 100
//! ```
//!
//! Expansion order is fixed by `(D, patch id, voxel id)`, so the result does
//! not depend on thread count. Voxel components that received no seed are
//! seeded again from the same grid until every voxel belongs to a patch;
//! patches below `min_patch_points` are then dropped.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{PointCloud, Vec3};
use crate::color::srgb_to_lab;

#[derive(Debug, Error)]
pub enum OversegError {
    #[error("invalid oversegmentation parameter: {0}")]
    Parameter(String),
    #[error("point {0} has no normal; compute normals first")]
    MissingNormal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OversegParams {
    pub voxel_resolution: f64,
    pub seed_resolution: f64,
    pub w_spatial: f64,
    pub w_normal: f64,
    pub w_color: f64,
    pub min_patch_points: usize,
}

impl Default for OversegParams {
    fn default() -> Self {
        OversegParams {
            voxel_resolution: 0.03,
            seed_resolution: 0.2,
            w_spatial: 0.4,
            w_normal: 1.0,
            w_color: 0.2,
            min_patch_points: 10,
        }
    }
}

impl OversegParams {
    pub fn validate(&self) -> Result<(), OversegError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.voxel_resolution) {
            return Err(OversegError::Parameter("voxel_resolution must be > 0".into()));
        }
        if !(self.seed_resolution.is_finite() && self.seed_resolution > self.voxel_resolution) {
            return Err(OversegError::Parameter(
                "seed_resolution must exceed voxel_resolution".into(),
            ));
        }
        for (name, w) in [
            ("w_spatial", self.w_spatial),
            ("w_normal", self.w_normal),
            ("w_color", self.w_color),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(OversegError::Parameter(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub id: usize,
    pub point_indices: Vec<usize>,
    pub centroid: Vec3,
    pub mean_normal: Vec3,
    pub mean_color_lab: [f64; 3],
}

/// Patches plus their symmetric, irreflexive adjacency. Patch ids equal
/// their index in `patches`; adjacency pairs are stored as `(low, high)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchGraph {
    pub patches: Vec<Patch>,
    pub adjacency: BTreeSet<(usize, usize)>,
}

impl PatchGraph {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, id: usize) -> Vec<usize> {
        self.adjacency
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Patch id of every cloud point, `None` for points in dropped patches.
    pub fn point_assignment(&self, num_points: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_points];
        for patch in &self.patches {
            for &i in &patch.point_indices {
                out[i] = Some(patch.id);
            }
        }
        out
    }
}

type VoxelKey = [i64; 3];

fn key_of(p: &Vec3, res: f64) -> VoxelKey {
    [
        (p.x / res).floor() as i64,
        (p.y / res).floor() as i64,
        (p.z / res).floor() as i64,
    ]
}

struct Voxel {
    points: Vec<usize>,
    centroid: Vec3,
    normal: Vec3,
    lab: [f64; 3],
}

/// Sums normals after flipping each into the hemisphere of `reference`.
fn aligned_normal_sum(normals: impl Iterator<Item = Vec3>, reference: &Vec3) -> Vec3 {
    normals.fold(Vec3::zeros(), |acc, n| {
        if n.dot(reference) < 0.0 {
            acc - n
        } else {
            acc + n
        }
    })
}

fn lab_mean(labs: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for lab in labs {
        for k in 0..3 {
            sum[k] += lab[k];
        }
        n += 1.0;
    }
    sum.map(|s| s / n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    patch: u32,
    voxel: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // Reversed so that BinaryHeap pops the smallest (dist, patch, voxel).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.patch.cmp(&self.patch))
            .then(other.voxel.cmp(&self.voxel))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NO_PATCH: u32 = u32::MAX;

struct Grower<'a> {
    voxels: &'a [Voxel],
    neighbors: &'a [Vec<u32>],
    params: &'a OversegParams,
    owner: Vec<u32>,
    /// Best (distance, patch) already queued per voxel.
    queued: Vec<(f64, u32)>,
    seeds: Vec<u32>,
}

impl Grower<'_> {
    fn distance(&self, seed: &Voxel, v: &Voxel) -> f64 {
        let p = self.params;
        let spatial = (v.centroid - seed.centroid).norm() / (3f64.sqrt() * p.seed_resolution);
        let normal = 1.0 - v.normal.dot(&seed.normal).abs().min(1.0);
        let color = (0..3)
            .map(|k| (v.lab[k] - seed.lab[k]).powi(2))
            .sum::<f64>()
            .sqrt()
            / 100.0;
        p.w_spatial * spatial + p.w_normal * normal + p.w_color * color
    }

    /// Picks, per seed-grid cell, the unowned voxel closest to the cell center.
    fn pick_seeds(&self) -> Vec<u32> {
        let sr = self.params.seed_resolution;
        let mut best: HashMap<VoxelKey, (f64, u32)> = HashMap::new();
        for (i, v) in self.voxels.iter().enumerate() {
            if self.owner[i] != NO_PATCH {
                continue;
            }
            let key = key_of(&v.centroid, sr);
            let center = Vec3::new(
                (key[0] as f64 + 0.5) * sr,
                (key[1] as f64 + 0.5) * sr,
                (key[2] as f64 + 0.5) * sr,
            );
            let d = (v.centroid - center).norm_squared();
            let entry = best.entry(key).or_insert((d, i as u32));
            if d < entry.0 {
                *entry = (d, i as u32);
            }
        }
        let mut seeds: Vec<u32> = best.into_values().map(|(_, i)| i).collect();
        seeds.sort_unstable();
        seeds
    }

    fn push(&mut self, heap: &mut BinaryHeap<Candidate>, patch: u32, voxel: u32) {
        let seed = &self.voxels[self.seeds[patch as usize] as usize];
        let dist = self.distance(seed, &self.voxels[voxel as usize]);
        let (best_d, best_p) = self.queued[voxel as usize];
        if dist.total_cmp(&best_d).then(patch.cmp(&best_p)) == Ordering::Less {
            self.queued[voxel as usize] = (dist, patch);
            heap.push(Candidate { dist, patch, voxel });
        }
    }

    /// One seeding round over the still unowned voxels.
    fn grow_round(&mut self) {
        let new_seeds = self.pick_seeds();
        let mut heap = BinaryHeap::new();
        for s in new_seeds {
            let patch = self.seeds.len() as u32;
            self.seeds.push(s);
            self.queued[s as usize] = (0.0, patch);
            heap.push(Candidate {
                dist: 0.0,
                patch,
                voxel: s,
            });
        }
        while let Some(c) = heap.pop() {
            if self.owner[c.voxel as usize] != NO_PATCH {
                continue;
            }
            self.owner[c.voxel as usize] = c.patch;
            for k in 0..self.neighbors[c.voxel as usize].len() {
                let n = self.neighbors[c.voxel as usize][k];
                if self.owner[n as usize] == NO_PATCH {
                    self.push(&mut heap, c.patch, n);
                }
            }
        }
    }
}

/// Partitions a cloud with normals into patches and their adjacency graph.
pub fn oversegment(cloud: &PointCloud, params: &OversegParams) -> Result<PatchGraph, OversegError> {
    params.validate()?;
    if cloud.is_empty() {
        return Ok(PatchGraph::default());
    }
    let normals: Vec<Vec3> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| p.normal.ok_or(OversegError::MissingNormal(i)))
        .collect::<Result<_, _>>()?;
    let labs: Vec<[f64; 3]> = cloud.points.iter().map(|p| srgb_to_lab(p.color)).collect();

    // Voxelize; voxel order follows the sorted keys.
    let vr = params.voxel_resolution;
    let mut keyed: Vec<(VoxelKey, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (key_of(&p.position, vr), i))
        .collect();
    keyed.sort_unstable();
    let mut keys: Vec<VoxelKey> = Vec::new();
    let mut voxels: Vec<Voxel> = Vec::new();
    for (key, i) in keyed {
        if keys.last() != Some(&key) {
            keys.push(key);
            voxels.push(Voxel {
                points: Vec::new(),
                centroid: Vec3::zeros(),
                normal: Vec3::zeros(),
                lab: [0.0; 3],
            });
        }
        voxels.last_mut().unwrap().points.push(i);
    }
    for v in &mut voxels {
        let n = v.points.len() as f64;
        v.centroid = v.points.iter().map(|&i| cloud.points[i].position).sum::<Vec3>() / n;
        let reference = normals[v.points[0]];
        let sum = aligned_normal_sum(v.points.iter().map(|&i| normals[i]), &reference);
        v.normal = if sum.norm() > 1e-12 { sum.normalize() } else { reference };
        v.lab = lab_mean(v.points.iter().map(|&i| labs[i]));
    }

    let index: HashMap<VoxelKey, u32> = keys.iter().enumerate().map(|(i, k)| (*k, i as u32)).collect();
    let neighbors: Vec<Vec<u32>> = keys
        .iter()
        .map(|k| {
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        if let Some(&j) = index.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            out.push(j);
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect();

    let mut grower = Grower {
        voxels: &voxels,
        neighbors: &neighbors,
        params,
        owner: vec![NO_PATCH; voxels.len()],
        queued: vec![(f64::INFINITY, NO_PATCH); voxels.len()],
        seeds: Vec::new(),
    };
    while grower.owner.contains(&NO_PATCH) {
        grower.grow_round();
    }
    let owner = grower.owner;
    let seeds = grower.seeds;

    // Collect members per raw patch, drop small ones, renumber.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); seeds.len()];
    for (vi, &p) in owner.iter().enumerate() {
        members[p as usize].extend_from_slice(&voxels[vi].points);
    }
    let mut remap = vec![None; seeds.len()];
    let mut patches = Vec::new();
    for (raw, mut pts) in members.into_iter().enumerate() {
        if pts.len() < params.min_patch_points.max(1) {
            continue;
        }
        pts.sort_unstable();
        let id = patches.len();
        remap[raw] = Some(id);
        let n = pts.len() as f64;
        let centroid = pts.iter().map(|&i| cloud.points[i].position).sum::<Vec3>() / n;
        let reference = voxels[seeds[raw] as usize].normal;
        let sum = aligned_normal_sum(pts.iter().map(|&i| normals[i]), &reference);
        let mean_normal = if sum.norm() > 1e-12 { sum.normalize() } else { reference };
        let mean_color_lab = lab_mean(pts.iter().map(|&i| labs[i]));
        patches.push(Patch {
            id,
            point_indices: pts,
            centroid,
            mean_normal,
            mean_color_lab,
        });
    }

    let mut adjacency = BTreeSet::new();
    for (vi, ns) in neighbors.iter().enumerate() {
        let Some(a) = remap[owner[vi] as usize] else { continue };
        for &nj in ns {
            if let Some(b) = remap[owner[nj as usize] as usize] {
                if a != b {
                    adjacency.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    Ok(PatchGraph { patches, adjacency })
}

/// Cloud colored by patch id (dropped points black), for visual inspection.
pub fn patch_debug_cloud(cloud: &PointCloud, graph: &PatchGraph) -> PointCloud {
    let assignment = graph.point_assignment(cloud.len());
    let mut out = cloud.clone();
    for (p, a) in out.points.iter_mut().zip(assignment) {
        p.color = match a {
            Some(id) => {
                // Cheap integer hash for well-spread colors.
                let h = (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                [(h >> 40) as u8 | 0x20, (h >> 48) as u8 | 0x20, (h >> 56) as u8 | 0x20]
            }
            None => [0, 0, 0],
        };
    }
    out
}
