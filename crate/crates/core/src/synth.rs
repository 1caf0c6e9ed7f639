//! Deterministic generator of labeled synthetic indoor scenes.
//!
//! A scene is an axis-aligned room (floor at z = 0, ceiling at the room
//! height) furnished with tables, chairs, cabinets and small objects resting
//! on table tops. Every surface is sampled uniformly by area; surface points
//! hidden inside another solid (floor under a cabinet, table top under an
//! object) are not emitted.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Frame, Label, Point, PointCloud, Vec3};

/// 640x480, the size of one Kinect frame.
pub const FRAME_POINTS: usize = 307_200;

const PLACEMENT_TRIES: usize = 500;
const WALL_MARGIN: f64 = 0.1;
const FURNITURE_GAP: f64 = 0.15;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place {what} after {PLACEMENT_TRIES} attempts")]
    Placement { what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FurnitureCounts {
    pub tables: usize,
    pub chairs: usize,
    pub cabinets: usize,
    /// Small objects, distributed over the table tops.
    pub objects: usize,
}

impl Default for FurnitureCounts {
    fn default() -> Self {
        FurnitureCounts {
            tables: 2,
            chairs: 3,
            cabinets: 2,
            objects: 4,
        }
    }
}

impl FurnitureCounts {
    pub fn empty() -> Self {
        FurnitureCounts {
            tables: 0,
            chairs: 0,
            cabinets: 0,
            objects: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room size along x, y and the ceiling height, meters.
    pub room_extent: [f64; 3],
    pub furniture: FurnitureCounts,
    pub points_per_m2: f64,
    /// Standard deviation of the (3-sigma truncated) Gaussian position noise.
    pub noise_sigma: f64,
    /// Uniform random subsampling cap.
    pub max_points: usize,
    /// When set, only surfaces facing this gravity-frame point are kept.
    pub viewpoint: Option<[f64; 3]>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            room_extent: [5.0, 4.0, 2.6],
            furniture: FurnitureCounts::default(),
            points_per_m2: 2000.0,
            noise_sigma: 0.005,
            max_points: FRAME_POINTS,
            viewpoint: None,
        }
    }
}

impl SceneSpec {
    /// Benchmark scene: room size and furniture counts vary with the seed.
    pub fn benchmark(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce4e);
        SceneSpec {
            seed,
            room_extent: [
                rng.random_range(4.0..6.0),
                rng.random_range(3.5..5.0),
                rng.random_range(2.4..2.9),
            ],
            furniture: FurnitureCounts {
                tables: rng.random_range(1..=3),
                chairs: rng.random_range(2..=5),
                cabinets: rng.random_range(1..=3),
                objects: rng.random_range(2..=6),
            },
            ..SceneSpec::default()
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !self.room_extent.iter().all(|e| e.is_finite() && *e > 0.0) {
            return Err(SynthError::InvalidSpec("room extents must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        if !(self.points_per_m2 > 0.0 && self.points_per_m2.is_finite()) {
            return Err(SynthError::InvalidSpec("points_per_m2 must be positive".into()));
        }
        if self.max_points == 0 {
            return Err(SynthError::InvalidSpec("max_points must be positive".into()));
        }
        if self.furniture.objects > 0 && self.furniture.tables == 0 {
            return Err(SynthError::InvalidSpec("objects need at least one table".into()));
        }
        Ok(())
    }
}

/// An axis-aligned solid box that contributes surface samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedBox {
    pub min: Vec3,
    pub max: Vec3,
    pub label: Label,
    pub color: [u8; 3],
    /// Faces not sampled because another part covers them entirely.
    pub skip_top: bool,
    pub skip_bottom: bool,
}

impl PlacedBox {
    fn new(min: Vec3, max: Vec3, label: Label, color: [u8; 3]) -> Self {
        PlacedBox {
            min,
            max,
            label,
            color,
            skip_top: false,
            skip_bottom: false,
        }
    }

    fn contains_closed(&self, p: &Vec3) -> bool {
        const EPS: f64 = 1e-9;
        (0..3).all(|k| p[k] >= self.min[k] - EPS && p[k] <= self.max[k] + EPS)
    }
}

/// Table placed in the room; `top` is the height of its top surface.
#[derive(Debug, Clone, PartialEq)]
pub struct TableInfo {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
    pub top: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneLayout {
    pub boxes: Vec<PlacedBox>,
    pub tables: Vec<TableInfo>,
}

#[derive(Clone, Copy)]
struct Rect {
    min: [f64; 2],
    max: [f64; 2],
}

impl Rect {
    fn overlaps(&self, other: &Rect, gap: f64) -> bool {
        (0..2).all(|k| self.min[k] < other.max[k] + gap && other.min[k] < self.max[k] + gap)
    }
}

struct Face {
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    normal: Vec3,
}

fn box_faces(b: &PlacedBox) -> Vec<Face> {
    let (lo, hi) = (b.min, b.max);
    let d = hi - lo;
    let ex = Vec3::new(d.x, 0.0, 0.0);
    let ey = Vec3::new(0.0, d.y, 0.0);
    let ez = Vec3::new(0.0, 0.0, d.z);
    let mut faces = vec![
        Face { origin: lo, u: ey, v: ez, normal: -Vec3::x() },
        Face { origin: lo + ex, u: ey, v: ez, normal: Vec3::x() },
        Face { origin: lo, u: ex, v: ez, normal: -Vec3::y() },
        Face { origin: lo + ey, u: ex, v: ez, normal: Vec3::y() },
    ];
    if !b.skip_bottom {
        faces.push(Face { origin: lo, u: ex, v: ey, normal: -Vec3::z() });
    }
    if !b.skip_top {
        faces.push(Face { origin: lo + ez, u: ex, v: ey, normal: Vec3::z() });
    }
    faces
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (i32::from(b) + rng.random_range(-amount..=amount)).clamp(0, 255) as u8;
    }
    out
}

fn pick(rng: &mut ChaCha8Rng, palette: &[[u8; 3]]) -> [u8; 3] {
    palette[rng.random_range(0..palette.len())]
}

fn place_rect(
    rng: &mut ChaCha8Rng,
    room: &[f64; 3],
    size: [f64; 2],
    taken: &[Rect],
    what: &str,
) -> Result<Rect, SynthError> {
    for _ in 0..PLACEMENT_TRIES {
        let span = [
            room[0] - 2.0 * WALL_MARGIN - size[0],
            room[1] - 2.0 * WALL_MARGIN - size[1],
        ];
        if span[0] <= 0.0 || span[1] <= 0.0 {
            break;
        }
        let x = WALL_MARGIN + rng.random_range(0.0..span[0]);
        let y = WALL_MARGIN + rng.random_range(0.0..span[1]);
        let rect = Rect {
            min: [x, y],
            max: [x + size[0], y + size[1]],
        };
        if taken.iter().all(|t| !rect.overlaps(t, FURNITURE_GAP)) {
            return Ok(rect);
        }
    }
    Err(SynthError::Placement { what: what.to_string() })
}

fn legs(
    rect: &Rect,
    leg: f64,
    inset: f64,
    height: f64,
    label: Label,
    color: [u8; 3],
    out: &mut Vec<PlacedBox>,
) {
    let xs = [rect.min[0] + inset, rect.max[0] - inset - leg];
    let ys = [rect.min[1] + inset, rect.max[1] - inset - leg];
    for x in xs {
        for y in ys {
            let mut b = PlacedBox::new(
                Vec3::new(x, y, 0.0),
                Vec3::new(x + leg, y + leg, height),
                label,
                color,
            );
            b.skip_top = true;
            b.skip_bottom = true;
            out.push(b);
        }
    }
}

fn random_size(rng: &mut ChaCha8Rng, a: (f64, f64), b: (f64, f64)) -> [f64; 2] {
    let s = [rng.random_range(a.0..a.1), rng.random_range(b.0..b.1)];
    if rng.random_bool(0.5) {
        [s[1], s[0]]
    } else {
        s
    }
}

fn build_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<SceneLayout, SynthError> {
    let room = spec.room_extent;
    let mut layout = SceneLayout::default();
    let mut taken: Vec<Rect> = Vec::new();

    let mut tables = Vec::new();
    for i in 0..spec.furniture.tables {
        let size = random_size(rng, (1.0, 1.8), (0.6, 1.0));
        let rect = place_rect(rng, &room, size, &taken, &format!("table {i}"))?;
        taken.push(rect);
        let top = rng.random_range(0.6..0.8);
        let color = pick(rng, &[[150, 100, 60], [190, 150, 100], [225, 225, 220], [90, 60, 40]]);
        let slab = PlacedBox::new(
            Vec3::new(rect.min[0], rect.min[1], top - 0.04),
            Vec3::new(rect.max[0], rect.max[1], top),
            Label::Table,
            color,
        );
        layout.boxes.push(slab);
        legs(&rect, 0.05, 0.05, top - 0.04, Label::Table, color, &mut layout.boxes);
        tables.push((rect, top));
        layout.tables.push(TableInfo {
            min_xy: rect.min,
            max_xy: rect.max,
            top,
        });
    }

    for i in 0..spec.furniture.chairs {
        let w = rng.random_range(0.42..0.5);
        let rect = place_rect(rng, &room, [w, w], &taken, &format!("chair {i}"))?;
        taken.push(rect);
        let seat_top = rng.random_range(0.42..0.48);
        let color = pick(rng, &[[40, 40, 45], [30, 70, 140], [150, 30, 30], [110, 110, 110]]);
        let seat = PlacedBox::new(
            Vec3::new(rect.min[0], rect.min[1], seat_top - 0.05),
            Vec3::new(rect.max[0], rect.max[1], seat_top),
            Label::Chair,
            color,
        );
        layout.boxes.push(seat);
        legs(&rect, 0.04, 0.02, seat_top - 0.05, Label::Chair, color, &mut layout.boxes);
        let back_h = rng.random_range(0.4..0.5);
        let t = 0.05;
        let (lo, hi) = match rng.random_range(0..4) {
            0 => ([rect.min[0], rect.min[1]], [rect.min[0] + t, rect.max[1]]),
            1 => ([rect.max[0] - t, rect.min[1]], [rect.max[0], rect.max[1]]),
            2 => ([rect.min[0], rect.min[1]], [rect.max[0], rect.min[1] + t]),
            _ => ([rect.min[0], rect.max[1] - t], [rect.max[0], rect.max[1]]),
        };
        let mut back = PlacedBox::new(
            Vec3::new(lo[0], lo[1], seat_top),
            Vec3::new(hi[0], hi[1], seat_top + back_h),
            Label::Chair,
            color,
        );
        back.skip_bottom = true;
        layout.boxes.push(back);
    }

    for i in 0..spec.furniture.cabinets {
        let size = random_size(rng, (0.5, 1.2), (0.4, 0.6));
        let rect = place_rect(rng, &room, size, &taken, &format!("cabinet {i}"))?;
        taken.push(rect);
        let height = rng.random_range(0.8f64..2.0).min(room[2] - 0.3);
        let color = pick(rng, &[[235, 235, 230], [170, 120, 80], [120, 90, 60], [200, 200, 190]]);
        let mut cab = PlacedBox::new(
            Vec3::new(rect.min[0], rect.min[1], 0.0),
            Vec3::new(rect.max[0], rect.max[1], height),
            Label::Cabinet,
            color,
        );
        cab.skip_bottom = true;
        layout.boxes.push(cab);
    }

    let mut on_table: Vec<Vec<Rect>> = vec![Vec::new(); tables.len()];
    for i in 0..spec.furniture.objects {
        let ti = i % tables.len();
        let (table, top) = tables[ti];
        let size = [rng.random_range(0.06..0.25), rng.random_range(0.06..0.25)];
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let x = table.min[0] + 0.02 + rng.random_range(0.0..(table.max[0] - table.min[0] - size[0] - 0.04));
            let y = table.min[1] + 0.02 + rng.random_range(0.0..(table.max[1] - table.min[1] - size[1] - 0.04));
            let rect = Rect {
                min: [x, y],
                max: [x + size[0], y + size[1]],
            };
            if on_table[ti].iter().all(|o| !rect.overlaps(o, 0.03)) {
                placed = Some(rect);
                break;
            }
        }
        let rect = placed.ok_or_else(|| SynthError::Placement { what: format!("object {i}") })?;
        on_table[ti].push(rect);
        let height = rng.random_range(0.05..0.3);
        let color = [rng.random_range(20..=255), rng.random_range(20..=255), rng.random_range(20..=255)];
        let mut obj = PlacedBox::new(
            Vec3::new(rect.min[0], rect.min[1], top),
            Vec3::new(rect.max[0], rect.max[1], top + height),
            Label::Object,
            color,
        );
        obj.skip_bottom = true;
        layout.boxes.push(obj);
    }
    Ok(layout)
}

/// Generates the scene described by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointCloud, SynthError> {
    generate_scene_with_layout(spec).map(|(cloud, _)| cloud)
}

/// Like [`generate_scene`], also returning the furniture layout.
pub fn generate_scene_with_layout(spec: &SceneSpec) -> Result<(PointCloud, SceneLayout), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = build_layout(spec, &mut rng)?;
    let [sx, sy, sz] = spec.room_extent;

    let floor_color = pick(&mut rng, &[[150, 110, 70], [120, 120, 125], [170, 140, 100], [95, 75, 60]]);
    let wall_color = pick(&mut rng, &[[215, 210, 200], [200, 205, 215], [225, 220, 205]]);
    let ceiling_color = [232, 232, 228];

    // Room shell: floor, ceiling and four walls, facing inwards.
    let shell = [
        (Face { origin: Vec3::zeros(), u: Vec3::new(sx, 0.0, 0.0), v: Vec3::new(0.0, sy, 0.0), normal: Vec3::z() }, Label::Floor, floor_color),
        (Face { origin: Vec3::new(0.0, 0.0, sz), u: Vec3::new(sx, 0.0, 0.0), v: Vec3::new(0.0, sy, 0.0), normal: -Vec3::z() }, Label::Ceiling, ceiling_color),
        (Face { origin: Vec3::zeros(), u: Vec3::new(0.0, sy, 0.0), v: Vec3::new(0.0, 0.0, sz), normal: Vec3::x() }, Label::Wall, wall_color),
        (Face { origin: Vec3::new(sx, 0.0, 0.0), u: Vec3::new(0.0, sy, 0.0), v: Vec3::new(0.0, 0.0, sz), normal: -Vec3::x() }, Label::Wall, wall_color),
        (Face { origin: Vec3::zeros(), u: Vec3::new(sx, 0.0, 0.0), v: Vec3::new(0.0, 0.0, sz), normal: Vec3::y() }, Label::Wall, wall_color),
        (Face { origin: Vec3::new(0.0, sy, 0.0), u: Vec3::new(sx, 0.0, 0.0), v: Vec3::new(0.0, 0.0, sz), normal: -Vec3::y() }, Label::Wall, wall_color),
    ];

    let viewpoint = spec.viewpoint.map(|v| Vec3::new(v[0], v[1], v[2]));
    let mut points = Vec::new();
    let mut sample_face = |rng: &mut ChaCha8Rng, face: &Face, label: Label, color: [u8; 3], owner: Option<usize>| {
        if let Some(vp) = viewpoint {
            let center = face.origin + 0.5 * (face.u + face.v);
            if (vp - center).dot(&face.normal) <= 0.0 {
                return;
            }
        }
        let area = face.u.cross(&face.v).norm();
        let expected = area * spec.points_per_m2;
        let mut count = expected.floor() as usize;
        if rng.random::<f64>() < expected.fract() {
            count += 1;
        }
        for _ in 0..count {
            let p = face.origin + rng.random::<f64>() * face.u + rng.random::<f64>() * face.v;
            let hidden = layout
                .boxes
                .iter()
                .enumerate()
                .any(|(bi, b)| Some(bi) != owner && b.contains_closed(&p));
            let c = jitter(rng, color, 6);
            if !hidden {
                points.push(Point::new(p, c).with_label(label));
            }
        }
    };

    for (face, label, color) in &shell {
        sample_face(&mut rng, face, *label, *color, None);
    }
    for (bi, b) in layout.boxes.iter().enumerate() {
        for face in box_faces(b) {
            sample_face(&mut rng, &face, b.label, b.color, Some(bi));
        }
    }

    if points.len() > spec.max_points {
        let mut keep = index::sample(&mut rng, points.len(), spec.max_points).into_vec();
        keep.sort_unstable();
        points = keep.into_iter().map(|i| points[i].clone()).collect();
    }

    if spec.noise_sigma > 0.0 {
        for p in &mut points {
            for k in 0..3 {
                p.position[k] += spec.noise_sigma * truncated_normal(&mut rng);
            }
        }
    }

    let mut cloud = PointCloud::new(points, Frame::GravityAligned);
    cloud.meta.source_id = format!("synth-{}", spec.seed);
    Ok((cloud, layout))
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 3.0 {
            return x;
        }
    }
}

/// Rigidly moves a gravity-aligned cloud into the frame of a camera at
/// `position` (x, y, height) looking along `yaw` (radians from +x) and
/// pitched down by `pitch` radians, then rolled by `roll` about its optical axis.
///
/// The result uses the camera convention x right, y down, z forward.
pub fn to_camera_frame(cloud: &PointCloud, position: Vec3, yaw: f64, pitch: f64, roll: f64) -> PointCloud {
    let forward_level = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let up = Vec3::z();
    let right_level = forward_level.cross(&up);
    // Pitch down about the right axis.
    let forward = forward_level * pitch.cos() - up * pitch.sin();
    let down = -(up * pitch.cos() + forward_level * pitch.sin());
    // Roll about the optical axis.
    let right = right_level * roll.cos() - down * roll.sin();
    let down = down * roll.cos() + right_level * roll.sin();
    let rot = nalgebra::Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let mut out = cloud.clone();
    for p in &mut out.points {
        p.position = rot * (p.position - position);
        p.normal = p.normal.map(|n| rot * n);
    }
    out.frame = Frame::Camera;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ply::{encode_cloud, PlyFormat};

    #[test]
    fn empty_room_has_only_shell_labels() {
        let spec = SceneSpec {
            furniture: FurnitureCounts::empty(),
            ..SceneSpec::default()
        };
        let cloud = generate_scene(&spec).unwrap();
        assert!(!cloud.is_empty());
        assert!(cloud.points.iter().all(|p| matches!(
            p.label,
            Some(Label::Floor | Label::Wall | Label::Ceiling)
        )));
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec {
            seed: 42,
            ..SceneSpec::default()
        };
        let a = encode_cloud(&generate_scene(&spec).unwrap(), PlyFormat::BinaryLittleEndian);
        let b = encode_cloud(&generate_scene(&spec).unwrap(), PlyFormat::BinaryLittleEndian);
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_table_tops_are_planar() {
        let spec = SceneSpec {
            seed: 3,
            noise_sigma: 0.0,
            furniture: FurnitureCounts {
                tables: 2,
                ..FurnitureCounts::empty()
            },
            ..SceneSpec::default()
        };
        let (cloud, layout) = generate_scene_with_layout(&spec).unwrap();
        assert_eq!(layout.tables.len(), 2);
        // Plane-residual oracle: every table point inside a table footprint
        // whose z is within 1 mm of that table's top must lie on the plane.
        let mut on_top = 0;
        for p in cloud.points.iter().filter(|p| p.label == Some(Label::Table)) {
            let q = p.position;
            for t in &layout.tables {
                let inside = q.x > t.min_xy[0] + 1e-6
                    && q.x < t.max_xy[0] - 1e-6
                    && q.y > t.min_xy[1] + 1e-6
                    && q.y < t.max_xy[1] - 1e-6;
                if inside && q.z > t.top - 1e-3 {
                    assert!((q.z - t.top).abs() <= 1e-9);
                    on_top += 1;
                }
            }
        }
        assert!(on_top > 1000, "{on_top}");
        for t in &layout.tables {
            assert!((0.6..=0.8).contains(&t.top));
        }
    }

    #[test]
    fn floor_heights_and_label_set() {
        let spec = SceneSpec {
            seed: 9,
            ..SceneSpec::default()
        };
        let cloud = generate_scene(&spec).unwrap();
        assert!(cloud.len() <= FRAME_POINTS);
        for p in &cloud.points {
            let l = p.label.expect("labeled");
            assert!(l.is_trainable());
            if l == Label::Floor {
                assert!(p.position.z.abs() <= 3.0 * spec.noise_sigma + 1e-12);
            }
        }
    }

    #[test]
    fn coverage_over_a_batch() {
        let mut present = [0usize; 7];
        for seed in 0..30 {
            let cloud = generate_scene(&SceneSpec {
                seed,
                ..SceneSpec::default()
            })
            .unwrap();
            for l in Label::TRAINABLE {
                if cloud.count_label(l) > 0 {
                    present[l as usize] += 1;
                }
            }
        }
        assert!(present.iter().all(|&c| c >= 25), "{present:?}");
    }

    #[test]
    fn subsampling_cap_and_infeasible_room() {
        let spec = SceneSpec {
            max_points: 5000,
            ..SceneSpec::default()
        };
        assert_eq!(generate_scene(&spec).unwrap().len(), 5000);
        let tiny = SceneSpec {
            room_extent: [1.0, 1.0, 2.5],
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&tiny), Err(SynthError::Placement { .. })));
        let bad = SceneSpec {
            noise_sigma: -1.0,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&bad), Err(SynthError::InvalidSpec(_))));
    }

    #[test]
    fn viewpoint_culling_drops_back_faces() {
        let spec = SceneSpec {
            furniture: FurnitureCounts::empty(),
            viewpoint: Some([2.5, 2.0, 1.2]),
            ..SceneSpec::default()
        };
        let culled = generate_scene(&spec).unwrap();
        // Every shell face faces the room interior.
        let full = generate_scene(&SceneSpec { viewpoint: None, ..spec.clone() }).unwrap();
        assert_eq!(culled.len(), full.len());
        let outside = SceneSpec {
            viewpoint: Some([2.5, 2.0, -1.0]),
            ..spec
        };
        let culled = generate_scene(&outside).unwrap();
        assert_eq!(culled.count_label(Label::Floor), 0);
    }

    #[test]
    fn camera_frame_convention() {
        let cloud = PointCloud::new(
            vec![Point::new(Vec3::new(3.0, 0.0, 1.0), [0; 3])],
            Frame::GravityAligned,
        );
        // Camera at height 1 looking along +x, level: the point is 2 m ahead.
        let cam = to_camera_frame(&cloud, Vec3::new(1.0, 0.0, 1.0), 0.0, 0.0, 0.0);
        assert!((cam.points[0].position - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        // A floor point straight ahead appears below the optical axis (y down).
        let floor = PointCloud::new(
            vec![Point::new(Vec3::new(3.0, 0.0, 0.0), [0; 3])],
            Frame::GravityAligned,
        );
        let cam = to_camera_frame(&floor, Vec3::new(1.0, 0.0, 1.0), 0.0, 0.3, 0.0);
        assert!(cam.points[0].position.y > 0.0);
    }
}
