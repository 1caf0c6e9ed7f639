//! Point-cloud data model: labels, points, clouds, camera intrinsics and
//! depth-frame ingestion.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Number of labels the classifier is trained on (everything except `unknown`).
pub const NUM_CLASSES: usize = 7;

/// Semantic label of a point or patch.
///
/// Ids are fixed and shared by model files, label images and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Label {
    Floor = 0,
    Wall = 1,
    Ceiling = 2,
    Table = 3,
    Chair = 4,
    Cabinet = 5,
    Object = 6,
    Unknown = 7,
}

impl Label {
    pub const ALL: [Label; 8] = [
        Label::Floor,
        Label::Wall,
        Label::Ceiling,
        Label::Table,
        Label::Chair,
        Label::Cabinet,
        Label::Object,
        Label::Unknown,
    ];

    /// The seven labels that can be training targets, in id order.
    pub const TRAINABLE: [Label; NUM_CLASSES] = [
        Label::Floor,
        Label::Wall,
        Label::Ceiling,
        Label::Table,
        Label::Chair,
        Label::Cabinet,
        Label::Object,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Ids above 7 are not labels.
    pub fn from_id(id: u8) -> Option<Label> {
        Label::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Floor => "floor",
            Label::Wall => "wall",
            Label::Ceiling => "ceiling",
            Label::Table => "table",
            Label::Chair => "chair",
            Label::Cabinet => "cabinet",
            Label::Object => "object",
            Label::Unknown => "unknown",
        }
    }

    pub fn is_trainable(self) -> bool {
        self != Label::Unknown
    }

    /// Index into a [`NUM_CLASSES`]-sized distribution, `None` for `unknown`.
    pub fn class_index(self) -> Option<usize> {
        self.is_trainable().then_some(self as usize)
    }

    /// Display color used for label visualizations.
    pub fn color(self) -> [u8; 3] {
        match self {
            Label::Floor => [160, 110, 60],
            Label::Wall => [90, 150, 220],
            Label::Ceiling => [230, 230, 120],
            Label::Table => [220, 40, 40],
            Label::Chair => [60, 190, 70],
            Label::Cabinet => [150, 70, 200],
            Label::Object => [250, 150, 20],
            Label::Unknown => [0, 0, 0],
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = CloudError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s.trim())
            .ok_or_else(|| CloudError::Input(format!("unknown label name `{}`", s.trim())))
    }
}

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("input error: {0}")]
    Input(String),
    #[error("no valid depth pixels in frame")]
    EmptyCloud,
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CloudError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CloudError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Coordinate frame of a cloud.
///
/// `Camera` is x right, y down, z forward. `GravityAligned` has the ground
/// plane at z = 0 with +z up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Camera,
    GravityAligned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub position: Vec3,
    pub color: [u8; 3],
    pub label: Option<Label>,
    pub normal: Option<Vec3>,
    /// Set when normal estimation found a rank-deficient neighborhood.
    pub degenerate_normal: bool,
}

impl Point {
    pub fn new(position: Vec3, color: [u8; 3]) -> Self {
        Point {
            position,
            color,
            label: None,
            normal: None,
            degenerate_normal: false,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

impl Default for Intrinsics {
    /// Commonly used Kinect v1 calibration, millimeter depth.
    fn default() -> Self {
        Intrinsics {
            fx: 518.857_901,
            fy: 519.469_611,
            cx: 325.582_449,
            cy: 253.736_166,
            depth_scale: 0.001,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CloudError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.depth_scale > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.depth_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CloudError::Input(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Back-projects pixel `(u, v)` at depth `z` meters.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Parses `key value` (or `key=value`) lines with keys fx, fy, cx, cy and
    /// depth_scale. `depth_scale` defaults to 0.001.
    pub fn parse(text: &str) -> Result<Self, CloudError> {
        let mut values: HashMap<String, f64> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, |c: char| c == '=' || c == ':' || c.is_whitespace());
            let key = parts.next().unwrap_or("").trim();
            let value = parts.next().map(str::trim).unwrap_or("");
            let value: f64 = value.parse().map_err(|_| {
                CloudError::Input(format!("intrinsics line {}: bad value `{value}`", lineno + 1))
            })?;
            match key {
                "fx" | "fy" | "cx" | "cy" | "depth_scale" => {
                    values.insert(key.to_string(), value);
                }
                other => {
                    return Err(CloudError::Input(format!(
                        "intrinsics line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        let get = |k: &str| {
            values
                .get(k)
                .copied()
                .ok_or_else(|| CloudError::Input(format!("intrinsics: missing key `{k}`")))
        };
        let intr = Intrinsics {
            fx: get("fx")?,
            fy: get("fy")?,
            cx: get("cx")?,
            cy: get("cy")?,
            depth_scale: values.get("depth_scale").copied().unwrap_or(0.001),
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn load(path: &Path) -> Result<Self, CloudError> {
        let text = std::fs::read_to_string(path).map_err(|e| CloudError::io(path, e))?;
        Intrinsics::parse(&text)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudMeta {
    pub source_id: String,
    pub intrinsics: Option<Intrinsics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame: Frame,
    pub meta: CloudMeta,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame: Frame) -> Self {
        PointCloud {
            points,
            frame,
            meta: CloudMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vec3> + '_ {
        self.points.iter().map(|p| &p.position)
    }

    pub fn has_labels(&self) -> bool {
        self.points.iter().any(|p| p.label.is_some())
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.points.iter().filter(|p| p.label == Some(label)).count()
    }

    /// Checks the per-point invariants: finite positions and unit normals.
    pub fn validate(&self) -> Result<(), CloudError> {
        for (i, p) in self.points.iter().enumerate() {
            if !p.position.iter().all(|c| c.is_finite()) {
                return Err(CloudError::Input(format!("point {i} has a non-finite position")));
            }
            if let Some(n) = p.normal {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(CloudError::Input(format!("point {i} has a non-unit normal")));
                }
            }
        }
        Ok(())
    }
}

/// Row-major 2D raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self, CloudError> {
        if data.len() != width * height {
            return Err(CloudError::Input(format!(
                "image buffer has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    fn same_size<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Back-projects a registered depth/RGB(/label) frame into a camera-frame cloud.
///
/// Raw depth 0 marks an invalid pixel. Label ids outside 0..=7 become `unknown`.
pub fn ingest_depth_frame(
    depth: &Image<u16>,
    rgb: &Image<[u8; 3]>,
    labels: Option<&Image<u8>>,
    intrinsics: &Intrinsics,
) -> Result<PointCloud, CloudError> {
    intrinsics.validate()?;
    if !depth.same_size(rgb) || labels.is_some_and(|l| !depth.same_size(l)) {
        return Err(CloudError::Input(
            "depth, color and label images must share dimensions".into(),
        ));
    }
    let mut points = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let raw = depth.get(u, v);
            if raw == 0 {
                continue;
            }
            let z = f64::from(raw) * intrinsics.depth_scale;
            let mut point = Point::new(
                intrinsics.back_project(u as f64, v as f64, z),
                rgb.get(u, v),
            );
            if let Some(l) = labels {
                point.label = Some(Label::from_id(l.get(u, v)).unwrap_or(Label::Unknown));
            }
            points.push(point);
        }
    }
    if points.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    Ok(PointCloud {
        points,
        frame: Frame::Camera,
        meta: CloudMeta {
            source_id: String::new(),
            intrinsics: Some(*intrinsics),
        },
    })
}

/// Raw dataset class id to label table. Ids not in the table map to `unknown`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelMapping {
    table: HashMap<u32, Label>,
}

/// Best-effort default mapping for NYU Depth V2 class ids.
pub const DEFAULT_NYU_MAPPING: &str = include_str!("../data/nyu_label_map.txt");

impl LabelMapping {
    pub fn insert(&mut self, raw_id: u32, label: Label) {
        self.table.insert(raw_id, label);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Parses `raw_id,label_name` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CloudError> {
        let mut mapping = LabelMapping::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (id, name) = line.split_once(',').ok_or_else(|| {
                CloudError::Input(format!("label mapping line {}: expected `id,name`", lineno + 1))
            })?;
            let id: u32 = id.trim().parse().map_err(|_| {
                CloudError::Input(format!("label mapping line {}: bad id `{}`", lineno + 1, id.trim()))
            })?;
            let label: Label = name.parse().map_err(|_| {
                CloudError::Input(format!(
                    "label mapping line {}: unknown label `{}`",
                    lineno + 1,
                    name.trim()
                ))
            })?;
            mapping.insert(id, label);
        }
        Ok(mapping)
    }

    pub fn load(path: &Path) -> Result<Self, CloudError> {
        let text = std::fs::read_to_string(path).map_err(|e| CloudError::io(path, e))?;
        LabelMapping::parse(&text)
    }

    pub fn nyu_default() -> Self {
        LabelMapping::parse(DEFAULT_NYU_MAPPING).expect("bundled mapping parses")
    }

    pub fn reduce(&self, raw_id: u32) -> Label {
        reduce_labels(raw_id, self)
    }
}

pub fn reduce_labels(raw_id: u32, mapping: &LabelMapping) -> Label {
    mapping.table.get(&raw_id).copied().unwrap_or(Label::Unknown)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 500.0,
            fy: 520.0,
            cx: 3.0,
            cy: 2.0,
            depth_scale: 0.001,
        }
    }

    #[test]
    fn label_ids_round_trip() {
        for l in Label::ALL {
            assert_eq!(Label::from_id(l.id()), Some(l));
            assert_eq!(l.name().parse::<Label>().unwrap(), l);
        }
        assert_eq!(Label::from_id(8), None);
        assert_eq!(Label::Unknown.class_index(), None);
        assert_eq!(Label::Object.class_index(), Some(6));
    }

    #[test]
    fn principal_point_projects_to_axis() {
        let mut depth = Image::filled(7, 5, 0u16);
        depth.set(3, 2, 1000);
        let rgb = Image::filled(7, 5, [1, 2, 3]);
        let cloud = ingest_depth_frame(&depth, &rgb, None, &intr()).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0].position, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(cloud.points[0].color, [1, 2, 3]);
        assert_eq!(cloud.frame, Frame::Camera);
    }

    #[test]
    fn unit_focal_offset() {
        let intr = Intrinsics {
            fx: 2.0,
            fy: 2.0,
            cx: 1.0,
            cy: 1.0,
            depth_scale: 0.001,
        };
        let mut depth = Image::filled(4, 4, 0u16);
        depth.set(3, 1, 1000);
        let cloud = ingest_depth_frame(&depth, &Image::filled(4, 4, [0; 3]), None, &intr).unwrap();
        let p = cloud.points[0].position;
        assert!((p - Vec3::new(1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_depth_is_dropped_and_labels_are_copied() {
        let mut depth = Image::filled(3, 1, 500u16);
        depth.set(1, 0, 0);
        let mut labels = Image::filled(3, 1, 3u8);
        labels.set(2, 0, 200);
        let cloud = ingest_depth_frame(&depth, &Image::filled(3, 1, [0; 3]), Some(&labels), &intr())
            .unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[0].label, Some(Label::Table));
        assert_eq!(cloud.points[1].label, Some(Label::Unknown));
    }

    #[test]
    fn ingestion_errors() {
        let depth = Image::filled(3, 2, 0u16);
        let rgb = Image::filled(3, 2, [0; 3]);
        assert!(matches!(
            ingest_depth_frame(&depth, &rgb, None, &intr()),
            Err(CloudError::EmptyCloud)
        ));
        let rgb_small = Image::filled(2, 2, [0; 3]);
        assert!(matches!(
            ingest_depth_frame(&depth, &rgb_small, None, &intr()),
            Err(CloudError::Input(_))
        ));
    }

    #[test]
    fn back_projection_inverts() {
        let intr = intr();
        let mut depth = Image::filled(7, 5, 0u16);
        for v in 0..5 {
            for u in 0..7 {
                depth.set(u, v, 300 + (u * 37 + v * 101) as u16);
            }
        }
        let cloud = ingest_depth_frame(&depth, &Image::filled(7, 5, [0; 3]), None, &intr).unwrap();
        let mut i = 0;
        for v in 0..5 {
            for u in 0..7 {
                let (pu, pv) = intr.project(&cloud.points[i].position);
                assert!((pu - u as f64).abs() < 1e-6 && (pv - v as f64).abs() < 1e-6);
                i += 1;
            }
        }
    }

    #[test]
    fn label_mapping() {
        let mapping = LabelMapping::parse("# comment\n19, table\n4,ceiling # inline\n").unwrap();
        assert_eq!(reduce_labels(19, &mapping), Label::Table);
        assert_eq!(reduce_labels(4, &mapping), Label::Ceiling);
        assert_eq!(reduce_labels(12345, &mapping), Label::Unknown);
        assert!(LabelMapping::parse("7,sofa").is_err());
        assert!(LabelMapping::parse("x,floor").is_err());
    }

    #[test]
    fn nyu_unlabeled_is_unknown() {
        let mapping = LabelMapping::nyu_default();
        assert!(!mapping.is_empty());
        assert_eq!(mapping.reduce(0), Label::Unknown);
        assert_eq!(mapping.reduce(11), Label::Floor);
        assert_eq!(mapping.reduce(19), Label::Table);
    }

    #[test]
    fn intrinsics_file() {
        let intr = Intrinsics::parse("fx 500\nfy=510\ncx: 320\ncy 240 # center\n").unwrap();
        assert_eq!(intr.fy, 510.0);
        assert_eq!(intr.depth_scale, 0.001);
        assert!(Intrinsics::parse("fx 500\nfy 500\ncx 1").is_err());
        assert!(Intrinsics::parse("fx -1\nfy 500\ncx 1\ncy 1").is_err());
    }
}
