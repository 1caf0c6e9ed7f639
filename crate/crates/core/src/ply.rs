//! Reading and writing point clouds as PLY.
//!
//! The vertex element must carry `x y z`; `red green blue`, `label` and
//! `nx ny nz` are picked up when present and any other property is skipped.
//! Both `ascii` and `binary_little_endian` bodies are read; the writer always
//! emits binary little endian with `x y z` as float32, colors as uint8 and,
//! if any point is labeled, a uint8 `label` (255 = no label).
//!
//! The cloud frame and source id travel in `comment frame ...` /
//! `comment source ...` header lines.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::cloud::{CloudMeta, Frame, Label, Point, PointCloud, Vec3};

/// Label byte written for points without a label.
pub const NO_LABEL: u8 = 255;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("PLY parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn parse_err(offset: usize, message: impl Into<String>) -> PlyError {
    PlyError::Parse {
        offset,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    frame: Frame,
    source_id: String,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, PlyError> {
    let mut offset = 0usize;
    let next_line = |offset: &mut usize| -> Result<(usize, String), PlyError> {
        let start = *offset;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(start, "unterminated header"))?;
        *offset = start + end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse_err(start, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (start, magic) = next_line(&mut offset)?;
    if magic.trim() != "ply" {
        return Err(parse_err(start, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut frame = Frame::Camera;
    let mut source_id = String::new();
    loop {
        let (start, line) = next_line(&mut offset)?;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("format") => {
                let kind = tokens.next().unwrap_or("");
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => {
                        return Err(parse_err(start, format!("unsupported format `{other}`")))
                    }
                });
            }
            Some("comment") => {
                let rest: Vec<&str> = tokens.collect();
                match rest.as_slice() {
                    ["frame", "gravity_aligned"] => frame = Frame::GravityAligned,
                    ["frame", "camera"] => frame = Frame::Camera,
                    ["source", id @ ..] => source_id = id.join(" "),
                    _ => {}
                }
            }
            Some("obj_info") | None => {}
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| parse_err(start, "element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| parse_err(start, "element without valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(start, "property before any element"))?;
                let ty = tokens.next().unwrap_or("");
                let kind = if ty == "list" {
                    let count = tokens.next().and_then(Scalar::parse);
                    let item = tokens.next().and_then(Scalar::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => PropertyKind::List { count, item },
                        _ => return Err(parse_err(start, "bad list property types")),
                    }
                } else {
                    PropertyKind::Scalar(
                        Scalar::parse(ty)
                            .ok_or_else(|| parse_err(start, format!("unknown type `{ty}`")))?,
                    )
                };
                let name = tokens
                    .next()
                    .ok_or_else(|| parse_err(start, "property without name"))?;
                element.properties.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(start, format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(0, "missing format line"))?;
    Ok(Header {
        format,
        elements,
        frame,
        source_id,
        body_offset: offset,
    })
}

/// Column indices of the vertex properties we understand.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    label: Option<usize>,
    normal: Option<[usize; 3]>,
}

impl VertexLayout {
    fn new(element: &Element) -> Result<Self, String> {
        let find = |name: &str| -> Result<Option<usize>, String> {
            match element.properties.iter().position(|p| p.name == name) {
                Some(i) => match element.properties[i].kind {
                    PropertyKind::Scalar(_) => Ok(Some(i)),
                    PropertyKind::List { .. } => Err(format!("vertex property `{name}` is a list")),
                },
                None => Ok(None),
            }
        };
        let triple = |a: &str, b: &str, c: &str| -> Result<Option<[usize; 3]>, String> {
            Ok(match (find(a)?, find(b)?, find(c)?) {
                (Some(a), Some(b), Some(c)) => Some([a, b, c]),
                _ => None,
            })
        };
        let xyz = triple("x", "y", "z")?.ok_or("vertex element lacks x, y, z")?;
        Ok(VertexLayout {
            xyz,
            rgb: triple("red", "green", "blue")?,
            label: find("label")?,
            normal: triple("nx", "ny", "nz")?,
        })
    }

    fn point(&self, values: &[f64]) -> Point {
        let pos = Vec3::new(values[self.xyz[0]], values[self.xyz[1]], values[self.xyz[2]]);
        let color = self
            .rgb
            .map(|[r, g, b]| [values[r] as u8, values[g] as u8, values[b] as u8])
            .unwrap_or([0, 0, 0]);
        let mut point = Point::new(pos, color);
        point.label = self.label.and_then(|i| {
            let raw = values[i] as i64;
            if raw == i64::from(NO_LABEL) {
                None
            } else {
                Some(u8::try_from(raw).ok().and_then(Label::from_id).unwrap_or(Label::Unknown))
            }
        });
        point.normal = self.normal.and_then(|[a, b, c]| {
            let n = Vec3::new(values[a], values[b], values[c]);
            let norm = n.norm();
            (norm > 0.0 && norm.is_finite()).then(|| n / norm)
        });
        point
    }
}

/// Parses a PLY file held in memory.
pub fn parse_cloud(bytes: &[u8]) -> Result<PointCloud, PlyError> {
    let header = parse_header(bytes)?;
    let vertex_idx = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(header.body_offset, "no vertex element"))?;
    let layout = VertexLayout::new(&header.elements[vertex_idx])
        .map_err(|m| parse_err(header.body_offset, m))?;

    let mut reader = BodyReader {
        bytes,
        offset: header.body_offset,
        format: header.format,
    };
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (ei, element) in header.elements.iter().enumerate().take(vertex_idx + 1) {
        if ei == vertex_idx {
            points.reserve(element.count);
        }
        for row in 0..element.count {
            reader.read_row(element, &mut values).map_err(|e| match e {
                PlyError::Parse { offset, message } => parse_err(
                    offset,
                    format!("{} row {row} of {}: {message}", element.name, element.count),
                ),
                other => other,
            })?;
            if ei == vertex_idx {
                points.push(layout.point(&values));
            }
        }
    }
    Ok(PointCloud {
        points,
        frame: header.frame,
        meta: CloudMeta {
            source_id: header.source_id,
            intrinsics: None,
        },
    })
}

struct BodyReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    format: PlyFormat,
}

impl BodyReader<'_> {
    /// Reads one element row into `values`; list properties contribute their
    /// length only.
    fn read_row(&mut self, element: &Element, values: &mut Vec<f64>) -> Result<(), PlyError> {
        values.clear();
        match self.format {
            PlyFormat::BinaryLittleEndian => {
                for prop in &element.properties {
                    match prop.kind {
                        PropertyKind::Scalar(s) => values.push(self.take_binary(s)?),
                        PropertyKind::List { count, item } => {
                            let n = self.take_binary(count)?;
                            if n < 0.0 {
                                return Err(parse_err(self.offset, "negative list length"));
                            }
                            for _ in 0..n as usize {
                                self.take_binary(item)?;
                            }
                            values.push(n);
                        }
                    }
                }
            }
            PlyFormat::Ascii => {
                let start = self.offset;
                let rest = &self.bytes[start..];
                if rest.is_empty() {
                    return Err(parse_err(start, "unexpected end of file"));
                }
                let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
                self.offset = (start + end + 1).min(self.bytes.len());
                let line = std::str::from_utf8(&rest[..end])
                    .map_err(|_| parse_err(start, "body line is not valid UTF-8"))?;
                let mut tokens = line.split_whitespace();
                let mut next = |ty: Scalar| -> Result<f64, PlyError> {
                    let t = tokens.next().ok_or_else(|| parse_err(start, "too few values"))?;
                    let bad = || parse_err(start, format!("bad number `{t}`"));
                    // float32 text must round to float32, like the binary form
                    if ty == Scalar::F32 {
                        t.parse::<f32>().map(f64::from).map_err(|_| bad())
                    } else {
                        t.parse::<f64>().map_err(|_| bad())
                    }
                };
                for prop in &element.properties {
                    match prop.kind {
                        PropertyKind::Scalar(s) => values.push(next(s)?),
                        PropertyKind::List { count, item } => {
                            let n = next(count)?;
                            for _ in 0..n as usize {
                                next(item)?;
                            }
                            values.push(n);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn take_binary(&mut self, s: Scalar) -> Result<f64, PlyError> {
        let end = self.offset + s.size();
        if end > self.bytes.len() {
            return Err(parse_err(self.offset, "unexpected end of file"));
        }
        let v = s.read_le(&self.bytes[self.offset..end]);
        self.offset = end;
        Ok(v)
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, PlyError> {
    let bytes = fs::read(path).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cloud = parse_cloud(&bytes)?;
    if cloud.meta.source_id.is_empty() {
        cloud.meta.source_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(cloud)
}

/// Serializes a cloud in the given format.
pub fn encode_cloud(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let with_label = cloud.has_labels();
    let mut out = Vec::with_capacity(256 + cloud.len() * 16);
    let format_name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let frame = match cloud.frame {
        Frame::Camera => "camera",
        Frame::GravityAligned => "gravity_aligned",
    };
    let source = cloud.meta.source_id.split_whitespace().collect::<Vec<_>>().join(" ");
    // Writing into a Vec cannot fail.
    writeln!(out, "ply\nformat {format_name} 1.0\ncomment frame {frame}").unwrap();
    if !source.is_empty() {
        writeln!(out, "comment source {source}").unwrap();
    }
    writeln!(
        out,
        "element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue",
        cloud.len()
    )
    .unwrap();
    if with_label {
        writeln!(out, "property uchar label").unwrap();
    }
    writeln!(out, "end_header").unwrap();

    for p in &cloud.points {
        let xyz = [p.position.x as f32, p.position.y as f32, p.position.z as f32];
        let label = p.label.map(Label::id).unwrap_or(NO_LABEL);
        match format {
            PlyFormat::BinaryLittleEndian => {
                for c in xyz {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                out.extend_from_slice(&p.color);
                if with_label {
                    out.push(label);
                }
            }
            PlyFormat::Ascii => {
                write!(
                    out,
                    "{} {} {} {} {} {}",
                    xyz[0], xyz[1], xyz[2], p.color[0], p.color[1], p.color[2]
                )
                .unwrap();
                if with_label {
                    write!(out, " {label}").unwrap();
                }
                out.push(b'\n');
            }
        }
    }
    out
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<(), PlyError> {
    write_cloud_with_format(cloud, path, PlyFormat::BinaryLittleEndian)
}

pub fn write_cloud_with_format(
    cloud: &PointCloud,
    path: &Path,
    format: PlyFormat,
) -> Result<(), PlyError> {
    fs::write(path, encode_cloud(cloud, format)).map_err(|source| PlyError::Io {
        path: path.display().to_string(),
        source,
    })
}
