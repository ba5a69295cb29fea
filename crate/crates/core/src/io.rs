//! Point cloud readers and writers, result and scene JSON, mesh export and
//! synthetic scene generation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::IoError;
use crate::geometry::{mesh, SuperquadricParams, TriangleMesh};
use crate::inference::{gstm_samples, AbstractionResult, GstmComponent, TraceEntry};

pub const RESULT_VERSION: &str = "1";
pub const SCENE_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub source: Option<PathBuf>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Auto,
    Ply,
    Obj,
    Xyz,
}

impl FromStr for PointFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            "ply" => Ok(Self::Ply),
            "obj" => Ok(Self::Obj),
            "xyz" | "txt" => Ok(Self::Xyz),
            other => Err(format!("unknown point cloud format {other:?}")),
        }
    }
}

impl PointFormat {
    /// Resolves `Auto` from the file extension.
    pub fn resolve(self, path: &Path) -> Result<Self, IoError> {
        if self != Self::Auto {
            return Ok(self);
        }
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
            .filter(|f| *f != Self::Auto)
            .ok_or_else(|| IoError::UnknownFormat { path: path.to_path_buf() })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> IoError {
    IoError::MalformedRecord {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

pub fn load_point_cloud(path: &Path, format: PointFormat) -> Result<PointCloud, IoError> {
    let format = format.resolve(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let points = match format {
        PointFormat::Ply => parse_ply(&bytes, path)?,
        PointFormat::Obj | PointFormat::Xyz => {
            let text = std::str::from_utf8(&bytes).map_err(|e| malformed(path, 0, e.to_string()))?;
            if format == PointFormat::Obj {
                parse_obj(text, path)?
            } else {
                parse_xyz(text, path)?
            }
        }
        PointFormat::Auto => unreachable!("resolved above"),
    };
    if points.is_empty() {
        return Err(IoError::EmptyCloud { path: path.to_path_buf() });
    }
    Ok(PointCloud {
        points,
        source: Some(path.to_path_buf()),
    })
}

fn parse_triple<'a>(mut fields: impl Iterator<Item = &'a str>, path: &Path, line: usize) -> Result<Vector3<f64>, IoError> {
    let mut v = [0.0; 3];
    for (k, slot) in v.iter_mut().enumerate() {
        let field = fields
            .next()
            .ok_or_else(|| malformed(path, line, format!("expected 3 coordinates, found {k}")))?;
        let x: f64 = field
            .parse()
            .map_err(|_| malformed(path, line, format!("not a number: {field:?}")))?;
        if !x.is_finite() {
            return Err(malformed(path, line, "non-finite coordinate"));
        }
        *slot = x;
    }
    Ok(Vector3::from(v))
}

/// Whitespace-separated `x y z` rows. Extra columns are ignored; `#` starts a
/// comment.
pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_triple(line.split_whitespace(), path, i + 1)?);
    }
    Ok(out)
}

/// `v x y z` records of a Wavefront OBJ file; every other record is skipped.
pub fn parse_obj(text: &str, path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let mut fields = raw.split_whitespace();
        if fields.next() == Some("v") {
            out.push(parse_triple(fields, path, i + 1)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().expect("4 bytes")) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Vertex `x`, `y`, `z` of an ASCII or binary little-endian PLY file.
pub fn parse_ply(bytes: &[u8], path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| *pos + e);
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim_end_matches('\r').to_string();
        *pos = (end + 1).min(bytes.len());
        Some(line)
    };

    if next_line(&mut pos).as_deref().map(str::trim) != Some("ply") {
        return Err(malformed(path, 1, "missing ply magic"));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut header_lines = 1;
    loop {
        let Some(line) = next_line(&mut pos) else {
            return Err(malformed(path, header_lines, "header not terminated"));
        };
        header_lines += 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => {
                return Err(malformed(path, header_lines, format!("unsupported format {other}")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: (*name).to_string(),
                count: count
                    .parse()
                    .map_err(|_| malformed(path, header_lines, "bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", count_ty, item_ty, _] => {
                let (Some(c), Some(i)) = (Scalar::parse(count_ty), Scalar::parse(item_ty)) else {
                    return Err(malformed(path, header_lines, "unknown property type"));
                };
                elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, header_lines, "property before element"))?
                    .properties
                    .push(Property::List(c, i));
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| malformed(path, header_lines, "unknown property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| malformed(path, header_lines, "property before element"))?
                    .properties
                    .push(Property::Scalar((*name).to_string(), ty));
            }
            _ => return Err(malformed(path, header_lines, format!("unrecognized header line {line:?}"))),
        }
    }
    let binary = binary.ok_or_else(|| malformed(path, header_lines, "missing format line"))?;
    let Some(vertex_idx) = elements.iter().position(|e| e.name == "vertex") else {
        return Err(IoError::EmptyCloud { path: path.to_path_buf() });
    };
    let vertex = &elements[vertex_idx];
    let column = |axis: &str| {
        vertex
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar(n, _) if n == axis))
            .ok_or_else(|| malformed(path, header_lines, format!("vertex has no {axis} property")))
    };
    let cols = [column("x")?, column("y")?, column("z")?];

    let mut out = Vec::with_capacity(vertex.count);
    if binary {
        let mut cursor = pos;
        let take = |cursor: &mut usize, n: usize, record: usize| -> Result<&[u8], IoError> {
            let slice = bytes
                .get(*cursor..*cursor + n)
                .ok_or_else(|| malformed(path, header_lines + record, "truncated binary body"))?;
            *cursor += n;
            Ok(slice)
        };
        let mut record = 0;
        for (ei, element) in elements.iter().enumerate() {
            for _ in 0..element.count {
                record += 1;
                let mut values = Vec::with_capacity(element.properties.len());
                for prop in &element.properties {
                    match prop {
                        Property::Scalar(_, ty) => values.push(ty.read_le(take(&mut cursor, ty.size(), record)?)),
                        Property::List(count_ty, item_ty) => {
                            let n = count_ty.read_le(take(&mut cursor, count_ty.size(), record)?);
                            if !(n >= 0.0) {
                                return Err(malformed(path, header_lines + record, "negative list length"));
                            }
                            take(&mut cursor, n as usize * item_ty.size(), record)?;
                            values.push(f64::NAN);
                        }
                    }
                }
                if ei == vertex_idx {
                    out.push(vertex_from(&values, cols, path, header_lines + record)?);
                }
            }
            if ei == vertex_idx {
                break;
            }
        }
    } else {
        let text = String::from_utf8_lossy(&bytes[pos..]);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        for (ei, element) in elements.iter().enumerate() {
            for _ in 0..element.count {
                let Some((offset, line)) = lines.next() else {
                    return Err(malformed(path, header_lines, format!("missing {} records", element.name)));
                };
                let line_no = header_lines + offset + 1;
                if ei != vertex_idx {
                    continue;
                }
                let mut values = Vec::with_capacity(element.properties.len());
                let mut fields = line.split_whitespace();
                for prop in &element.properties {
                    let mut next = || -> Result<f64, IoError> {
                        let f = fields.next().ok_or_else(|| malformed(path, line_no, "too few values"))?;
                        f.parse().map_err(|_| malformed(path, line_no, format!("not a number: {f:?}")))
                    };
                    match prop {
                        Property::Scalar(..) => values.push(next()?),
                        Property::List(..) => {
                            let n = next()?;
                            for _ in 0..n as usize {
                                next()?;
                            }
                            values.push(f64::NAN);
                        }
                    }
                }
                out.push(vertex_from(&values, cols, path, line_no)?);
            }
            if ei == vertex_idx {
                break;
            }
        }
    }
    Ok(out)
}

fn vertex_from(values: &[f64], cols: [usize; 3], path: &Path, line: usize) -> Result<Vector3<f64>, IoError> {
    let v = Vector3::new(values[cols[0]], values[cols[1]], values[cols[2]]);
    if !v.iter().all(|x| x.is_finite()) {
        return Err(malformed(path, line, "non-finite coordinate"));
    }
    Ok(v)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// ASCII PLY with one `x y z` vertex per point.
pub fn ply_string(points: &[Vector3<f64>]) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    );
    for p in points {
        let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
    }
    s
}

/// Writes points in the format implied by the extension (PLY by default).
pub fn save_point_cloud(points: &[Vector3<f64>], path: &Path) -> Result<(), IoError> {
    let text = match PointFormat::Auto.resolve(path).unwrap_or(PointFormat::Ply) {
        PointFormat::Xyz => points.iter().fold(String::new(), |mut s, p| {
            let _ = writeln!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
            s
        }),
        PointFormat::Obj => points.iter().fold(String::new(), |mut s, p| {
            let _ = writeln!(s, "v {:?} {:?} {:?}", p.x, p.y, p.z);
            s
        }),
        _ => ply_string(points),
    };
    write_file(path, text.as_bytes())
}

/// One label per line.
pub fn save_labels(labels: &[usize], path: &Path) -> Result<(), IoError> {
    let text = labels.iter().fold(String::new(), |mut s, l| {
        let _ = writeln!(s, "{l}");
        s
    });
    write_file(path, text.as_bytes())
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|_| malformed(path, i + 1, format!("not a label: {l:?}"))))
        .collect()
}

/// Serialized form of one primitive with its noise variance and point count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub eps1: f64,
    pub eps2: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    /// `w, x, y, z`
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub kx: f64,
    pub ky: f64,
    pub sigma2: f64,
    pub count: usize,
}

impl ComponentRecord {
    pub fn new(component: &GstmComponent, count: usize) -> Self {
        let t = &component.theta;
        let q = t.rotation.quaternion();
        Self {
            eps1: t.eps1,
            eps2: t.eps2,
            ax: t.ax,
            ay: t.ay,
            az: t.az,
            quaternion: [q.w, q.i, q.j, q.k],
            translation: [t.translation.x, t.translation.y, t.translation.z],
            kx: t.kx,
            ky: t.ky,
            sigma2: component.sigma2,
            count,
        }
    }

    /// The stored quaternion is taken as-is so that saved values round-trip
    /// exactly; it is renormalized only if it is visibly off unit length.
    pub fn component(&self) -> Result<GstmComponent, String> {
        let [w, i, j, k] = self.quaternion;
        let q = Quaternion::new(w, i, j, k);
        let norm = q.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err("quaternion has zero or non-finite norm".into());
        }
        let rotation = if (norm - 1.0).abs() < 1e-9 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        let theta = SuperquadricParams {
            eps1: self.eps1,
            eps2: self.eps2,
            ax: self.ax,
            ay: self.ay,
            az: self.az,
            rotation,
            translation: Vector3::from(self.translation),
            kx: self.kx,
            ky: self.ky,
        };
        theta.validate().map_err(|e| e.to_string())?;
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err("sigma2 must be finite and non-negative".into());
        }
        Ok(GstmComponent {
            theta,
            sigma2: self.sigma2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub version: String,
    pub components: Vec<ComponentRecord>,
    pub labels: Vec<usize>,
    pub trace: Vec<TraceEntry>,
}

impl ResultFile {
    pub fn from_result(result: &AbstractionResult) -> Self {
        let counts = result.counts();
        Self {
            version: RESULT_VERSION.to_string(),
            components: result
                .components
                .iter()
                .zip(counts)
                .map(|(c, n)| ComponentRecord::new(c, n))
                .collect(),
            labels: result.labels.clone(),
            trace: result.trace.clone(),
        }
    }
}

pub fn result_to_json(result: &AbstractionResult) -> String {
    let mut s = serde_json::to_string_pretty(&ResultFile::from_result(result)).expect("result serializes");
    s.push('\n');
    s
}

pub fn save_result(result: &AbstractionResult, path: &Path) -> Result<(), IoError> {
    write_file(path, result_to_json(result).as_bytes())
}

fn check_version(value: &serde_json::Value, expected: &str, path: &Path) -> Result<(), IoError> {
    let found = value.get("version").map_or_else(
        || "<missing>".to_string(),
        |v| v.as_str().map_or_else(|| v.to_string(), str::to_string),
    );
    if found != expected {
        return Err(IoError::Version {
            path: path.to_path_buf(),
            found,
            expected: expected.to_string(),
        });
    }
    Ok(())
}

pub fn result_from_json(text: &str, path: &Path) -> Result<AbstractionResult, IoError> {
    let json_err = |source| IoError::Json {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    check_version(&value, RESULT_VERSION, path)?;
    let file: ResultFile = serde_json::from_value(value).map_err(json_err)?;
    let invalid = |reason: String| IoError::Invalid {
        path: path.to_path_buf(),
        reason,
    };
    let components = file
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| c.component().map_err(|e| invalid(format!("component {i}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(&bad) = file.labels.iter().find(|&&l| l >= components.len()) {
        return Err(invalid(format!("label {bad} has no component")));
    }
    let result = AbstractionResult {
        components,
        labels: file.labels,
        trace: file.trace,
    };
    let counts = result.counts();
    if !result.labels.is_empty() && file.components.iter().zip(&counts).any(|(c, n)| c.count != *n) {
        return Err(invalid("component counts disagree with labels".into()));
    }
    Ok(result)
}

pub fn load_result(path: &Path) -> Result<AbstractionResult, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    result_from_json(&text, path)
}

/// Ground truth for a synthetic cloud: primitives, noise and point counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub version: String,
    #[serde(default)]
    pub seed: u64,
    pub components: Vec<ComponentRecord>,
}

impl SceneDescription {
    pub fn new(seed: u64, components: &[(SuperquadricParams, f64, usize)]) -> Self {
        Self {
            version: SCENE_VERSION.to_string(),
            seed,
            components: components
                .iter()
                .map(|(theta, sigma2, n)| ComponentRecord::new(&GstmComponent { theta: *theta, sigma2: *sigma2 }, *n))
                .collect(),
        }
    }
}

pub fn load_scene(path: &Path) -> Result<SceneDescription, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let json_err = |source| IoError::Json {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
    check_version(&value, SCENE_VERSION, path)?;
    let scene: SceneDescription = serde_json::from_value(value).map_err(json_err)?;
    for (i, c) in scene.components.iter().enumerate() {
        c.component().map_err(|e| IoError::Invalid {
            path: path.to_path_buf(),
            reason: format!("component {i}: {e}"),
        })?;
    }
    Ok(scene)
}

pub fn save_scene(scene: &SceneDescription, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(scene).expect("scene serializes");
    write_file(path, text.as_bytes())
}

/// Concatenated GSTM samples of every scene component, with the index of the
/// generating component per point.
///
/// # Panics
/// If a component record is invalid; [`load_scene`] rejects those.
pub fn synth_scene<R: Rng + ?Sized>(scene: &SceneDescription, rng: &mut R) -> (PointCloud, Vec<usize>) {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in scene.components.iter().enumerate() {
        let component = record.component().expect("valid scene component");
        points.extend(gstm_samples(&component, record.count, rng));
        labels.extend(std::iter::repeat_n(i, record.count));
    }
    (PointCloud { points, source: None }, labels)
}

pub fn obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    append_obj(&mut s, mesh, 0);
    s
}

fn append_obj(s: &mut String, mesh: &TriangleMesh, offset: usize) {
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + offset + 1, t[1] + offset + 1, t[2] + offset + 1);
    }
}

/// Writes `{prefix}_part{i}.obj` for each component and `{prefix}_all.obj`
/// with every part. Returns the paths written, combined file last.
pub fn export_meshes(result: &AbstractionResult, prefix: &Path, resolution: usize) -> Result<Vec<PathBuf>, IoError> {
    let stem = prefix.to_string_lossy().into_owned();
    let mut written = Vec::new();
    let mut combined = String::new();
    let mut offset = 0;
    for (i, c) in result.components.iter().enumerate() {
        let m = mesh(&c.theta, resolution);
        let path = PathBuf::from(format!("{stem}_part{i}.obj"));
        write_file(&path, obj_string(&m).as_bytes())?;
        written.push(path);
        let _ = writeln!(combined, "o part{i}");
        append_obj(&mut combined, &m, offset);
        offset += m.vertices.len();
    }
    let path = PathBuf::from(format!("{stem}_all.obj"));
    write_file(&path, combined.as_bytes())?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::radial_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn xyz_basic_and_comments() {
        let pts = parse_xyz("0 0 0\n1 0 0\n0 1 0\n", p()).unwrap();
        assert_eq!(pts, vec![Vector3::zeros(), Vector3::x(), Vector3::y()]);
        let pts = parse_xyz("# header\n\n1 2 3 0.5 # with normal\n", p()).unwrap();
        assert_eq!(pts, vec![Vector3::new(1.0, 2.0, 3.0)]);
    }

    #[test]
    fn xyz_rejects_bad_rows() {
        match parse_xyz("0 0 0\n1 nan 0\n", p()) {
            Err(IoError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xyz("1 2\n", p()), Err(IoError::MalformedRecord { line: 1, .. })));
        assert!(matches!(parse_xyz("1 2 x\n", p()), Err(IoError::MalformedRecord { line: 1, .. })));
    }

    #[test]
    fn obj_ignores_faces() {
        let text = "# cube corner\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1 2 3\n";
        assert_eq!(parse_obj(text, p()).unwrap().len(), 3);
    }

    #[test]
    fn ascii_ply_single_vertex() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0.5 -1.25 3.0\n";
        assert_eq!(parse_ply(text.as_bytes(), p()).unwrap(), vec![Vector3::new(0.5, -1.25, 3.0)]);
    }

    #[test]
    fn ascii_ply_with_faces_and_extra_props() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double z\nproperty double x\nproperty uchar red\nproperty double y\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n3 1 255 2\n6 4 0 5\n3 0 1 1\n";
        assert_eq!(
            parse_ply(text.as_bytes(), p()).unwrap(),
            vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]
        );
    }

    #[test]
    fn binary_ply() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty double y\nproperty int z\nend_header\n".to_vec();
        for (x, y, z) in [(0.5f32, -1.25f64, 3i32), (2.0, 4.5, -7)] {
            bytes.extend(x.to_le_bytes());
            bytes.extend(y.to_le_bytes());
            bytes.extend(z.to_le_bytes());
        }
        assert_eq!(
            parse_ply(&bytes, p()).unwrap(),
            vec![Vector3::new(0.5, -1.25, 3.0), Vector3::new(2.0, 4.5, -7.0)]
        );
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(parse_ply(&bytes, p()), Err(IoError::MalformedRecord { .. })));
    }

    #[test]
    fn ply_writer_round_trip() {
        let pts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1e-300, 1e300, 7.0)];
        assert_eq!(parse_ply(ply_string(&pts).as_bytes(), p()).unwrap(), pts);
    }

    #[test]
    fn unknown_format_and_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("cloud.bin");
        fs::write(&bad, "1 2 3").unwrap();
        assert!(matches!(load_point_cloud(&bad, PointFormat::Auto), Err(IoError::UnknownFormat { .. })));
        assert!(load_point_cloud(&bad, PointFormat::Xyz).is_ok());
        let empty = dir.path().join("empty.xyz");
        fs::write(&empty, "# nothing\n").unwrap();
        assert!(matches!(load_point_cloud(&empty, PointFormat::Auto), Err(IoError::EmptyCloud { .. })));
    }

    fn sample_result() -> AbstractionResult {
        let theta = SuperquadricParams::canonical(0.3, 1.7, [1.0 / 3.0, 0.7, 2.0])
            .with_pose(UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3), Vector3::new(0.1, -0.2, 1e-17))
            .with_taper(0.123_456_789_012_345_67, -0.5);
        AbstractionResult {
            components: vec![
                GstmComponent { theta, sigma2: 1.0 / 7.0 },
                GstmComponent {
                    theta: SuperquadricParams::sphere(1.0),
                    sigma2: 1e-4,
                },
            ],
            labels: vec![0, 1, 1, 0, 1],
            trace: vec![TraceEntry { k: 2, d_total: 0.1 + 0.2 }],
        }
    }

    #[test]
    fn result_round_trip_is_exact() {
        let r = sample_result();
        let back = result_from_json(&result_to_json(&r), p()).unwrap();
        assert_eq!(back, r);
        assert_eq!(result_to_json(&back), result_to_json(&r));
    }

    #[test]
    fn unit_sphere_serialization() {
        let json: serde_json::Value = serde_json::from_str(&result_to_json(&sample_result())).unwrap();
        let c = &json["components"][1];
        assert_eq!(c["eps1"], 1.0);
        assert_eq!(c["eps2"], 1.0);
        assert_eq!(c["quaternion"], serde_json::json!([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(c["count"], 3);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let text = result_to_json(&sample_result()).replace("\"version\": \"1\"", "\"version\": \"2\"");
        match result_from_json(&text, p()) {
            Err(IoError::Version { found, .. }) => assert_eq!(found, "2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_labels_are_rejected() {
        let mut json: serde_json::Value = serde_json::from_str(&result_to_json(&sample_result())).unwrap();
        json["labels"][0] = 5.into();
        assert!(matches!(result_from_json(&json.to_string(), p()), Err(IoError::Invalid { .. })));
        json["labels"][0] = 1.into();
        assert!(matches!(result_from_json(&json.to_string(), p()), Err(IoError::Invalid { .. })));
    }

    #[test]
    fn synth_examples() {
        let sphere = SuperquadricParams::sphere(1.0);
        let scene = SceneDescription::new(0, &[(sphere, 0.0, 100)]);
        let (cloud, labels) = synth_scene(&scene, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(cloud.len(), 100);
        assert!(labels.iter().all(|&l| l == 0));
        assert!(cloud.points.iter().all(|x| (x.norm() - 1.0).abs() <= 1e-9));

        let scene = SceneDescription::new(0, &[(sphere, 1e-4, 100), (sphere, 1e-4, 200)]);
        let (cloud, labels) = synth_scene(&scene, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(cloud.len(), 300);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 200);
        let (again, _) = synth_scene(&scene, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(again, cloud);
    }

    #[test]
    fn export_mesh_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_result();
        let paths = export_meshes(&r, &dir.path().join("shape"), 16).unwrap();
        assert_eq!(paths.len(), 3);
        let parts: Vec<Vec<Vector3<f64>>> = paths[..2]
            .iter()
            .map(|f| parse_obj(&fs::read_to_string(f).unwrap(), f).unwrap())
            .collect();
        let all = parse_obj(&fs::read_to_string(&paths[2]).unwrap(), &paths[2]).unwrap();
        assert_eq!(all.len(), parts[0].len() + parts[1].len());
        for (part, c) in parts.iter().zip(&r.components) {
            for v in part {
                assert!(radial_distance(&c.theta, v) <= 1e-6);
            }
        }
        let faces = fs::read_to_string(&paths[2]).unwrap();
        let max_index = faces
            .lines()
            .filter(|l| l.starts_with("f "))
            .flat_map(|l| l[2..].split_whitespace().map(|i| i.parse::<usize>().unwrap()))
            .max()
            .unwrap();
        assert_eq!(max_index, all.len());
    }
    mod props {
        use super::*;
        use crate::inference::TraceEntry;
        use nalgebra::{UnitQuaternion, Vector3};
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn result_json_round_trips_exactly(
                e in (0.1f64..1.9, 0.1f64..1.9),
                a in (1e-4f64..10.0, 1e-4f64..10.0, 1e-4f64..10.0),
                r in (-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0),
                t in (-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3),
                k in (-0.99f64..0.99, -0.99f64..0.99),
                sigma2 in 1e-12f64..1.0,
            ) {
                let theta = SuperquadricParams::canonical(e.0, e.1, [a.0, a.1, a.2])
                    .with_pose(UnitQuaternion::from_euler_angles(r.0, r.1, r.2), Vector3::new(t.0, t.1, t.2))
                    .with_taper(k.0, k.1);
                let result = AbstractionResult {
                    components: vec![GstmComponent { theta, sigma2 }],
                    labels: vec![0, 0, 0],
                    trace: vec![TraceEntry { k: 1, d_total: sigma2 * 3.0 }],
                };
                let back = result_from_json(&result_to_json(&result), Path::new("mem")).unwrap();
                prop_assert_eq!(back, result);
            }

            #[test]
            fn xyz_parse_recovers_written_points(pts in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6), 1..50)) {
                let points: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::new(p.0, p.1, p.2)).collect();
                let text: String = points.iter().map(|p| format!("{:?} {:?} {:?}\n", p.x, p.y, p.z)).collect();
                prop_assert_eq!(parse_xyz(&text, Path::new("mem")).unwrap(), points.clone());
                prop_assert_eq!(parse_ply(ply_string(&points).as_bytes(), Path::new("mem")).unwrap(), points);
            }
        }
    }
}
