//! Chunked, function-labeled lane-boundary model.
//!
//! A road is cut along its trajectory into fixed-length chunks. Each chunk
//! carries one `trajectory` line plus the solid and dashed boundary lines
//! that fall inside it; a line crossing a chunk border is split there and
//! every fragment keeps the original line id.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use uuid::Uuid;

use crate::centerline::{dist, Centerline};
use crate::geo::{self, GeoPoint, LocalFrame, TilePixel};
use crate::raster::{draw_polyline, fill_polygon, Mask, Raster};

pub const DEFAULT_CHUNK_LENGTH: f64 = 12.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("degenerate trajectory: fewer than two distinct points")]
    DegenerateTrajectory,
    #[error("trajectory length {length:.3} m shorter than one chunk ({chunk_length} m)")]
    TrajectoryTooShort { length: f64, chunk_length: f64 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ModelError::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineKind {
    Solid,
    Dashed,
    Trajectory,
}

impl LineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LineKind::Solid => "solid",
            LineKind::Dashed => "dashed",
            LineKind::Trajectory => "trajectory",
        }
    }

    /// Exact, case-sensitive match against the three schema strings.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "solid" => Some(LineKind::Solid),
            "dashed" => Some(LineKind::Dashed),
            "trajectory" => Some(LineKind::Trajectory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLine {
    pub line_id: Uuid,
    pub kind: LineKind,
    pub points: Vec<GeoPoint>,
}

impl BoundaryLine {
    pub fn new(line_id: Uuid, kind: LineKind, points: Vec<GeoPoint>) -> Self {
        Self { line_id, kind, points }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.points.len() < 2 {
            return Err(ModelError::Invalid(format!("line {} has fewer than 2 points", self.line_id)));
        }
        for w in self.points.windows(2) {
            if w[0].lat == w[1].lat && w[0].lon == w[1].lon {
                return Err(ModelError::Invalid(format!("line {} repeats a point", self.line_id)));
            }
        }
        for p in &self.points {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub id: u64,
    pub map_version: i64,
    pub lines: Vec<BoundaryLine>,
}

impl Chunk {
    pub fn trajectory(&self) -> Option<&BoundaryLine> {
        self.lines.iter().find(|l| l.kind == LineKind::Trajectory)
    }

    /// Solid and dashed lines, in file order.
    pub fn boundary_lines(&self) -> impl Iterator<Item = &BoundaryLine> {
        self.lines.iter().filter(|l| l.kind != LineKind::Trajectory)
    }

    pub fn validate(&self, chunk_length: f64) -> Result<(), ModelError> {
        let trajectories = self.lines.iter().filter(|l| l.kind == LineKind::Trajectory).count();
        if trajectories != 1 {
            return Err(ModelError::Invalid(format!(
                "chunk {} has {trajectories} trajectory lines",
                self.id
            )));
        }
        for l in &self.lines {
            l.validate()?;
        }
        let traj = self.trajectory().unwrap();
        let frame = LocalFrame::new(traj.points[0]);
        let tpts: Vec<[f64; 2]> = traj.points.iter().map(|p| frame.to_en(p)).collect();
        let reach = chunk_length * 1.5;
        for l in self.boundary_lines() {
            for p in &l.points {
                let q = frame.to_en(p);
                let d = tpts
                    .windows(2)
                    .map(|w| crate::centerline::seg_dist(q, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                if d > reach {
                    return Err(ModelError::Invalid(format!(
                        "chunk {}: line {} strays {d:.1} m from the trajectory",
                        self.id, l.line_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Equality of content with coordinates compared to `tol_deg`.
    pub fn approx_eq(&self, other: &Chunk, tol_deg: f64) -> bool {
        self.id == other.id && self.map_version == other.map_version && self.same_geometry(other, tol_deg)
    }

    /// Content equality ignoring `map_version`, which is metadata.
    pub fn same_geometry(&self, other: &Chunk, tol_deg: f64) -> bool {
        self.lines.len() == other.lines.len()
            && self.lines.iter().zip(&other.lines).all(|(a, b)| {
                a.line_id == b.line_id
                    && a.kind == b.kind
                    && a.points.len() == b.points.len()
                    && a.points
                        .iter()
                        .zip(&b.points)
                        .all(|(p, q)| (p.lat - q.lat).abs() <= tol_deg && (p.lon - q.lon).abs() <= tol_deg)
            })
    }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, ModelError> {
    obj.get(key)
        .ok_or_else(|| ModelError::parse(join(path, key), "missing field"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Parses one chunk document. Errors carry the JSON path of the offending
/// value, e.g. `lines[0].type`.
pub fn parse_chunk_json(text: &[u8]) -> Result<Chunk, ModelError> {
    let root: Value = serde_json::from_slice(text).map_err(|e| ModelError::parse("$", e.to_string()))?;
    let obj = root.as_object().ok_or_else(|| ModelError::parse("$", "expected an object"))?;
    let id = field(obj, "id", "")?
        .as_u64()
        .ok_or_else(|| ModelError::parse("id", "expected a non-negative integer"))?;
    let map_version = field(obj, "map version", "")?
        .as_i64()
        .ok_or_else(|| ModelError::parse("map version", "expected an integer"))?;
    let raw_lines = field(obj, "lines", "")?
        .as_array()
        .ok_or_else(|| ModelError::parse("lines", "expected an array"))?;

    let mut lines = Vec::with_capacity(raw_lines.len());
    for (i, raw) in raw_lines.iter().enumerate() {
        let path = format!("lines[{i}]");
        let lo = raw
            .as_object()
            .ok_or_else(|| ModelError::parse(&path, "expected an object"))?;
        let id_str = field(lo, "line id", &path)?
            .as_str()
            .ok_or_else(|| ModelError::parse(join(&path, "line id"), "expected a string"))?;
        let line_id =
            Uuid::parse_str(id_str).map_err(|e| ModelError::parse(join(&path, "line id"), e.to_string()))?;
        let kind_str = field(lo, "type", &path)?
            .as_str()
            .ok_or_else(|| ModelError::parse(join(&path, "type"), "expected a string"))?;
        let kind = LineKind::parse(kind_str).ok_or_else(|| {
            ModelError::parse(
                join(&path, "type"),
                format!("unknown line type {kind_str:?}; expected solid, dashed or trajectory"),
            )
        })?;
        let ppath = join(&path, "points");
        let raw_pts = field(lo, "points", &path)?
            .as_array()
            .ok_or_else(|| ModelError::parse(&ppath, "expected an array"))?;
        if raw_pts.len() < 2 {
            return Err(ModelError::parse(&ppath, "a line needs at least 2 points"));
        }
        let mut points = Vec::with_capacity(raw_pts.len());
        for (j, rp) in raw_pts.iter().enumerate() {
            let pp = format!("{ppath}[{j}]");
            let pair = rp
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| ModelError::parse(&pp, "expected [latitude, longitude]"))?;
            let lat = pair[0].as_f64().ok_or_else(|| ModelError::parse(&pp, "latitude is not a number"))?;
            let lon = pair[1].as_f64().ok_or_else(|| ModelError::parse(&pp, "longitude is not a number"))?;
            let g = GeoPoint::new(lat, lon);
            g.validate().map_err(|e| ModelError::parse(&pp, e.to_string()))?;
            points.push(g);
        }
        lines.push(BoundaryLine { line_id, kind, points });
    }
    Ok(Chunk { id, map_version, lines })
}

/// Coordinates are written with nine decimal places (about 0.1 mm).
fn fmt_coord(v: f64) -> String {
    format!("{v:.9}")
}

/// Deterministic serialization: fixed key order, two-space indentation.
pub fn serialize_chunk_json(c: &Chunk) -> Vec<u8> {
    let mut s = String::new();
    s.push_str("{\n");
    let _ = writeln!(s, "  \"id\": {},", c.id);
    let _ = writeln!(s, "  \"map version\": {},", c.map_version);
    if c.lines.is_empty() {
        s.push_str("  \"lines\": []\n}\n");
        return s.into_bytes();
    }
    s.push_str("  \"lines\": [\n");
    for (i, l) in c.lines.iter().enumerate() {
        s.push_str("    {\n");
        let _ = writeln!(s, "      \"line id\": \"{}\",", l.line_id.hyphenated());
        let _ = writeln!(s, "      \"type\": \"{}\",", l.kind.as_str());
        s.push_str("      \"points\": [\n");
        for (j, p) in l.points.iter().enumerate() {
            let sep = if j + 1 == l.points.len() { "" } else { "," };
            let _ = writeln!(s, "        [{}, {}]{sep}", fmt_coord(p.lat), fmt_coord(p.lon));
        }
        s.push_str("      ]\n");
        let sep = if i + 1 == c.lines.len() { "" } else { "," };
        let _ = writeln!(s, "    }}{sep}");
    }
    s.push_str("  ]\n}\n");
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadModel {
    pub chunks: Vec<Chunk>,
    pub chunk_length: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RoadIndex {
    #[serde(rename = "chunk length")]
    chunk_length: f64,
    chunks: Vec<u64>,
}

impl RoadModel {
    pub fn set_map_version(&mut self, v: i64) {
        for c in &mut self.chunks {
            c.map_version = v;
        }
    }

    /// Concatenated trajectory across all chunks, shared border points merged.
    pub fn trajectory_points(&self) -> Vec<GeoPoint> {
        let mut out: Vec<GeoPoint> = Vec::new();
        for c in &self.chunks {
            if let Some(t) = c.trajectory() {
                for p in &t.points {
                    if out.last().is_none_or(|q| q.lat != p.lat || q.lon != p.lon) {
                        out.push(*p);
                    }
                }
            }
        }
        out
    }

    pub fn centerline(&self) -> Result<Centerline, ModelError> {
        Centerline::new(&self.trajectory_points()).ok_or(ModelError::DegenerateTrajectory)
    }

    /// Boundary lines reassembled across chunks by line id, in order of first
    /// appearance. Fragments are concatenated in chunk order.
    pub fn assembled_lines(&self) -> Vec<BoundaryLine> {
        let mut out: Vec<BoundaryLine> = Vec::new();
        for c in &self.chunks {
            for l in c.boundary_lines() {
                match out.iter_mut().find(|o| o.line_id == l.line_id) {
                    Some(o) => {
                        for p in &l.points {
                            let last = o.points.last().unwrap();
                            if last.lat != p.lat || last.lon != p.lon {
                                o.points.push(*p);
                            }
                        }
                    }
                    None => out.push(l.clone()),
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.chunks {
            if !seen.insert(c.id) {
                return Err(ModelError::Invalid(format!("duplicate chunk id {}", c.id)));
            }
            c.validate(self.chunk_length)?;
        }
        for w in self.chunks.windows(2) {
            let a = w[0].trajectory().unwrap().points.last().unwrap();
            let b = w[1].trajectory().unwrap().points.first().unwrap();
            let f = LocalFrame::new(*a);
            let gap = dist([0.0, 0.0], f.to_en(b));
            if gap > 0.5 {
                return Err(ModelError::Invalid(format!(
                    "chunks {} and {} are {gap:.2} m apart",
                    w[0].id, w[1].id
                )));
            }
        }
        Ok(())
    }

    /// Writes `road.json` plus one `chunk_<id>.json` per chunk.
    pub fn save_dir(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        for c in &self.chunks {
            let p = dir.join(format!("chunk_{}.json", c.id));
            fs::write(&p, serialize_chunk_json(c)).map_err(|e| ModelError::io(&p, e))?;
        }
        let idx = RoadIndex {
            chunk_length: self.chunk_length,
            chunks: self.chunks.iter().map(|c| c.id).collect(),
        };
        let p = dir.join("road.json");
        let text = serde_json::to_string_pretty(&idx).expect("index serializes");
        fs::write(&p, text + "\n").map_err(|e| ModelError::io(&p, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Self, ModelError> {
        let p = dir.join("road.json");
        let text = fs::read(&p).map_err(|e| ModelError::io(&p, e))?;
        let idx: RoadIndex = serde_json::from_slice(&text)
            .map_err(|e| ModelError::parse(p.display().to_string(), e.to_string()))?;
        let mut chunks = Vec::with_capacity(idx.chunks.len());
        for id in idx.chunks {
            let cp = dir.join(format!("chunk_{id}.json"));
            let bytes = fs::read(&cp).map_err(|e| ModelError::io(&cp, e))?;
            let c = parse_chunk_json(&bytes).map_err(|e| match e {
                ModelError::Parse { path, msg } => ModelError::Parse {
                    path: format!("{}:{path}", cp.display()),
                    msg,
                },
                other => other,
            })?;
            chunks.push(c);
        }
        Ok(RoadModel {
            chunks,
            chunk_length: idx.chunk_length,
        })
    }

    /// FeatureCollection of LineStrings with `kind`, `line_id` and `chunk`
    /// properties.
    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .chunks
            .iter()
            .flat_map(|c| {
                c.lines.iter().map(move |l| {
                    serde_json::json!({
                        "type": "Feature",
                        "properties": { "kind": l.kind.as_str(), "line_id": l.line_id.to_string(), "chunk": c.id },
                        "geometry": {
                            "type": "LineString",
                            "coordinates": l.points.iter().map(|p| [p.lon, p.lat]).collect::<Vec<_>>(),
                        }
                    })
                })
            })
            .collect();
        serde_json::json!({ "type": "FeatureCollection", "features": features })
    }
}

/// Road surface bounded by two boundary polylines running with the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSurface {
    pub left_boundary: Vec<GeoPoint>,
    pub right_boundary: Vec<GeoPoint>,
}

impl RoadSurface {
    /// Closed ring: left boundary forward, right boundary backward.
    pub fn polygon(&self) -> Vec<GeoPoint> {
        self.left_boundary
            .iter()
            .chain(self.right_boundary.iter().rev())
            .copied()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string_pretty(self).expect("surface serializes");
        fs::write(path, text + "\n").map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| ModelError::parse(path.display().to_string(), e.to_string()))
    }

    /// Corridor of constant half width around a centerline.
    pub fn corridor(center: &Centerline, half_width: f64, step: f64) -> Self {
        let len = center.length();
        let n = (len / step).ceil().max(1.0) as usize;
        let mut left = Vec::with_capacity(n + 1);
        let mut right = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let s = (i as f64 * step).min(len);
            left.push(center.geo_at(s, -half_width));
            right.push(center.geo_at(s, half_width));
        }
        Self {
            left_boundary: left,
            right_boundary: right,
        }
    }
}

/// Points of a polyline tagged with their original geodetic value when they
/// are original vertices rather than computed cut points.
struct Cut {
    en: [f64; 2],
    geo: Option<GeoPoint>,
}

/// Splits a polyline at the given interior arc-length borders. Returns one
/// `(chunk index, points)` entry per fragment with at least two distinct
/// points; cut points are shared exactly between neighbouring fragments.
fn split_at_borders(
    points: &[GeoPoint],
    center: &Centerline,
    borders: &[f64],
) -> Vec<(usize, Vec<GeoPoint>)> {
    let frame = center.frame();
    let en: Vec<[f64; 2]> = points.iter().map(|p| frame.to_en(p)).collect();
    let s: Vec<f64> = en.iter().map(|p| center.project_en(*p).s).collect();
    let chunk_of = |v: f64| borders.iter().take_while(|b| v >= **b).count();

    let mut out: Vec<(usize, Vec<Cut>)> = Vec::new();
    let mut current = chunk_of(s[0]);
    let mut frag = vec![Cut { en: en[0], geo: Some(points[0]) }];
    for i in 0..points.len() - 1 {
        let (s0, s1) = (s[i], s[i + 1]);
        let target = chunk_of(s1);
        while current != target {
            let (border, next) = if target > current {
                (borders[current], current + 1)
            } else {
                (borders[current - 1], current - 1)
            };
            // Borders that fall on a vertex reuse it instead of a computed copy.
            let (cut, cut_geo) = if (border - s1).abs() < 1e-7 {
                (en[i + 1], Some(points[i + 1]))
            } else if (border - s0).abs() < 1e-7 {
                (en[i], Some(points[i]))
            } else {
                let f = ((border - s0) / (s1 - s0)).clamp(0.0, 1.0);
                let c = [en[i][0] + f * (en[i + 1][0] - en[i][0]), en[i][1] + f * (en[i + 1][1] - en[i][1])];
                (c, Some(frame.from_en(c)))
            };
            frag.push(Cut { en: cut, geo: cut_geo });
            out.push((current, std::mem::take(&mut frag)));
            frag.push(Cut { en: cut, geo: cut_geo });
            current = next;
        }
        frag.push(Cut { en: en[i + 1], geo: Some(points[i + 1]) });
    }
    out.push((current, frag));

    out.into_iter()
        .filter_map(|(k, cuts)| {
            let mut pts: Vec<GeoPoint> = Vec::with_capacity(cuts.len());
            let mut last_en: Option<[f64; 2]> = None;
            for c in cuts {
                let g = c.geo.unwrap_or_else(|| frame.from_en(c.en));
                let same = pts.last().is_some_and(|q| q.lat == g.lat && q.lon == g.lon);
                if same || last_en.is_some_and(|l| dist(l, c.en) < 1e-9) {
                    continue;
                }
                last_en = Some(c.en);
                pts.push(g);
            }
            (pts.len() >= 2).then_some((k, pts))
        })
        .collect()
}

/// Interior chunk borders for a trajectory of `length` meters.
pub fn chunk_borders(length: f64, chunk_length: f64) -> Vec<f64> {
    let ratio = length / chunk_length;
    let mut n = ratio.ceil() as usize;
    if ratio - ratio.floor() < 1e-9 {
        n = ratio.floor() as usize;
    }
    (1..n.max(1)).map(|k| k as f64 * chunk_length).collect()
}

/// Splits the trajectory and every line into chunks of `chunk_length`
/// meters of trajectory arc length; the last chunk holds the remainder.
pub fn chunk_road(lines: &[BoundaryLine], trajectory: &BoundaryLine, chunk_length: f64) -> Result<RoadModel, ModelError> {
    if !(chunk_length > 0.0) {
        return Err(ModelError::Invalid("chunk length must be positive".into()));
    }
    let center = Centerline::new(&trajectory.points).ok_or(ModelError::DegenerateTrajectory)?;
    let length = center.length();
    if length + 1e-9 < chunk_length {
        return Err(ModelError::TrajectoryTooShort { length, chunk_length });
    }
    let borders = chunk_borders(length, chunk_length);
    let n = borders.len() + 1;
    let mut chunks: Vec<Chunk> = (0..n)
        .map(|k| Chunk {
            id: k as u64,
            map_version: 0,
            lines: Vec::new(),
        })
        .collect();
    for line in std::iter::once(trajectory).chain(lines.iter()) {
        for (k, pts) in split_at_borders(&line.points, &center, &borders) {
            chunks[k].lines.push(BoundaryLine {
                line_id: line.line_id,
                kind: line.kind,
                points: pts,
            });
        }
    }
    Ok(RoadModel { chunks, chunk_length })
}

/// Splits arbitrary lines along the chunk partition of `center`, returning
/// the fragments of each chunk index.
pub fn partition_lines(lines: &[BoundaryLine], center: &Centerline, chunk_length: f64) -> Vec<Vec<BoundaryLine>> {
    let borders = chunk_borders(center.length(), chunk_length);
    let mut out = vec![Vec::new(); borders.len() + 1];
    for line in lines {
        for (k, pts) in split_at_borders(&line.points, center, &borders) {
            out[k].push(BoundaryLine {
                line_id: line.line_id,
                kind: line.kind,
                points: pts,
            });
        }
    }
    out
}

/// Merges dashed fragments that continue one another (gap below `max_gap`
/// meters, heading change below 15°, lateral misfit below 0.5 m) into single
/// control-point chains. Other lines pass through unchanged.
pub fn merge_dashed_fragments(lines: Vec<BoundaryLine>, max_gap: f64) -> Vec<BoundaryLine> {
    let Some(anchor) = lines.iter().flat_map(|l| l.points.first()).next().copied() else {
        return lines;
    };
    let frame = LocalFrame::new(anchor);
    let (dashed, mut out): (Vec<_>, Vec<_>) = lines.into_iter().partition(|l| l.kind == LineKind::Dashed);
    let mut pending: Vec<Option<BoundaryLine>> = dashed.into_iter().map(Some).collect();
    let en = |p: &GeoPoint| frame.to_en(p);
    let heading = |l: &BoundaryLine, at_end: bool| {
        let (a, b) = if at_end {
            (en(&l.points[l.points.len() - 2]), en(&l.points[l.points.len() - 1]))
        } else {
            (en(&l.points[0]), en(&l.points[1]))
        };
        let d = dist(a, b);
        [(b[0] - a[0]) / d, (b[1] - a[1]) / d]
    };

    for i in 0..pending.len() {
        let Some(mut chain) = pending[i].take() else { continue };
        loop {
            let end = en(chain.points.last().unwrap());
            let dir = heading(&chain, true);
            let mut best: Option<(f64, usize)> = None;
            for (j, cand) in pending.iter().enumerate() {
                let Some(c) = cand else { continue };
                let start = en(&c.points[0]);
                let v = [start[0] - end[0], start[1] - end[1]];
                let along = v[0] * dir[0] + v[1] * dir[1];
                let lateral = (v[0] * dir[1] - v[1] * dir[0]).abs();
                let cdir = heading(c, false);
                let cos = dir[0] * cdir[0] + dir[1] * cdir[1];
                if along > 0.0 && along < max_gap && lateral < 0.5 && cos > 15f64.to_radians().cos() {
                    if best.is_none_or(|(b, _)| along < b) {
                        best = Some((along, j));
                    }
                }
            }
            match best {
                Some((_, j)) => {
                    let next = pending[j].take().unwrap();
                    chain.points.extend(next.points);
                }
                None => break,
            }
        }
        out.push(chain);
    }
    out
}

/// Projects every line of a chunk into global pixel coordinates.
pub fn project_chunk_to_pixels(c: &Chunk, level: u8) -> Result<Vec<Vec<TilePixel>>, ModelError> {
    c.lines
        .iter()
        .map(|l| {
            l.points
                .iter()
                .map(|p| geo::latlon_to_pixel(p, level).map_err(ModelError::from))
                .collect()
        })
        .collect()
}

/// Surface and lane-marking masks for the area covered by `tile`.
pub fn rasterize_masks(c: &Chunk, surface: &RoadSurface, tile: &Raster) -> (Mask, Mask) {
    rasterize_line_masks(c.boundary_lines(), surface, tile)
}

/// Like [`rasterize_masks`] for any set of lines. Lines outside the raster
/// simply produce empty masks.
pub fn rasterize_line_masks<'a>(
    lines: impl IntoIterator<Item = &'a BoundaryLine>,
    surface: &RoadSurface,
    tile: &Raster,
) -> (Mask, Mask) {
    let mut surface_mask = Mask::new(tile.width, tile.height);
    let mut marking_mask = Mask::new(tile.width, tile.height);
    let Some(g) = tile.georef else {
        return (surface_mask, marking_mask);
    };
    let to_local = |p: &GeoPoint| {
        let q = geo::project_point(p, g.level);
        g.to_local(q[0], q[1])
    };
    let poly: Vec<[f64; 2]> = surface.polygon().iter().map(to_local).collect();
    fill_polygon(&mut surface_mask, &poly);
    for l in lines {
        if l.kind == LineKind::Trajectory {
            continue;
        }
        let pts: Vec<[f64; 2]> = l.points.iter().map(to_local).collect();
        draw_polyline(&mut marking_mask, &pts);
    }
    (surface_mask, marking_mask)
}
