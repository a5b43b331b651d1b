//! Synthetic highway scenes: georeferenced gray tiles plus the exact road
//! model they were rendered from.
//!
//! The road is a circular arc (or straight line) in a local east/north frame
//! anchored at `origin`. Every rendered pixel is mapped back to arc length
//! and lateral offset analytically, so markings are antialiased against the
//! true geometry rather than a polyline approximation.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::centerline::Centerline;
use crate::geo::{self, GeoPoint, LocalFrame, TILE_SIZE};
use crate::raster::{fill_polygon_with, gaussian_blur, Georef, Raster};
use crate::roadmodel::{chunk_road, BoundaryLine, LineKind, ModelError, RoadModel, RoadSurface, DEFAULT_CHUNK_LENGTH};
use crate::tiles;

pub const ASPHALT: f32 = 90.0;
pub const MARKING: f32 = 220.0;
pub const BACKGROUND: f32 = 60.0;
const GUARDRAIL: f32 = 235.0;
const CURB: f32 = 165.0;
const GUARDRAIL_OFFSET: f64 = 1.2;
const GUARDRAIL_WIDTH: f64 = 0.3;
const CURB_WIDTH: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distractor {
    Guardrail,
    Curb,
}

/// Span of arc length over which some boundary lines are not painted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start_m: f64,
    pub end_m: f64,
    /// Boundary line indices counted from the left; empty means all lines.
    #[serde(default)]
    pub lines: Vec<usize>,
}

impl Occlusion {
    fn covers(&self, line: usize, s: f64) -> bool {
        s >= self.start_m && s < self.end_m && (self.lines.is_empty() || self.lines.contains(&line))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub origin: GeoPoint,
    /// Initial travel direction, degrees clockwise from north.
    pub heading_deg: f64,
    pub length: f64,
    pub lane_count: usize,
    pub lane_width: f64,
    /// Signed curvature in 1/m; positive bends to the right.
    pub curvature: f64,
    pub dash_length: f64,
    pub dash_gap: f64,
    pub marking_width: f64,
    pub shoulder_width: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub occlusions: Vec<Occlusion>,
    pub distractors: Vec<Distractor>,
    pub seed: u64,
    pub level: u8,
    pub chunk_length: f64,
    pub map_version: i64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            origin: GeoPoint::new(48.2203, 11.5126),
            heading_deg: 20.0,
            length: 300.0,
            lane_count: 3,
            lane_width: 3.5,
            curvature: 0.0,
            dash_length: 6.0,
            dash_gap: 12.0,
            marking_width: 0.25,
            shoulder_width: 0.5,
            blur_sigma: 1.0,
            noise_sigma: 5.0,
            occlusions: Vec::new(),
            distractors: Vec::new(),
            seed: 1,
            level: 20,
            chunk_length: DEFAULT_CHUNK_LENGTH,
            map_version: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        self.origin.validate()?;
        geo::check_level(self.level)?;
        if self.lane_count == 0 {
            return bad("lane_count must be at least 1");
        }
        if !(self.marking_width > 0.0 && self.lane_width > self.marking_width) {
            return bad("need lane_width > marking_width > 0");
        }
        if !(self.dash_length > 0.0 && self.dash_gap > 0.0) {
            return bad("dash_length and dash_gap must be positive");
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return bad("length must be positive");
        }
        if !(self.chunk_length > 0.0) || self.length < self.chunk_length {
            return bad("length must cover at least one chunk");
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 || self.shoulder_width < 0.0 {
            return bad("blur, noise and shoulder must be non-negative");
        }
        if !self.curvature.is_finite() || self.curvature.abs() * self.length > std::f64::consts::PI {
            return bad("the road may turn by at most 180 degrees");
        }
        let half = self.half_surface() + GUARDRAIL_OFFSET + GUARDRAIL_WIDTH;
        if self.curvature != 0.0 && half >= 1.0 / self.curvature.abs() {
            return bad("curvature radius smaller than the road half width");
        }
        for o in &self.occlusions {
            if !(0.0 <= o.start_m && o.start_m <= o.end_m && o.end_m <= self.length) {
                return bad("occlusion range outside [0, length]");
            }
            if o.lines.iter().any(|&k| k > self.lane_count) {
                return bad("occlusion refers to a missing line");
            }
        }
        Ok(())
    }

    pub fn half_surface(&self) -> f64 {
        self.lane_count as f64 * self.lane_width / 2.0 + self.shoulder_width
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }
}

/// Independent stream seed for a named purpose under one root seed.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix64 to decorrelate nearby roots.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn random_uuid(rng: &mut ChaCha8Rng) -> Uuid {
    let mut bytes = [0u8; 16];
    rng.fill(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}

/// Analytic road geometry shared by rendering, truth and tests.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub frame: LocalFrame,
    heading: f64,
    curvature: f64,
    pub length: f64,
    /// Lateral offsets of the boundary lines, left to right.
    pub line_offsets: Vec<f64>,
    pub line_kinds: Vec<LineKind>,
    dash_phase: Vec<f64>,
    spec: SceneSpec,
}

impl SceneGeometry {
    pub fn new(spec: &SceneSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let n = spec.lane_count;
        let line_offsets: Vec<f64> = (0..=n)
            .map(|k| -(n as f64) * spec.lane_width / 2.0 + k as f64 * spec.lane_width)
            .collect();
        let line_kinds = (0..=n)
            .map(|k| if k == 0 || k == n { LineKind::Solid } else { LineKind::Dashed })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "dash-phase"));
        let period = spec.dash_length + spec.dash_gap;
        let dash_phase = (0..=n).map(|_| rng.random_range(0.0..period)).collect();
        let g = Self {
            frame: LocalFrame::new(spec.origin),
            heading: spec.heading_deg.to_radians(),
            curvature: spec.curvature,
            length: spec.length,
            line_offsets,
            line_kinds,
            dash_phase,
            spec: spec.clone(),
        };
        // Every point of the road must stay inside the projection.
        let hs = spec.half_surface();
        for s in [0.0, spec.length / 2.0, spec.length] {
            for t in [-hs, hs] {
                let p = g.frame.from_en(g.en_at(s, t));
                p.validate()?;
                if p.lat.abs() > geo::MERCATOR_MAX_LAT {
                    return Err(geo::GeoError::LatitudeOutOfRange(p.lat).into());
                }
            }
        }
        Ok(g)
    }

    fn right(h: f64) -> [f64; 2] {
        [h.cos(), -h.sin()]
    }

    /// East/north position of station `(s, t)`.
    pub fn en_at(&self, s: f64, t: f64) -> [f64; 2] {
        let k = self.curvature;
        if k == 0.0 {
            let d = [self.heading.sin(), self.heading.cos()];
            let r = Self::right(self.heading);
            return [s * d[0] + t * r[0], s * d[1] + t * r[1]];
        }
        let r0 = Self::right(self.heading);
        let c = [r0[0] / k, r0[1] / k];
        let h = self.heading + k * s;
        let r = Self::right(h);
        [c[0] + r[0] * (t - 1.0 / k), c[1] + r[1] * (t - 1.0 / k)]
    }

    /// Inverse of [`en_at`](Self::en_at) for points near the road.
    pub fn station(&self, p: [f64; 2]) -> (f64, f64) {
        let k = self.curvature;
        if k == 0.0 {
            let d = [self.heading.sin(), self.heading.cos()];
            let r = Self::right(self.heading);
            return (p[0] * d[0] + p[1] * d[1], p[0] * r[0] + p[1] * r[1]);
        }
        let r0 = Self::right(self.heading);
        let c = [r0[0] / k, r0[1] / k];
        let v = [p[0] - c[0], p[1] - c[1]];
        let m = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let sg = k.signum();
        let r = [-v[0] * sg / m, -v[1] * sg / m];
        let h = (-r[1]).atan2(r[0]);
        let mut dh = h - self.heading;
        dh = (dh + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        (dh / k, 1.0 / k - sg * m)
    }

    pub fn geo_at(&self, s: f64, t: f64) -> GeoPoint {
        self.frame.from_en(self.en_at(s, t))
    }

    fn dash_on(&self, line: usize, s: f64) -> bool {
        if self.line_kinds[line] != LineKind::Dashed {
            return true;
        }
        let period = self.spec.dash_length + self.spec.dash_gap;
        (s - self.dash_phase[line]).rem_euclid(period) < self.spec.dash_length
    }

    /// Whether the marking of `line` is painted and visible at arc length `s`.
    pub fn painted(&self, line: usize, s: f64) -> bool {
        self.dash_on(line, s) && !self.spec.occlusions.iter().any(|o| o.covers(line, s))
    }

    /// Index of the boundary line whose painted marking covers `(s, t)`.
    pub fn marking_at(&self, s: f64, t: f64) -> Option<usize> {
        let hw = self.spec.marking_width / 2.0;
        self.line_offsets
            .iter()
            .position(|o| (t - o).abs() <= hw)
            .filter(|&k| self.painted(k, s))
    }

    /// Painted length of `line` within `[s0, s1]`, integrated at 1 cm.
    pub fn painted_length(&self, line: usize, s0: f64, s1: f64) -> f64 {
        let step = 0.01;
        let n = ((s1 - s0) / step).round() as usize;
        (0..n).filter(|i| self.painted(line, s0 + (*i as f64 + 0.5) * step)).count() as f64 * step
    }

    /// Arc-length intervals over which `line` is painted, resolved to 1 cm.
    pub fn painted_spans(&self, line: usize) -> Vec<(f64, f64)> {
        let step = 0.01;
        let n = (self.length / step).round() as usize;
        let mut out = Vec::new();
        let mut start = None;
        for i in 0..n {
            let s = (i as f64 + 0.5) * step;
            match (self.painted(line, s), start) {
                (true, None) => start = Some(i as f64 * step),
                (false, Some(s0)) => {
                    out.push((s0, i as f64 * step));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s0) = start {
            out.push((s0, self.length));
        }
        out
    }

    /// Painted marking pieces as polylines along each line's offset.
    pub fn painted_markings(&self) -> Vec<(LineKind, Vec<GeoPoint>)> {
        let mut out = Vec::new();
        for (k, (&t, &kind)) in self.line_offsets.iter().zip(&self.line_kinds).enumerate() {
            for (s0, s1) in self.painted_spans(k) {
                out.push((kind, self.centerline_points(t, s0, s1)));
            }
        }
        out
    }

    fn shade(&self, s: f64, t: f64) -> f32 {
        let hs = self.spec.half_surface();
        let at = t.abs();
        if at > hs {
            let has = |d: Distractor| self.spec.distractors.contains(&d);
            if has(Distractor::Curb) && at <= hs + CURB_WIDTH {
                return CURB;
            }
            let g = hs + GUARDRAIL_OFFSET;
            if has(Distractor::Guardrail) && at >= g && at <= g + GUARDRAIL_WIDTH {
                return GUARDRAIL;
            }
            return BACKGROUND;
        }
        if self.marking_at(s, t).is_some() {
            MARKING
        } else {
            ASPHALT
        }
    }

    /// Lateral positions where the shading changes.
    fn edges(&self) -> Vec<f64> {
        let hw = self.spec.marking_width / 2.0;
        let hs = self.spec.half_surface();
        let mut e: Vec<f64> = self.line_offsets.iter().flat_map(|o| [o - hw, o + hw]).collect();
        for side in [-1.0, 1.0] {
            e.push(side * hs);
            e.push(side * (hs + CURB_WIDTH));
            e.push(side * (hs + GUARDRAIL_OFFSET));
            e.push(side * (hs + GUARDRAIL_OFFSET + GUARDRAIL_WIDTH));
        }
        e
    }

    fn centerline_points(&self, t: f64, s0: f64, s1: f64) -> Vec<GeoPoint> {
        let n = ((s1 - s0) / 1.0).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| self.geo_at((s0 + i as f64).min(s1), t))
            .collect()
    }

    pub fn centerline(&self) -> Centerline {
        Centerline::new(&self.centerline_points(0.0, 0.0, self.length)).expect("road has positive length")
    }

    pub fn surface(&self) -> RoadSurface {
        let hs = self.spec.half_surface();
        RoadSurface {
            left_boundary: self.centerline_points(-hs, 0.0, self.length),
            right_boundary: self.centerline_points(hs, 0.0, self.length),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub geometry: SceneGeometry,
    /// Gray, tile-aligned rasters keyed by quadkey, sorted by quadkey.
    pub tiles: Vec<(String, Raster)>,
    pub truth: RoadModel,
    pub surface: RoadSurface,
}

impl Scene {
    pub fn write_tiles(&self, root: &std::path::Path) -> Result<(), tiles::TileError> {
        for (qk, r) in &self.tiles {
            tiles::write_png_atomic(&tiles::tile_path(root, self.spec.map_version, qk), r)?;
        }
        Ok(())
    }
}

/// Renders the scene and builds its ground truth. Same spec, same bytes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    let geometry = SceneGeometry::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, "line-ids"));
    let traj = BoundaryLine::new(
        random_uuid(&mut rng),
        LineKind::Trajectory,
        geometry.centerline_points(0.0, 0.0, spec.length),
    );
    let lines: Vec<BoundaryLine> = geometry
        .line_offsets
        .iter()
        .zip(&geometry.line_kinds)
        .map(|(&t, &kind)| BoundaryLine::new(random_uuid(&mut rng), kind, geometry.centerline_points(t, 0.0, spec.length)))
        .collect();
    let mut truth = chunk_road(&lines, &traj, spec.chunk_length)?;
    truth.set_map_version(spec.map_version);
    let surface = geometry.surface();

    let reach = spec.half_surface() + GUARDRAIL_OFFSET + GUARDRAIL_WIDTH + 3.0;
    let tile_ids = tiles::tiles_for_corridor(&geometry.centerline(), reach, spec.level)?;
    let mut tiles: Vec<(String, Raster)> = tile_ids
        .par_iter()
        .map(|&(tx, ty)| {
            let qk = geo::tile_quadkey(tx, ty, spec.level)?;
            let r = render_tile(&geometry, tx, ty, &qk);
            Ok((qk, r))
        })
        .collect::<Result<_, geo::GeoError>>()?;
    tiles.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Scene {
        spec: spec.clone(),
        geometry,
        tiles,
        truth,
        surface,
    })
}

const GRID: usize = 16;

/// East/north coordinates of a padded tile, interpolated from a coarse grid
/// of exact conversions. The mapping is nearly affine over one tile, so the
/// interpolation error is far below a millimeter.
struct PixelMap {
    nodes: Vec<[f64; 2]>,
    cols: usize,
}

impl PixelMap {
    fn new(g: &SceneGeometry, x0: i64, y0: i64, side: usize, level: u8) -> Self {
        let cols = side.div_ceil(GRID) + 1;
        let mut nodes = Vec::with_capacity(cols * cols);
        for j in 0..cols {
            for i in 0..cols {
                let p = geo::unproject_point((x0 + (i * GRID) as i64) as f64, (y0 + (j * GRID) as i64) as f64, level);
                nodes.push(g.frame.to_en(&p));
            }
        }
        Self { nodes, cols }
    }

    /// Position at local pixel coordinates `(x, y)` and its Jacobian columns.
    fn at(&self, x: f64, y: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let fx = x / GRID as f64;
        let fy = y / GRID as f64;
        let i = (fx.floor() as usize).min(self.cols - 2);
        let j = (fy.floor() as usize).min(self.cols - 2);
        let (u, v) = (fx - i as f64, fy - j as f64);
        let n = |a: usize, b: usize| self.nodes[b * self.cols + a];
        let (p00, p10, p01, p11) = (n(i, j), n(i + 1, j), n(i, j + 1), n(i + 1, j + 1));
        let mut p = [0.0; 2];
        let mut dx = [0.0; 2];
        let mut dy = [0.0; 2];
        for k in 0..2 {
            p[k] = p00[k] * (1.0 - u) * (1.0 - v) + p10[k] * u * (1.0 - v) + p01[k] * (1.0 - u) * v + p11[k] * u * v;
            dx[k] = ((p10[k] - p00[k]) * (1.0 - v) + (p11[k] - p01[k]) * v) / GRID as f64;
            dy[k] = ((p01[k] - p00[k]) * (1.0 - u) + (p11[k] - p10[k]) * u) / GRID as f64;
        }
        (p, dx, dy)
    }
}

fn tile_rng(seed: u64, purpose: &str, quadkey: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(sub_seed(seed, purpose), quadkey))
}

fn render_tile(g: &SceneGeometry, tx: u32, ty: u32, quadkey: &str) -> Raster {
    let spec = &g.spec;
    let pad = (3.0 * spec.blur_sigma).ceil() as usize + 1;
    let side = TILE_SIZE as usize + 2 * pad;
    let x0 = tx as i64 * TILE_SIZE as i64 - pad as i64;
    let y0 = ty as i64 * TILE_SIZE as i64 - pad as i64;
    let map = PixelMap::new(g, x0, y0, side, spec.level);
    let edges = g.edges();
    let period = spec.dash_length + spec.dash_gap;
    let mut boundaries_s: Vec<f64> = Vec::new();
    for o in &spec.occlusions {
        boundaries_s.push(o.start_m);
        boundaries_s.push(o.end_m);
    }

    const SUB: usize = 4;
    let mut img = vec![0f32; side * side];
    for j in 0..side {
        for i in 0..side {
            let (p, dx, dy) = map.at(i as f64 + 0.5, j as f64 + 0.5);
            let (s, t) = g.station(p);
            let px_m = (dx[0].hypot(dx[1])).max(dy[0].hypot(dy[1]));
            let near_edge = edges.iter().any(|e| (t - e).abs() < px_m);
            let near_dash_end = g.line_offsets.iter().enumerate().any(|(k, o)| {
                if (t - o).abs() >= spec.marking_width / 2.0 + px_m {
                    return false;
                }
                let ph = (s - g.dash_phase[k]).rem_euclid(period);
                let dash_edge = g.line_kinds[k] == LineKind::Dashed
                    && (ph.min(period - ph) < px_m || (ph - spec.dash_length).abs() < px_m);
                dash_edge || boundaries_s.iter().any(|b| (s - b).abs() < px_m)
            });
            img[j * side + i] = if near_edge || near_dash_end {
                let mut acc = 0.0;
                for a in 0..SUB {
                    for b in 0..SUB {
                        let ox = (a as f64 + 0.5) / SUB as f64 - 0.5;
                        let oy = (b as f64 + 0.5) / SUB as f64 - 0.5;
                        let q = [p[0] + ox * dx[0] + oy * dy[0], p[1] + ox * dx[1] + oy * dy[1]];
                        let (s, t) = g.station(q);
                        acc += g.shade(s, t);
                    }
                }
                acc / (SUB * SUB) as f32
            } else {
                g.shade(s, t)
            };
        }
    }
    gaussian_blur(&mut img, side, side, spec.blur_sigma);

    let mut rng = tile_rng(spec.seed, "noise", quadkey);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let n = TILE_SIZE as usize;
    let mut pixels = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let v = img[(j + pad) * side + i + pad] as f64;
            let v = if spec.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Raster::from_gray(TILE_SIZE, TILE_SIZE, pixels).with_georef(Georef::for_tile(tx, ty, spec.level))
}

/// Paints vehicle- and shadow-like blobs over the truth boundary lines so that
/// `fraction` of every line's length is covered. Deterministic per seed.
pub fn corrupt(
    tiles: &[(String, Raster)],
    truth: &RoadModel,
    fraction: f64,
    seed: u64,
) -> Result<Vec<(String, Raster)>, SynthError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(SynthError::InvalidSpec(format!("occlusion fraction {fraction} not in [0, 1)")));
    }
    if fraction == 0.0 {
        return Ok(tiles.to_vec());
    }
    let center = truth.centerline()?;
    let frame = center.frame().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "occlusion"));

    // Blobs as polygons in east/north coordinates with an intensity.
    let mut blobs: Vec<(Vec<[f64; 2]>, f32)> = Vec::new();
    for line in truth.assembled_lines() {
        let Some(lc) = Centerline::with_frame(frame.clone(), &line.points) else { continue };
        let len = lc.length();
        let target = fraction * len;
        let mean_blob = 4.5;
        let count = (target / mean_blob).round().max(1.0) as usize;
        let blob_len = target / count as f64;
        // Random gaps: split the free length into count + 1 parts.
        let free = len - target;
        let mut cuts: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..free)).collect();
        cuts.sort_by(|a, b| a.total_cmp(b));
        for (i, c) in cuts.iter().enumerate() {
            let s0 = c + i as f64 * blob_len;
            let s1 = s0 + blob_len;
            let width = rng.random_range(1.8..2.4);
            let shift = rng.random_range(-0.3..0.3);
            let value = if rng.random_bool(0.5) { 45.0 } else { rng.random_range(30.0..150.0) };
            let steps = (blob_len / 0.5).ceil().max(1.0) as usize;
            let side = |t: f64| -> Vec<[f64; 2]> {
                (0..=steps)
                    .map(|k| lc.point_at(s0 + (s1 - s0) * k as f64 / steps as f64, shift + t))
                    .collect()
            };
            let mut poly = side(-width / 2.0);
            poly.extend(side(width / 2.0).into_iter().rev());
            blobs.push((poly, value as f32));
        }
    }

    let out = tiles
        .par_iter()
        .map(|(qk, r)| {
            let mut r = r.clone();
            let Some(g) = r.georef else { return (qk.clone(), r) };
            let mut trng = tile_rng(seed, "occlusion-noise", qk);
            let jitter = Normal::new(0.0, 3.0).unwrap();
            for (poly, value) in &blobs {
                let local: Vec<[f64; 2]> = poly
                    .iter()
                    .map(|p| {
                        let q = geo::project_point(&frame.from_en(*p), g.level);
                        g.to_local(q[0], q[1])
                    })
                    .collect();
                let (w, h) = (r.width, r.height);
                let mut hits = Vec::new();
                fill_polygon_with(w, h, &local, |x, y| hits.push((x, y)));
                for (x, y) in hits {
                    let v = *value as f64 + jitter.sample(&mut trng);
                    r.set(x, y, v.round().clamp(0.0, 255.0) as u8);
                }
            }
            (qk.clone(), r)
        })
        .collect();
    Ok(out)
}

/// Gray tiles keyed by tile index, for callers that address by `(tx, ty)`.
pub fn index_tiles(tiles: &[(String, Raster)]) -> HashMap<(u32, u32), &Raster> {
    tiles
        .iter()
        .filter_map(|(_, r)| r.georef.and_then(|g| g.tile()).map(|t| (t, r)))
        .collect()
}
