//! End-to-end stages: patch classifier training from labeled tiles and lane
//! model extraction along a route.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centerline::Centerline;
use crate::classify::{
    balance, check_patch_size, cross_validate, extract_patches, features_of, predict_map, train_forest,
    ClassifyError, CvResult, FeatureKind, ForestConfig, ForestModel, PatchSample, ProbabilityMap,
};
use crate::eval::DEFAULT_T_D;
use crate::geo::{self, GeoPoint, TilePixel};
use crate::link::{
    chunk_ranges, classify_groups, group_candidates, interpolate_missing, locate_segment, to_road_model, GroupMember,
    LineGroup, TightnessConfig,
};
use crate::raster::{IntensitySource, Mask, Raster};
use crate::roadmodel::{rasterize_line_masks, BoundaryLine, LineKind, ModelError, RoadModel, RoadSurface};
use crate::segment::{extract_regions, find_peaks, fit_segments, slice_region, split_tracks, LineSegmentCandidate, SegmentConfig};
use crate::synth::{sub_seed, Scene};
use crate::tiles::{self, TileError, TileMosaic, TileSource};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("inconsistent data: {0}")]
    Data(String),
    #[error(transparent)]
    Tile(#[from] TileError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    /// URL template with `{quadkey}`; when unset tiles are read from `root`.
    pub url: Option<String>,
    pub root: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub map_version: i64,
    pub level: u8,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            url: None,
            root: None,
            cache_dir: None,
            map_version: 1,
            level: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub size: usize,
    pub stride: u32,
    pub feature: FeatureKind,
    /// Negatives kept per positive when balancing training patches.
    pub negative_ratio: f64,
    pub max_samples: usize,
    pub cv_folds: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 12,
            stride: 4,
            feature: FeatureKind::Pixel,
            negative_ratio: 2.0,
            max_samples: 12_000,
            cv_folds: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for ForestSection {
    fn default() -> Self {
        let f = ForestConfig::default();
        Self {
            n_trees: f.n_trees,
            max_depth: f.max_depth,
            min_leaf: f.min_leaf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Half width in meters of the searched band when no surface is given.
    pub corridor_half_width: f64,
    pub linking: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            corridor_half_width: 7.0,
            linking: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub t_d: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { t_d: DEFAULT_T_D }
    }
}

/// Every tunable of the pipeline, loadable from TOML with one table per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub tiles: TileConfig,
    pub patch: PatchConfig,
    pub forest: ForestSection,
    pub segment: SegmentConfig,
    pub link: TightnessConfig,
    pub extract: ExtractConfig,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        check_patch_size(self.patch.size)?;
        geo::check_level(self.tiles.level)?;
        if self.patch.stride == 0 {
            return bad("patch.stride must be positive".into());
        }
        if self.forest.n_trees == 0 || self.forest.max_depth == 0 || self.forest.min_leaf == 0 {
            return bad("forest parameters must be positive".into());
        }
        if !(self.patch.negative_ratio > 0.0) || self.patch.max_samples < 2 {
            return bad("patch.negative_ratio and patch.max_samples must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.segment.threshold) {
            return bad("segment.threshold must be in [0, 1]".into());
        }
        if !(self.segment.max_gap > 0.0 && self.segment.max_residual > 0.0) {
            return bad("segment.max_gap and segment.max_residual must be positive".into());
        }
        self.link.validate().map_err(PipelineError::Config)?;
        if !(self.eval.t_d > 0.0) {
            return bad("eval.t_d must be positive".into());
        }
        if !(self.extract.corridor_half_width > 0.0) {
            return bad("extract.corridor_half_width must be positive".into());
        }
        Ok(())
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.forest.n_trees,
            max_depth: self.forest.max_depth,
            min_leaf: self.forest.min_leaf,
            seed: sub_seed(self.seed, "forest"),
        }
    }

    pub fn tile_source(&self) -> Result<TileSource, PipelineError> {
        let src = match (&self.tiles.url, &self.tiles.root) {
            (Some(url), _) => TileSource::http(url.clone(), None, self.tiles.map_version),
            (None, Some(root)) => TileSource::directory(root.clone(), self.tiles.map_version),
            (None, None) => return Err(PipelineError::Config("tiles.url or tiles.root must be set".into())),
        };
        Ok(match &self.tiles.cache_dir {
            Some(d) => src.with_cache(d.clone()),
            None => src,
        })
    }
}

/// Labeled imagery: gray tiles, the drivable surface and the painted marking
/// polylines.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub tiles: Vec<Raster>,
    pub surface: RoadSurface,
    pub markings: Vec<Vec<GeoPoint>>,
}

impl TrainingData {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            tiles: scene.tiles.iter().map(|(_, r)| r.clone()).collect(),
            surface: scene.surface.clone(),
            markings: scene.geometry.painted_markings().into_iter().map(|(_, p)| p).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MarkingFile {
    markings: Vec<MarkingEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MarkingEntry {
    #[serde(rename = "type")]
    kind: String,
    points: Vec<[f64; 2]>,
}

pub const TILES_DIR: &str = "tiles";
pub const TRUTH_DIR: &str = "truth";
pub const SURFACE_FILE: &str = "surface.json";
pub const MARKINGS_FILE: &str = "markings.json";
pub const SCENE_FILE: &str = "scene.toml";

/// Writes a scene as a data directory: `tiles/<map version>/<quadkey>.png`,
/// `truth/` road model, `surface.json`, `markings.json` and `scene.toml`.
pub fn write_scene_dir(scene: &Scene, dir: &Path) -> Result<(), PipelineError> {
    let io = |path: &Path, e: std::io::Error| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    scene.write_tiles(&dir.join(TILES_DIR))?;
    scene.truth.save_dir(&dir.join(TRUTH_DIR))?;
    scene.surface.save(&dir.join(SURFACE_FILE))?;
    let markings = MarkingFile {
        markings: scene
            .geometry
            .painted_markings()
            .into_iter()
            .map(|(kind, pts)| MarkingEntry {
                kind: kind.as_str().to_string(),
                points: pts.iter().map(|p| [p.lat, p.lon]).collect(),
            })
            .collect(),
    };
    let path = dir.join(MARKINGS_FILE);
    std::fs::write(&path, serde_json::to_string(&markings).expect("markings serialize")).map_err(|e| io(&path, e))?;
    let path = dir.join(SCENE_FILE);
    std::fs::write(&path, scene.spec.to_toml()).map_err(|e| io(&path, e))?;
    Ok(())
}

/// Loads a data directory written by [`write_scene_dir`]. Without a markings
/// file the truth boundary lines serve as labels.
pub fn load_training_dir(dir: &Path, map_version: Option<i64>) -> Result<TrainingData, PipelineError> {
    let truth_dir = dir.join(TRUTH_DIR);
    if !truth_dir.is_dir() {
        return Err(PipelineError::Input(format!("missing truth directory {}", truth_dir.display())));
    }
    let truth = RoadModel::load_dir(&truth_dir)?;
    let surface_path = dir.join(SURFACE_FILE);
    let surface = if surface_path.exists() {
        RoadSurface::load(&surface_path)?
    } else {
        RoadSurface::corridor(&truth.centerline()?, ExtractConfig::default().corridor_half_width, 1.0)
    };
    let mv = map_version.unwrap_or_else(|| truth.chunks.first().map_or(1, |c| c.map_version));
    let tile_dir = dir.join(TILES_DIR).join(mv.to_string());
    let mut names: Vec<PathBuf> = std::fs::read_dir(&tile_dir)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", tile_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    let src = TileSource::directory(dir.join(TILES_DIR), mv);
    let tiles = names
        .par_iter()
        .map(|p| {
            let qk = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            src.fetch_tile(qk).map(|r| tiles::to_grayscale(&r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let markings_path = dir.join(MARKINGS_FILE);
    let markings = if markings_path.exists() {
        let text = std::fs::read_to_string(&markings_path).map_err(|e| ModelError::Io {
            path: markings_path.clone(),
            source: e,
        })?;
        let f: MarkingFile = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Input(format!("{}: {e}", markings_path.display())))?;
        f.markings
            .into_iter()
            .map(|m| m.points.into_iter().map(|[lat, lon]| GeoPoint::new(lat, lon)).collect())
            .collect()
    } else {
        truth
            .assembled_lines()
            .into_iter()
            .filter(|l| l.kind != LineKind::Trajectory)
            .map(|l| l.points)
            .collect()
    };
    Ok(TrainingData { tiles, surface, markings })
}

/// Labeled patches of every tile: positive when a marking passes through.
pub fn collect_patches(data: &TrainingData, size: usize, stride: usize) -> Result<Vec<PatchSample>, PipelineError> {
    let lines: Vec<BoundaryLine> = data
        .markings
        .iter()
        .map(|p| BoundaryLine::new(uuid::Uuid::nil(), LineKind::Solid, p.clone()))
        .collect();
    let per_tile = data
        .tiles
        .par_iter()
        .map(|t| {
            let (surface, marking) = rasterize_line_masks(&lines, &data.surface, t);
            extract_patches(t, &surface, &marking, size, stride)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_tile.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: ForestModel,
    pub cv: Option<CvResult>,
    pub positives: usize,
    pub negatives: usize,
}

/// Balanced training set: features and labels.
pub fn training_set(data: &[TrainingData], cfg: &PipelineConfig) -> Result<(Vec<Vec<f32>>, Vec<bool>), PipelineError> {
    let mut samples = Vec::new();
    for d in data {
        samples.extend(collect_patches(d, cfg.patch.size, cfg.patch.stride as usize)?);
    }
    let samples = balance(samples, cfg.patch.negative_ratio, cfg.patch.max_samples, sub_seed(cfg.seed, "patches"));
    let y: Vec<bool> = samples.iter().map(|s| s.label == Some(true)).collect();
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(PipelineError::Data(format!(
            "training patches hold a single class ({pos} positive of {})",
            y.len()
        )));
    }
    Ok((features_of(&samples, cfg.patch.feature), y))
}

/// Trains the patch classifier; with `cross_validation` also reports
/// k-fold precision and recall.
pub fn train(data: &[TrainingData], cfg: &PipelineConfig, cross_validation: bool) -> Result<TrainingOutcome, PipelineError> {
    cfg.validate()?;
    let (x, y) = training_set(data, cfg)?;
    let fc = cfg.forest_config();
    let cv = if cross_validation {
        Some(cross_validate(&x, &y, &fc, cfg.patch.feature, cfg.patch.size, cfg.patch.cv_folds)?)
    } else {
        None
    };
    let model = train_forest(&x, &y, &fc, cfg.patch.feature, cfg.patch.size)?;
    let positives = y.iter().filter(|v| **v).count();
    Ok(TrainingOutcome {
        model,
        cv,
        positives,
        negatives: y.len() - positives,
    })
}

/// Gray tiles covering the corridor of `route`, fetched from the configured
/// source.
pub fn fetch_route_tiles(src: &TileSource, center: &Centerline, half_width: f64, level: u8) -> Result<TileMosaic, PipelineError> {
    let ids = tiles::tiles_for_corridor(center, half_width + 2.0, level)?;
    let fetched = tiles::fetch_all(src, &ids, level)?;
    Ok(TileMosaic::from_tiles(level, fetched.into_iter().map(|(_, r)| r)))
}

/// Classifier output on every loaded tile, stitched into one grid.
pub fn probability_map(mosaic: &TileMosaic, surface: &RoadSurface, model: &ForestModel, stride: u32) -> ProbabilityMap {
    let pad = (model.patch_size as u32).div_ceil(2) + stride;
    let maps: Vec<ProbabilityMap> = mosaic
        .tile_ids()
        .par_iter()
        .filter_map(|&(tx, ty)| {
            let r = mosaic.padded_tile(tx, ty, pad)?;
            let (mask, _) = rasterize_line_masks(std::iter::empty::<&BoundaryLine>(), surface, &r);
            if mask.is_empty() {
                return None;
            }
            Some(predict_map(&r, &mask, model, stride, Some((pad, pad, geo::TILE_SIZE, geo::TILE_SIZE))))
        })
        .collect();
    ProbabilityMap::stitch(&maps).unwrap_or_else(|| ProbabilityMap::empty(mosaic.level(), stride, model.patch_size as u32))
}

/// Pixel direction `[dx, dy]` of travel at arc length `s` (image y points
/// south).
fn pixel_direction(center: &Centerline, s: f64) -> [f64; 2] {
    let d = center.direction_at(s);
    [d[0], -d[1]]
}

/// Line segment candidates from the probability map: regions are cut at
/// chunk borders so each piece is sliced along its local travel direction.
pub fn segment_candidates(
    pm: &ProbabilityMap,
    mosaic: &TileMosaic,
    center: &Centerline,
    ranges: &[(f64, f64)],
    cfg: &SegmentConfig,
) -> Vec<LineSegmentCandidate> {
    let regions = extract_regions(pm, cfg.threshold, cfg.min_region_cells);
    let frame = center.frame();
    let pieces: Vec<_> = regions
        .iter()
        .flat_map(|r| {
            let chunks: Vec<usize> = r
                .centers
                .iter()
                .map(|c| {
                    let s = center.project_en(frame.to_en(&geo::unproject_point(c[0], c[1], pm.level))).s;
                    ranges.iter().position(|x| s < x.1).unwrap_or(ranges.len() - 1)
                })
                .collect();
            let mut by_chunk: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, k) in chunks.iter().enumerate() {
                by_chunk.entry(*k).or_default().push(i);
            }
            by_chunk
                .into_iter()
                .map(|(k, idx)| {
                    let keep: std::collections::HashSet<usize> = idx.into_iter().collect();
                    (k, r.subset(|i| keep.contains(&i)))
                })
                .collect::<Vec<_>>()
        })
        .collect();
    pieces
        .par_iter()
        .flat_map_iter(|(k, piece)| {
            let (s0, s1) = ranges[*k];
            let dir = pixel_direction(center, (s0 + s1) / 2.0);
            let slices = slice_region(piece, dir, mosaic, cfg.slice_margin);
            let peaks = find_peaks(&slices, pm.level, cfg);
            split_tracks(&peaks, 2.0, cfg.max_gap)
                .into_iter()
                .flat_map(|t| fit_segments(&t, cfg.max_gap, cfg.max_residual))
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub model: RoadModel,
    pub groups: Vec<LineGroup>,
    pub members: Vec<GroupMember>,
    pub segments: Vec<LineSegmentCandidate>,
    pub probability: ProbabilityMap,
}

/// Classify, segment and link along `trajectory`. `surface` restricts the
/// classifier; by default a corridor around the trajectory is used.
pub fn extract(
    model: &ForestModel,
    mosaic: &TileMosaic,
    trajectory: &BoundaryLine,
    surface: Option<&RoadSurface>,
    chunk_length: f64,
    map_version: i64,
    cfg: &PipelineConfig,
) -> Result<Extraction, PipelineError> {
    cfg.validate()?;
    if model.patch_size != cfg.patch.size {
        return Err(PipelineError::Data(format!(
            "model patch size {} differs from configured {}",
            model.patch_size, cfg.patch.size
        )));
    }
    let center = Centerline::new(&trajectory.points).ok_or(ModelError::DegenerateTrajectory)?;
    let corridor;
    let surface = match surface {
        Some(s) => s,
        None => {
            corridor = RoadSurface::corridor(&center, cfg.extract.corridor_half_width, 1.0);
            &corridor
        }
    };
    let probability = probability_map(mosaic, surface, model, cfg.patch.stride);
    let ranges = chunk_ranges(center.length(), chunk_length);
    let segments = segment_candidates(&probability, mosaic, &center, &ranges, &cfg.segment);
    let members: Vec<GroupMember> = segments.iter().filter_map(|s| locate_segment(s, &center, &ranges)).collect();
    let mut groups = group_candidates(&members, &cfg.link);
    classify_groups(&mut groups, &ranges, &cfg.link);
    if cfg.extract.linking {
        interpolate_missing(&mut groups, &ranges);
    }
    let mut out = to_road_model(&groups, trajectory, chunk_length, sub_seed(cfg.seed, "extract"))?;
    out.set_map_version(map_version);
    Ok(Extraction {
        model: out,
        groups,
        members,
        segments,
        probability,
    })
}

/// Route polyline from a road model directory or a GeoJSON LineString file.
pub fn load_route(path: &Path) -> Result<(BoundaryLine, f64, i64), PipelineError> {
    if path.is_dir() {
        let m = RoadModel::load_dir(path)?;
        let traj = m
            .chunks
            .iter()
            .find_map(|c| c.trajectory())
            .ok_or_else(|| PipelineError::Input(format!("{} has no trajectory", path.display())))?;
        let mv = m.chunks.first().map_or(1, |c| c.map_version);
        return Ok((
            BoundaryLine::new(traj.line_id, LineKind::Trajectory, m.trajectory_points()),
            m.chunk_length,
            mv,
        ));
    }
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let geom = if v["type"] == "Feature" { &v["geometry"] } else { &v };
    if geom["type"] != "LineString" {
        return Err(PipelineError::Input(format!("{}: expected a GeoJSON LineString", path.display())));
    }
    let pts: Vec<GeoPoint> = geom["coordinates"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|c| Some(GeoPoint::new(c.get(1)?.as_f64()?, c.get(0)?.as_f64()?)))
        .collect();
    if pts.len() < 2 {
        return Err(PipelineError::Input(format!("{}: route needs at least two points", path.display())));
    }
    Ok((
        BoundaryLine::new(uuid::Uuid::nil(), LineKind::Trajectory, pts),
        crate::roadmodel::DEFAULT_CHUNK_LENGTH,
        1,
    ))
}

/// Probability map as an 8-bit gray image, one pixel per grid cell.
pub fn probability_image(pm: &ProbabilityMap) -> Raster {
    let px = pm.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Raster::from_gray(pm.cols as u32, pm.rows as u32, px)
}

/// Marks the surface pixels of `r` (for debugging overlays).
pub fn surface_mask(surface: &RoadSurface, r: &Raster) -> Mask {
    rasterize_line_masks(std::iter::empty::<&BoundaryLine>(), surface, r).0
}

/// Global pixel of a geographic point at `level`.
pub fn to_pixel(p: &GeoPoint, level: u8) -> TilePixel {
    let q = geo::project_point(p, level);
    TilePixel::new(level, q[0], q[1])
}
