//! Imagery tiles by quadkey, from a URL template or a local directory, with a
//! persistent PNG cache laid out as `<map version>/<quadkey>.png`.

use std::collections::{HashMap, HashSet};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::{DynamicImage, ImageFormat};
use rayon::prelude::*;
use thiserror::Error;

use crate::centerline::Centerline;
use crate::geo::{self, GeoPoint, TILE_SIZE};
use crate::raster::{Georef, IntensitySource, Raster};

#[derive(Debug, Error)]
pub enum TileError {
    #[error("fetch failed for tile {quadkey} from {location}: {msg}")]
    Fetch {
        quadkey: String,
        location: String,
        msg: String,
    },
    #[error("tile {quadkey}: cannot decode image: {msg}")]
    Decode { quadkey: String, msg: String },
    #[error("tile {quadkey}: expected 256x256 pixels, got {width}x{height}")]
    Size { quadkey: String, width: u32, height: u32 },
    #[error(transparent)]
    Geo(#[from] geo::GeoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TileError {
    /// Network failures and missing files may succeed on a later attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, TileError::Fetch { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TileMode {
    /// URL with `[quadkey]` and `[map version]` placeholders.
    Http(String),
    /// Root of a `<map version>/<quadkey>.png` tree.
    Directory(PathBuf),
}

#[derive(Debug)]
pub struct TileSource {
    pub mode: TileMode,
    pub cache_dir: Option<PathBuf>,
    pub map_version: i64,
    accesses: AtomicUsize,
}

impl TileSource {
    pub fn http(url_template: impl Into<String>, cache_dir: Option<PathBuf>, map_version: i64) -> Self {
        Self {
            mode: TileMode::Http(url_template.into()),
            cache_dir,
            map_version,
            accesses: AtomicUsize::new(0),
        }
    }

    pub fn directory(root: impl Into<PathBuf>, map_version: i64) -> Self {
        Self {
            mode: TileMode::Directory(root.into()),
            cache_dir: None,
            map_version,
            accesses: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    /// Number of reads that went to the underlying source (not the cache).
    pub fn source_accesses(&self) -> usize {
        self.accesses.load(Ordering::SeqCst)
    }

    pub fn url_for(&self, quadkey: &str) -> Option<String> {
        match &self.mode {
            TileMode::Http(t) => Some(
                t.replace("[quadkey]", quadkey)
                    .replace("[map version]", &self.map_version.to_string()),
            ),
            TileMode::Directory(_) => None,
        }
    }

    pub fn cache_path(&self, quadkey: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| tile_path(d, self.map_version, quadkey))
    }

    pub fn fetch_tile(&self, quadkey: &str) -> Result<Raster, TileError> {
        let (tx, ty, level) = geo::quadkey_to_tile(quadkey)?;
        let georef = Georef::for_tile(tx, ty, level);

        if let Some(path) = self.cache_path(quadkey) {
            if path.exists() {
                let bytes = std::fs::read(&path).map_err(|e| TileError::Io { path: path.clone(), source: e })?;
                return Ok(decode_tile(quadkey, &bytes)?.with_georef(georef));
            }
        }

        self.accesses.fetch_add(1, Ordering::SeqCst);
        let bytes = match &self.mode {
            TileMode::Directory(root) => {
                let path = tile_path(root, self.map_version, quadkey);
                std::fs::read(&path).map_err(|e| TileError::Fetch {
                    quadkey: quadkey.to_string(),
                    location: path.display().to_string(),
                    msg: e.to_string(),
                })?
            }
            TileMode::Http(_) => {
                let url = self.url_for(quadkey).unwrap();
                http_get(&url).map_err(|msg| TileError::Fetch {
                    quadkey: quadkey.to_string(),
                    location: url.clone(),
                    msg,
                })?
            }
        };
        let raster = decode_tile(quadkey, &bytes)?;
        if let Some(path) = self.cache_path(quadkey) {
            write_png_atomic(&path, &raster)?;
        }
        Ok(raster.with_georef(georef))
    }
}

fn http_get(url: &str) -> Result<Vec<u8>, String> {
    let resp = ureq::get(url).call().map_err(|e| e.to_string())?;
    resp.into_body().read_to_vec().map_err(|e| e.to_string())
}

pub fn tile_path(root: &Path, map_version: i64, quadkey: &str) -> PathBuf {
    root.join(map_version.to_string()).join(format!("{quadkey}.png"))
}

fn decode_tile(quadkey: &str, bytes: &[u8]) -> Result<Raster, TileError> {
    let r = decode_image(bytes).map_err(|msg| TileError::Decode {
        quadkey: quadkey.to_string(),
        msg,
    })?;
    if r.width != TILE_SIZE || r.height != TILE_SIZE {
        return Err(TileError::Size {
            quadkey: quadkey.to_string(),
            width: r.width,
            height: r.height,
        });
    }
    Ok(r)
}

/// Decodes PNG or JPEG. Gray images stay single channel, everything else
/// becomes RGB.
pub fn decode_image(bytes: &[u8]) -> Result<Raster, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let (w, h) = (img.width(), img.height());
    Ok(match img {
        DynamicImage::ImageLuma8(b) => Raster::from_gray(w, h, b.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            Raster::from_gray(w, h, img.to_luma8().into_raw())
        }
        other => Raster {
            width: w,
            height: h,
            channels: 3,
            pixels: other.to_rgb8().into_raw(),
            georef: None,
        },
    })
}

pub fn encode_png(r: &Raster) -> Vec<u8> {
    let img = if r.channels == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(r.width, r.height, r.pixels.clone()).expect("valid raster"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(r.width, r.height, r.pixels.clone()).expect("valid raster"))
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so concurrent writers never leave a partial file behind.
pub fn write_png_atomic(path: &Path, r: &Raster) -> Result<(), TileError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let io = |p: &Path, e: std::io::Error| TileError::Io { path: p.to_path_buf(), source: e };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(dir, e))?;
    std::io::Write::write_all(&mut tmp, &encode_png(r)).map_err(|e| io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| io(path, e.error))?;
    Ok(())
}

/// ITU-R BT.601 luma, rounded. Gray input is returned unchanged.
pub fn to_grayscale(r: &Raster) -> Raster {
    if r.channels == 1 {
        return r.clone();
    }
    let pixels = r
        .pixels
        .chunks_exact(3)
        .map(|c| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64).round() as u8)
        .collect();
    Raster {
        width: r.width,
        height: r.height,
        channels: 1,
        pixels,
        georef: r.georef,
    }
}

/// Tiles touched by a polyline whose vertices are joined by straight lines
/// in pixel space, in order of first contact.
pub fn tiles_for_polyline(points: &[GeoPoint], level: u8) -> Result<Vec<(u32, u32)>, geo::GeoError> {
    geo::check_level(level)?;
    let px: Vec<[f64; 2]> = points
        .iter()
        .map(|p| geo::latlon_to_pixel(p, level).map(|q| [q.x, q.y]))
        .collect::<Result<_, _>>()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut add = |t: (u32, u32)| {
        if seen.insert(t) {
            out.push(t);
        }
    };
    if px.len() == 1 {
        add(tile_of(px[0], level));
    }
    let ts = TILE_SIZE as f64;
    for w in px.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ta, tb) = (tile_of(a, level), tile_of(b, level));
        let (x0, x1) = (ta.0.min(tb.0), ta.0.max(tb.0));
        let (y0, y1) = (ta.1.min(tb.1), ta.1.max(tb.1));
        let mut hits: Vec<(f64, (u32, u32))> = Vec::new();
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                let lo = [tx as f64 * ts, ty as f64 * ts];
                let hi = [lo[0] + ts, lo[1] + ts];
                if let Some(u) = clip_entry(a, b, lo, hi) {
                    hits.push((u, (tx, ty)));
                }
            }
        }
        hits.sort_by(|p, q| p.0.total_cmp(&q.0));
        for (_, t) in hits {
            add(t);
        }
    }
    Ok(out)
}

fn tile_of(p: [f64; 2], level: u8) -> (u32, u32) {
    let max = (1u32 << level) - 1;
    let t = TILE_SIZE as f64;
    (
        ((p[0] / t).floor().max(0.0) as u32).min(max),
        ((p[1] / t).floor().max(0.0) as u32).min(max),
    )
}

/// Liang-Barsky clip of segment `a→b` against the half-open box
/// `[lo, hi)`; returns the entry parameter when they intersect.
fn clip_entry(a: [f64; 2], b: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> Option<f64> {
    const EPS: f64 = 1e-9;
    let (mut u0, mut u1) = (0.0f64, 1.0f64);
    let d = [b[0] - a[0], b[1] - a[1]];
    for k in 0..2 {
        let (min, max) = (lo[k], hi[k] - EPS);
        if d[k] == 0.0 {
            if a[k] < min || a[k] > max {
                return None;
            }
            continue;
        }
        let (mut e, mut f) = ((min - a[k]) / d[k], (max - a[k]) / d[k]);
        if e > f {
            std::mem::swap(&mut e, &mut f);
        }
        u0 = u0.max(e);
        u1 = u1.min(f);
        if u0 > u1 {
            return None;
        }
    }
    Some(u0)
}

/// Tiles covering a band of `half_width` meters on either side of the
/// centerline, sampled as parallel offset polylines.
pub fn tiles_for_corridor(center: &Centerline, half_width: f64, level: u8) -> Result<Vec<(u32, u32)>, geo::GeoError> {
    let step_m = 1.0;
    let n = (center.length() / step_m).ceil().max(1.0) as usize;
    let lanes = (2.0 * half_width / 4.0).ceil().max(1.0) as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for k in 0..=lanes {
        let t = -half_width + 2.0 * half_width * k as f64 / lanes as f64;
        let pts: Vec<GeoPoint> = (0..=n)
            .map(|i| center.geo_at((i as f64 * step_m).min(center.length()), t))
            .collect();
        for tile in tiles_for_polyline(&pts, level)? {
            if seen.insert(tile) {
                out.push(tile);
            }
        }
    }
    Ok(out)
}

/// Fetches every tile the route crosses, once each, in parallel.
pub fn mosaic_route(src: &TileSource, route: &[GeoPoint], level: u8) -> Result<Vec<(String, Raster)>, TileError> {
    let tiles = tiles_for_polyline(route, level)?;
    fetch_all(src, &tiles, level)
}

/// Fetches in parallel; on failure the error of the first failing tile in
/// input order is returned.
pub fn fetch_all(src: &TileSource, tiles: &[(u32, u32)], level: u8) -> Result<Vec<(String, Raster)>, TileError> {
    let results: Vec<Result<(String, Raster), TileError>> = tiles
        .par_iter()
        .map(|&(tx, ty)| {
            let qk = geo::tile_quadkey(tx, ty, level)?;
            let r = to_grayscale(&src.fetch_tile(&qk)?);
            Ok((qk, r))
        })
        .collect();
    results.into_iter().collect()
}

/// Gray tiles of one level addressed in global pixel coordinates.
#[derive(Debug, Clone, Default)]
pub struct TileMosaic {
    level: u8,
    tiles: HashMap<(u32, u32), Raster>,
}

impl TileMosaic {
    pub fn new(level: u8) -> Self {
        Self { level, tiles: HashMap::new() }
    }

    pub fn from_tiles(level: u8, tiles: impl IntoIterator<Item = Raster>) -> Self {
        let mut m = Self::new(level);
        for r in tiles {
            m.insert(r);
        }
        m
    }

    /// Inserts a georeferenced tile; rasters that are not tile-aligned are ignored.
    pub fn insert(&mut self, r: Raster) {
        if let Some((tx, ty)) = r.georef.and_then(|g| g.tile()) {
            self.tiles.insert((tx, ty), to_grayscale(&r));
        }
    }

    pub fn get_tile(&self, tx: u32, ty: u32) -> Option<&Raster> {
        self.tiles.get(&(tx, ty))
    }

    pub fn tile_ids(&self) -> Vec<(u32, u32)> {
        let mut v: Vec<_> = self.tiles.keys().copied().collect();
        v.sort_by_key(|&(x, y)| (y, x));
        v
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Gray value at an integer global pixel, if its tile is loaded.
    pub fn pixel(&self, gx: i64, gy: i64) -> Option<u8> {
        if gx < 0 || gy < 0 {
            return None;
        }
        let t = TILE_SIZE as i64;
        let r = self.tiles.get(&((gx / t) as u32, (gy / t) as u32))?;
        Some(r.get((gx % t) as u32, (gy % t) as u32))
    }

    /// Tile `(tx, ty)` grown by `pad` pixels on every side. Pixels whose
    /// neighbour tile is missing repeat the nearest pixel of the core tile.
    pub fn padded_tile(&self, tx: u32, ty: u32, pad: u32) -> Option<Raster> {
        let core = self.tiles.get(&(tx, ty))?;
        let t = TILE_SIZE as i64;
        let (x0, y0) = (tx as i64 * t - pad as i64, ty as i64 * t - pad as i64);
        let side = TILE_SIZE + 2 * pad;
        let mut pixels = Vec::with_capacity((side * side) as usize);
        for j in 0..side as i64 {
            for i in 0..side as i64 {
                let (gx, gy) = (x0 + i, y0 + j);
                let v = self.pixel(gx, gy).unwrap_or_else(|| {
                    let lx = (gx - tx as i64 * t).clamp(0, t - 1) as u32;
                    let ly = (gy - ty as i64 * t).clamp(0, t - 1) as u32;
                    core.get(lx, ly)
                });
                pixels.push(v);
            }
        }
        Some(Raster::from_gray(side, side, pixels).with_georef(Georef { level: self.level, x0, y0 }))
    }
}

impl IntensitySource for TileMosaic {
    fn level(&self) -> u8 {
        self.level
    }

    fn sample(&self, gx: f64, gy: f64) -> Option<f64> {
        let u = gx - 0.5;
        let v = gy - 0.5;
        let (i, j) = (u.floor() as i64, v.floor() as i64);
        let (fu, fv) = (u - i as f64, v - j as f64);
        let a = self.pixel(i, j)? as f64;
        let b = self.pixel(i + 1, j)? as f64;
        let c = self.pixel(i, j + 1)? as f64;
        let d = self.pixel(i + 1, j + 1)? as f64;
        Some(a * (1.0 - fu) * (1.0 - fv) + b * fu * (1.0 - fv) + c * (1.0 - fu) * fv + d * fu * fv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use rand::{Rng, SeedableRng};

    fn gradient_tile(seed: u8) -> Raster {
        let px = (0..256 * 256).map(|i| ((i % 256) as u8).wrapping_add(seed)).collect();
        Raster::from_gray(256, 256, px)
    }

    fn write_dir_tile(root: &Path, mv: i64, qk: &str, r: &Raster) {
        write_png_atomic(&tile_path(root, mv, qk), r).unwrap();
    }

    #[test]
    fn grayscale_conversion() {
        let rgb = Raster {
            width: 3,
            height: 1,
            channels: 3,
            pixels: vec![255, 255, 255, 255, 0, 0, 0, 0, 0],
            georef: None,
        };
        assert_eq!(to_grayscale(&rgb).pixels, vec![255, 76, 0]);
        let g = gradient_tile(0);
        assert_eq!(to_grayscale(&g), g);
    }

    #[test]
    fn directory_fetch_and_cache() {
        let root = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let qk = geo::tile_quadkey(10, 20, 6).unwrap();
        let tile = gradient_tile(3);
        write_dir_tile(root.path(), 5, &qk, &tile);

        let src = TileSource::directory(root.path(), 5).with_cache(cache.path());
        let a = src.fetch_tile(&qk).unwrap();
        assert_eq!((a.width, a.height), (256, 256));
        assert_eq!(a.pixels, tile.pixels);
        assert_eq!(a.georef, Some(Georef::for_tile(10, 20, 6)));
        assert_eq!(src.source_accesses(), 1);
        let b = src.fetch_tile(&qk).unwrap();
        assert_eq!(src.source_accesses(), 1);
        assert_eq!(a, b);
        assert!(cache.path().join("5").join(format!("{qk}.png")).exists());

        let missing = geo::tile_quadkey(11, 20, 6).unwrap();
        let err = src.fetch_tile(&missing).unwrap_err();
        assert!(err.is_retryable());
        assert!(err.to_string().contains(&format!("{missing}.png")), "{err}");
    }

    #[test]
    fn rejects_non_images_and_wrong_sizes() {
        let root = tempfile::tempdir().unwrap();
        let qk = "0123";
        let p = tile_path(root.path(), 1, qk);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(&p, b"<html>not an image</html>").unwrap();
        let src = TileSource::directory(root.path(), 1);
        assert!(matches!(src.fetch_tile(qk), Err(TileError::Decode { .. })));
        write_png_atomic(&p, &Raster::new_gray(10, 10, 0)).unwrap();
        assert!(matches!(src.fetch_tile(qk), Err(TileError::Size { .. })));
        assert!(matches!(src.fetch_tile("0124"), Err(TileError::Geo(_))));
    }

    #[test]
    fn url_substitution() {
        let src = TileSource::http("http://host/tiles/a/[quadkey].jpeg?g=[map version]", None, 1234);
        assert_eq!(src.url_for("0231").unwrap(), "http://host/tiles/a/0231.jpeg?g=1234");
    }

    #[test]
    fn png_round_trip_is_byte_stable() {
        let t = gradient_tile(9);
        let a = encode_png(&t);
        let back = decode_image(&a).unwrap();
        assert_eq!(back.pixels, t.pixels);
        assert_eq!(encode_png(&back), a);
    }

    /// Brute force: every tile in the bounding box tested by separating axes.
    fn oracle_tiles(points: &[GeoPoint], level: u8) -> HashSet<(u32, u32)> {
        let px: Vec<[f64; 2]> = points.iter().map(|p| geo::project_point(p, level)).collect();
        let ts = 256.0;
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &px {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let mut out = HashSet::new();
        for ty in (lo[1] / ts).floor() as u32..=(hi[1] / ts).floor() as u32 {
            for tx in (lo[0] / ts).floor() as u32..=(hi[0] / ts).floor() as u32 {
                let bx = [tx as f64 * ts, (tx + 1) as f64 * ts - 1e-9];
                let by = [ty as f64 * ts, (ty + 1) as f64 * ts - 1e-9];
                let corners = [[bx[0], by[0]], [bx[1], by[0]], [bx[0], by[1]], [bx[1], by[1]]];
                let hit = px.windows(2).any(|w| {
                    let (a, b) = (w[0], w[1]);
                    if a[0].max(b[0]) < bx[0] || a[0].min(b[0]) > bx[1] || a[1].max(b[1]) < by[0] || a[1].min(b[1]) > by[1] {
                        return false;
                    }
                    let n = [a[1] - b[1], b[0] - a[0]];
                    let side: Vec<f64> = corners.iter().map(|c| n[0] * (c[0] - a[0]) + n[1] * (c[1] - a[1])).collect();
                    !(side.iter().all(|s| *s > 0.0) || side.iter().all(|s| *s < 0.0))
                });
                if hit {
                    out.insert((tx, ty));
                }
            }
        }
        out
    }

    #[test]
    fn polyline_tiles_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let f = LocalFrame::new(GeoPoint::new(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0)));
            let n = rng.random_range(2..8);
            let mut p = [0.0, 0.0];
            let pts: Vec<GeoPoint> = (0..n)
                .map(|_| {
                    p = [p[0] + rng.random_range(-80.0..80.0), p[1] + rng.random_range(-80.0..80.0)];
                    f.from_en(p)
                })
                .collect();
            let got: Vec<_> = tiles_for_polyline(&pts, 20).unwrap();
            let set: HashSet<_> = got.iter().copied().collect();
            assert_eq!(set.len(), got.len(), "duplicates");
            assert_eq!(set, oracle_tiles(&pts, 20));
        }
    }

    #[test]
    fn mosaic_counts() {
        let level = 20;
        let inside = |x: f64, y: f64| geo::unproject_point(1000.0 * 256.0 + x, 2000.0 * 256.0 + y, level);
        let root = tempfile::tempdir().unwrap();
        for tx in 999..=1002 {
            for ty in 1999..=2001 {
                write_dir_tile(root.path(), 1, &geo::tile_quadkey(tx, ty, level).unwrap(), &gradient_tile(tx as u8));
            }
        }
        let src = TileSource::directory(root.path(), 1);
        let one = mosaic_route(&src, &[inside(20.0, 20.0), inside(200.0, 100.0)], level).unwrap();
        assert_eq!(one.len(), 1);
        let two = mosaic_route(&src, &[inside(200.0, 100.0), inside(300.0, 110.0), inside(310.0, 120.0)], level).unwrap();
        assert_eq!(two.len(), 2);
        let keys: HashSet<_> = two.iter().map(|(k, _)| k.clone()).collect();
        assert_eq!(keys.len(), 2);
        let missing = mosaic_route(&src, &[inside(10.0, 10.0), inside(10.0, 2000.0)], level).unwrap_err();
        assert!(missing.to_string().contains("fetch failed for tile"));
    }

    #[test]
    fn mosaic_sampling_and_padding() {
        let level = 18;
        let a = gradient_tile(0).with_georef(Georef::for_tile(5, 5, level));
        let b = Raster::new_gray(256, 256, 200).with_georef(Georef::for_tile(6, 5, level));
        let m = TileMosaic::from_tiles(level, [a, b]);
        // Across the seam between x = 1535 (value 255) and 1536 (value 200).
        let v = m.sample(1536.0, 1300.5).unwrap();
        assert!((v - 227.5).abs() < 1e-9);
        assert!(m.sample(5.0 * 256.0 - 0.2, 1300.0).is_none());
        let p = m.padded_tile(5, 5, 8).unwrap();
        assert_eq!((p.width, p.height), (272, 272));
        assert_eq!(p.get(8 + 256, 20), 200);
        assert_eq!(p.get(0, 20), 0);
        assert_eq!(p.get(8 + 10, 0), 10);
    }
}
