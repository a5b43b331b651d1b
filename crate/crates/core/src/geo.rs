//! Coordinate conversions between WGS84 geodetic, web-Mercator tile pixels,
//! ECEF and local North-East-Up frames.
//!
//! Angles cross the public API in degrees and are converted to radians
//! internally. Tile pixels are real valued and global: pixel `(x, y)` at level
//! `l` lives in `[0, 256 * 2^l)` on both axes and its tile index is
//! `floor(x / 256)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 equatorial radius in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);
/// Latitude at which the square Mercator world ends.
pub const MERCATOR_MAX_LAT: f64 = 85.051_128_779_806_59;
/// Edge length of one imagery tile in pixels.
pub const TILE_SIZE: u32 = 256;
pub const MIN_LEVEL: u8 = 1;
pub const MAX_LEVEL: u8 = 23;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("zoom level {0} outside [1, 23]")]
    InvalidLevel(u8),
    #[error("latitude {0} outside the Mercator range")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("pixel ({x}, {y}) outside the level-{level} world")]
    PixelOutOfRange { level: u8, x: f64, y: f64 },
    #[error("tile ({x}, {y}) outside level {level}")]
    TileOutOfRange { x: u32, y: u32, level: u8 },
    #[error("malformed quadkey {0:?}")]
    Quadkey(String),
    #[error("pixel shift ({0}, {1}) exceeds 2^16")]
    ShiftTooLarge(f64, f64),
}

/// Geodetic position: latitude and longitude in degrees, altitude in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub alt: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon, alt: 0.0 }
    }

    pub fn with_alt(lat: f64, lon: f64, alt: f64) -> Self {
        Self { lat, lon, alt }
    }

    /// Checks the Mercator latitude limit and the longitude range.
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.lat.is_finite() && self.lon.is_finite() && self.alt.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if self.lat.abs() > MERCATOR_MAX_LAT {
            return Err(GeoError::LatitudeOutOfRange(self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::LongitudeOutOfRange(self.lon));
        }
        Ok(())
    }
}

/// Global, sub-pixel position in the web-Mercator pixel space of one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilePixel {
    pub level: u8,
    pub x: f64,
    pub y: f64,
}

impl TilePixel {
    pub fn new(level: u8, x: f64, y: f64) -> Self {
        Self { level, x, y }
    }

    /// Index of the tile containing this pixel.
    pub fn tile(&self) -> (u32, u32) {
        let t = TILE_SIZE as f64;
        ((self.x / t).floor() as u32, (self.y / t).floor() as u32)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        check_level(self.level)?;
        let w = world_size(self.level);
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if self.x < 0.0 || self.y < 0.0 || self.x >= w || self.y >= w {
            return Err(GeoError::PixelOutOfRange {
                level: self.level,
                x: self.x,
                y: self.y,
            });
        }
        Ok(())
    }
}

/// Earth-centered, earth-fixed position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPoint {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &EcefPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Position in the North-East-Up tangent plane anchored at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuPoint {
    pub origin: GeoPoint,
    pub n: f64,
    pub e: f64,
    pub u: f64,
}

pub fn check_level(level: u8) -> Result<(), GeoError> {
    if (MIN_LEVEL..=MAX_LEVEL).contains(&level) {
        Ok(())
    } else {
        Err(GeoError::InvalidLevel(level))
    }
}

/// Width of the pixel world at `level`.
pub fn world_size(level: u8) -> f64 {
    TILE_SIZE as f64 * (1u64 << level) as f64
}

/// Web-Mercator forward projection into global pixel coordinates.
pub fn latlon_to_pixel(p: &GeoPoint, level: u8) -> Result<TilePixel, GeoError> {
    check_level(level)?;
    p.validate()?;
    let (x, y) = project_unchecked(p.lat, p.lon, level);
    Ok(TilePixel { level, x, y })
}

fn project_unchecked(lat: f64, lon: f64, level: u8) -> (f64, f64) {
    let w = world_size(level);
    let x = (lon + 180.0) / 360.0 * w;
    let s = lat.to_radians().sin();
    let y = (0.5 - ((1.0 + s) / (1.0 - s)).ln() / (4.0 * PI)) * w;
    (x, y)
}

/// Inverse web-Mercator projection.
pub fn pixel_to_latlon(px: &TilePixel) -> Result<GeoPoint, GeoError> {
    px.validate()?;
    Ok(unproject_unchecked(px.x, px.y, px.level))
}

fn unproject_unchecked(x: f64, y: f64, level: u8) -> GeoPoint {
    let w = world_size(level);
    let lon = x / w * 360.0 - 180.0;
    let lat = (PI * (1.0 - 2.0 * y / w)).sinh().atan().to_degrees();
    GeoPoint::new(lat, lon)
}

/// Geodetic position of the north-west corner of tile `(tx, ty)`; the corner
/// indices may equal `2^level` to address the far edges.
pub fn tile_corner(tx: u32, ty: u32, level: u8) -> GeoPoint {
    let t = TILE_SIZE as f64;
    unproject_unchecked(tx as f64 * t, ty as f64 * t, level)
}

/// Bing-style quadkey of a tile.
pub fn tile_quadkey(tx: u32, ty: u32, level: u8) -> Result<String, GeoError> {
    check_level(level)?;
    let n = 1u64 << level;
    if tx as u64 >= n || ty as u64 >= n {
        return Err(GeoError::TileOutOfRange { x: tx, y: ty, level });
    }
    let mut key = String::with_capacity(level as usize);
    for i in (1..=level).rev() {
        let mask = 1u32 << (i - 1);
        let mut digit = b'0';
        if tx & mask != 0 {
            digit += 1;
        }
        if ty & mask != 0 {
            digit += 2;
        }
        key.push(digit as char);
    }
    Ok(key)
}

/// Inverse of [`tile_quadkey`], returning `(tx, ty, level)`.
pub fn quadkey_to_tile(key: &str) -> Result<(u32, u32, u8), GeoError> {
    let level = key.len();
    if level == 0 || level > MAX_LEVEL as usize {
        return Err(GeoError::Quadkey(key.to_string()));
    }
    let (mut tx, mut ty) = (0u32, 0u32);
    for ch in key.bytes() {
        tx <<= 1;
        ty <<= 1;
        match ch {
            b'0' => {}
            b'1' => tx |= 1,
            b'2' => ty |= 1,
            b'3' => {
                tx |= 1;
                ty |= 1;
            }
            _ => return Err(GeoError::Quadkey(key.to_string())),
        }
    }
    Ok((tx, ty, level as u8))
}

/// Prime-vertical radius of curvature N(φ).
pub fn prime_vertical_radius(lat_rad: f64) -> f64 {
    let s = lat_rad.sin();
    WGS84_A / (1.0 - WGS84_E2 * s * s).sqrt()
}

pub fn latlon_to_ecef(p: &GeoPoint) -> EcefPoint {
    let (lat, lon) = (p.lat.to_radians(), p.lon.to_radians());
    let n = prime_vertical_radius(lat);
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    EcefPoint {
        x: (n + p.alt) * cl * co,
        y: (n + p.alt) * cl * so,
        z: (n * (1.0 - WGS84_E2) + p.alt) * sl,
    }
}

/// Fixed-point geodetic latitude iteration; converges to machine precision
/// in a handful of steps for any point outside the Earth's core.
pub fn ecef_to_latlon(p: &EcefPoint) -> GeoPoint {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let lon = p.y.atan2(p.x);
    let mut lat = p.z.atan2(rho * (1.0 - WGS84_E2));
    for _ in 0..10 {
        let n = prime_vertical_radius(lat);
        let next = (p.z + WGS84_E2 * n * lat.sin()).atan2(rho);
        if (next - lat).abs() < 1e-15 {
            lat = next;
            break;
        }
        lat = next;
    }
    let (sl, cl) = lat.sin_cos();
    let alt = rho * cl + p.z * sl - WGS84_A * (1.0 - WGS84_E2 * sl * sl).sqrt();
    GeoPoint::with_alt(lat.to_degrees(), lon.to_degrees(), alt)
}

/// Rows are the north, east and up unit vectors expressed in ECEF.
fn neu_basis(origin: &GeoPoint) -> [[f64; 3]; 3] {
    let (sl, cl) = origin.lat.to_radians().sin_cos();
    let (so, co) = origin.lon.to_radians().sin_cos();
    [
        [-sl * co, -sl * so, cl],
        [-so, co, 0.0],
        [cl * co, cl * so, sl],
    ]
}

pub fn ecef_to_neu(p: &EcefPoint, origin: &GeoPoint) -> NeuPoint {
    let o = latlon_to_ecef(origin);
    let d = [p.x - o.x, p.y - o.y, p.z - o.z];
    let r = neu_basis(origin);
    let dot = |row: &[f64; 3]| row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
    NeuPoint {
        origin: *origin,
        n: dot(&r[0]),
        e: dot(&r[1]),
        u: dot(&r[2]),
    }
}

pub fn neu_to_ecef(p: &NeuPoint) -> EcefPoint {
    let o = latlon_to_ecef(&p.origin);
    let r = neu_basis(&p.origin);
    let v = [p.n, p.e, p.u];
    let col = |k: usize| r[0][k] * v[0] + r[1][k] * v[1] + r[2][k] * v[2];
    EcefPoint {
        x: o.x + col(0),
        y: o.y + col(1),
        z: o.z + col(2),
    }
}

/// Meters per pixel along a parallel at `lat` for the given level.
pub fn ground_resolution(lat: f64, level: u8) -> f64 {
    lat.to_radians().cos() * (2.0 * PI * WGS84_A) / world_size(level)
}

/// Disagreement, in meters, between moving `(dx, dy)` pixels in Mercator
/// space and moving the equivalent ground distance in the local tangent
/// plane. Both end points are compared in ECEF.
pub fn mercator_cartesian_error_dp(lat: f64, dx: f64, dy: f64, level: u8) -> Result<f64, GeoError> {
    check_level(level)?;
    let limit = 65_536.0;
    if dx.abs() > limit || dy.abs() > limit {
        return Err(GeoError::ShiftTooLarge(dx, dy));
    }
    let base = latlon_to_pixel(&GeoPoint::new(lat, 0.0), level)?;
    let origin = unproject_unchecked(base.x, base.y, level);
    let shifted = unproject_unchecked(base.x + dx, base.y + dy, level);
    let via_mercator = latlon_to_ecef(&shifted);

    let gr = ground_resolution(origin.lat, level);
    let via_plane = neu_to_ecef(&NeuPoint {
        origin,
        n: -dy * gr,
        e: dx * gr,
        u: 0.0,
    });
    Ok(via_mercator.distance(&via_plane))
}

/// Absolute difference between the ECEF lengths of the south and north
/// edges of tile `(tx, ty)`.
pub fn tile_span_error_de(tx: u32, ty: u32, level: u8) -> Result<f64, GeoError> {
    check_level(level)?;
    let n = 1u64 << level;
    if tx as u64 >= n || ty as u64 >= n {
        return Err(GeoError::TileOutOfRange { x: tx, y: ty, level });
    }
    let e = |x: u32, y: u32| latlon_to_ecef(&tile_corner(x, y, level));
    let south = e(tx + 1, ty + 1).distance(&e(tx, ty + 1));
    let north = e(tx + 1, ty).distance(&e(tx, ty));
    Ok((south - north).abs())
}

/// A local East/North metric frame tangent to the ellipsoid at `origin`.
///
/// Points are handled in two dimensions; the up component is dropped on the
/// way in, and on the way out the geodetic point at altitude zero whose
/// projection matches the requested coordinates is solved for.
#[derive(Debug, Clone)]
pub struct LocalFrame {
    origin: GeoPoint,
    origin_ecef: EcefPoint,
    basis: [[f64; 3]; 3],
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        let origin = GeoPoint::new(origin.lat, origin.lon);
        Self {
            origin,
            origin_ecef: latlon_to_ecef(&origin),
            basis: neu_basis(&origin),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    /// `[east, north]` in meters.
    pub fn to_en(&self, p: &GeoPoint) -> [f64; 2] {
        let q = latlon_to_ecef(&GeoPoint::new(p.lat, p.lon));
        let d = [
            q.x - self.origin_ecef.x,
            q.y - self.origin_ecef.y,
            q.z - self.origin_ecef.z,
        ];
        let dot = |row: &[f64; 3]| row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
        [dot(&self.basis[1]), dot(&self.basis[0])]
    }

    pub fn from_en(&self, en: [f64; 2]) -> GeoPoint {
        let mut target = en;
        let mut p = self.lift(target);
        for _ in 0..4 {
            let got = self.to_en(&p);
            let err = [en[0] - got[0], en[1] - got[1]];
            if err[0].abs() < 1e-10 && err[1].abs() < 1e-10 {
                break;
            }
            target = [target[0] + err[0], target[1] + err[1]];
            p = self.lift(target);
        }
        p
    }

    fn lift(&self, en: [f64; 2]) -> GeoPoint {
        let e = neu_to_ecef(&NeuPoint {
            origin: self.origin,
            n: en[1],
            e: en[0],
            u: 0.0,
        });
        let g = ecef_to_latlon(&e);
        GeoPoint::new(g.lat, g.lon)
    }

    pub fn pixel_to_en(&self, px: &TilePixel) -> [f64; 2] {
        self.to_en(&unproject_unchecked(px.x, px.y, px.level))
    }

    pub fn en_to_pixel(&self, en: [f64; 2], level: u8) -> TilePixel {
        let g = self.from_en(en);
        let (x, y) = project_unchecked(g.lat, g.lon, level);
        TilePixel { level, x, y }
    }
}

/// Projection that skips range validation; callers guarantee valid input.
pub(crate) fn project_point(p: &GeoPoint, level: u8) -> [f64; 2] {
    let (x, y) = project_unchecked(p.lat, p.lon, level);
    [x, y]
}

pub(crate) fn unproject_point(x: f64, y: f64, level: u8) -> GeoPoint {
    unproject_unchecked(x, y, level)
}
