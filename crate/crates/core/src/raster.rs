//! Rasters, binary masks and the small amount of drawing the pipeline needs.

use serde::{Deserialize, Serialize};

use crate::geo::TILE_SIZE;

/// Placement of a raster in the global pixel space of one zoom level:
/// raster pixel `(0, 0)` covers global pixel `(x0, y0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Georef {
    pub level: u8,
    pub x0: i64,
    pub y0: i64,
}

impl Georef {
    pub fn for_tile(tx: u32, ty: u32, level: u8) -> Self {
        let t = TILE_SIZE as i64;
        Self {
            level,
            x0: tx as i64 * t,
            y0: ty as i64 * t,
        }
    }

    /// Tile index when the raster origin sits on a tile corner.
    pub fn tile(&self) -> Option<(u32, u32)> {
        let t = TILE_SIZE as i64;
        if self.x0 % t == 0 && self.y0 % t == 0 && self.x0 >= 0 && self.y0 >= 0 {
            Some(((self.x0 / t) as u32, (self.y0 / t) as u32))
        } else {
            None
        }
    }

    /// Global pixel coordinates to raster-local continuous coordinates.
    pub fn to_local(&self, gx: f64, gy: f64) -> [f64; 2] {
        [gx - self.x0 as f64, gy - self.y0 as f64]
    }
}

/// Row-major 8-bit image with one (gray) or three (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixels: Vec<u8>,
    pub georef: Option<Georef>,
}

impl Raster {
    pub fn new_gray(width: u32, height: u32, fill: u8) -> Self {
        Self {
            width,
            height,
            channels: 1,
            pixels: vec![fill; (width * height) as usize],
            georef: None,
        }
    }

    pub fn from_gray(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), (width * height) as usize);
        Self {
            width,
            height,
            channels: 1,
            pixels,
            georef: None,
        }
    }

    pub fn with_georef(mut self, georef: Georef) -> Self {
        self.georef = Some(georef);
        self
    }

    pub fn is_valid(&self) -> bool {
        (self.channels == 1 || self.channels == 3)
            && self.pixels.len() == self.width as usize * self.height as usize * self.channels as usize
    }

    /// Gray value at integer pixel `(x, y)`; RGB rasters report the first channel.
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y as usize * self.width as usize + x as usize) * self.channels as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        for k in 0..c {
            self.pixels[i + k] = v;
        }
    }

    /// Bilinear sample at raster-local continuous coordinates, where pixel
    /// `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn sample_local(&self, x: f64, y: f64) -> Option<f64> {
        let u = x - 0.5;
        let v = y - 0.5;
        if u < 0.0 || v < 0.0 || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
            return None;
        }
        let i = (u.floor() as u32).min(self.width.saturating_sub(2));
        let j = (v.floor() as u32).min(self.height.saturating_sub(2));
        let fu = u - i as f64;
        let fv = v - j as f64;
        let i1 = (i + 1).min(self.width - 1);
        let j1 = (j + 1).min(self.height - 1);
        let a = self.get(i, j) as f64;
        let b = self.get(i1, j) as f64;
        let c = self.get(i, j1) as f64;
        let d = self.get(i1, j1) as f64;
        Some(a * (1.0 - fu) * (1.0 - fv) + b * fu * (1.0 - fv) + c * (1.0 - fu) * fv + d * fu * fv)
    }
}

/// Anything that can report an intensity at a global pixel position.
pub trait IntensitySource {
    fn level(&self) -> u8;
    fn sample(&self, gx: f64, gy: f64) -> Option<f64>;
}

impl IntensitySource for Raster {
    fn level(&self) -> u8 {
        self.georef.map(|g| g.level).unwrap_or(0)
    }

    fn sample(&self, gx: f64, gy: f64) -> Option<f64> {
        let g = self.georef?;
        let [x, y] = g.to_local(gx, gy);
        self.sample_local(x, y)
    }
}

/// Binary mask with the same indexing as [`Raster`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Square (Chebyshev) dilation by `r` pixels.
    pub fn dilate(&self, r: u32) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        let r = r as i64;
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                if !self.get(x as u32, y as u32) {
                    continue;
                }
                for yy in (y - r).max(0)..=(y + r).min(self.height as i64 - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(self.width as i64 - 1) {
                        out.set(xx as u32, yy as u32, true);
                    }
                }
            }
        }
        out
    }

    /// Whether any pixel is set in the half-open window `[x0, x0+w) × [y0, y0+h)`.
    pub fn any_in(&self, x0: u32, y0: u32, w: u32, h: u32) -> bool {
        (y0..y0 + h).any(|y| (x0..x0 + w).any(|x| self.get(x, y)))
    }
}

/// Fills every pixel whose center lies inside `polygon` (even-odd rule).
/// Vertices are in raster-local continuous coordinates.
pub fn fill_polygon(mask: &mut Mask, polygon: &[[f64; 2]]) {
    fill_polygon_with(mask.width, mask.height, polygon, |x, y| mask.set(x, y, true));
}

pub fn fill_polygon_with(width: u32, height: u32, polygon: &[[f64; 2]], mut put: impl FnMut(u32, u32)) {
    let n = polygon.len();
    if n < 3 {
        return;
    }
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in polygon {
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    if ymax < 0.0 || ymin > height as f64 {
        return;
    }
    let edges: Vec<([f64; 2], [f64; 2])> = (0..n)
        .map(|i| (polygon[i], polygon[(i + 1) % n]))
        .filter(|(a, b)| a[1] != b[1])
        .collect();
    let row_lo = ymin.floor().max(0.0) as u32;
    let row_hi = (ymax.ceil().max(0.0) as u32).min(height);
    let mut xs = Vec::new();
    for row in row_lo..row_hi {
        let yc = row as f64 + 0.5;
        xs.clear();
        for (a, b) in &edges {
            let (lo, hi) = if a[1] < b[1] { (a, b) } else { (b, a) };
            if yc >= lo[1] && yc < hi[1] {
                let t = (yc - lo[1]) / (hi[1] - lo[1]);
                xs.push(lo[0] + t * (hi[0] - lo[0]));
            }
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        for pair in xs.chunks_exact(2) {
            // Pixel i is inside when its center i + 0.5 lies in [x_in, x_out).
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(width as f64);
            let mut x = start as i64;
            while (x as f64) < end {
                put(x as u32, row);
                x += 1;
            }
        }
    }
}

/// Draws a one-pixel-wide polyline by dense sampling along each segment.
pub fn draw_polyline(mask: &mut Mask, points: &[[f64; 2]]) {
    let (w, h) = (mask.width, mask.height);
    draw_polyline_with(w, h, points, |x, y| mask.set(x, y, true));
}

pub fn draw_polyline_with(width: u32, height: u32, points: &[[f64; 2]], mut put: impl FnMut(u32, u32)) {
    let mut plot = |x: f64, y: f64| {
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            put(x as u32, y as u32);
        }
    };
    if points.len() == 1 {
        plot(points[0][0], points[0][1]);
    }
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        // Skip segments entirely outside the raster.
        let pad = 1.0;
        if a[0].max(b[0]) < -pad
            || a[1].max(b[1]) < -pad
            || a[0].min(b[0]) > width as f64 + pad
            || a[1].min(b[1]) > height as f64 + pad
        {
            continue;
        }
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = (len * 4.0).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            plot(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        }
    }
}

/// Separable Gaussian blur of a float image in place, clamping at borders.
pub fn gaussian_blur(values: &mut [f32], width: usize, height: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let mut tmp = vec![0f32; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f32;
            for (k, w) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - radius).clamp(0, width as i64 - 1) as usize;
                acc += w * values[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f32;
            for (k, w) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - radius).clamp(0, height as i64 - 1) as usize;
                acc += w * tmp[yy * width + x];
            }
            values[y * width + x] = acc;
        }
    }
}
