//! Overlay rendering: truth red, prediction green, chunk borders blue and a
//! yellow marker where each border crosses the trajectory.

use std::collections::BTreeSet;

use lanemap::geo::{self, GeoPoint, TILE_SIZE};
use lanemap::raster::{draw_polyline_with, Raster};
use lanemap::roadmodel::{chunk_borders, LineKind, RoadModel};
use lanemap::tiles::{self, TileSource};

pub const TRUTH: [u8; 3] = [255, 0, 0];
pub const PRED: [u8; 3] = [0, 255, 0];
pub const BORDER: [u8; 3] = [0, 0, 255];
pub const MARKER: [u8; 3] = [255, 255, 0];

/// Half length in meters of the drawn chunk borders.
const BORDER_HALF_WIDTH: f64 = 9.0;

pub struct Canvas {
    pub image: Raster,
    pub x0: i64,
    pub y0: i64,
    pub level: u8,
    pub missing_tiles: usize,
}

impl Canvas {
    /// RGB canvas over every tile the models' corridors touch; tiles absent
    /// from `src` stay black.
    pub fn for_models(src: &TileSource, models: &[&RoadModel], level: u8) -> Result<Self, String> {
        let mut ids = BTreeSet::new();
        for m in models {
            let c = m.centerline().map_err(|e| e.to_string())?;
            ids.extend(tiles::tiles_for_corridor(&c, BORDER_HALF_WIDTH, level).map_err(|e| e.to_string())?);
        }
        if ids.is_empty() {
            return Err("no tiles to render".into());
        }
        let tx0 = ids.iter().map(|t| t.0).min().unwrap();
        let ty0 = ids.iter().map(|t| t.1).min().unwrap();
        let tx1 = ids.iter().map(|t| t.0).max().unwrap();
        let ty1 = ids.iter().map(|t| t.1).max().unwrap();
        let (w, h) = ((tx1 - tx0 + 1) * TILE_SIZE, (ty1 - ty0 + 1) * TILE_SIZE);
        let mut image = Raster {
            width: w,
            height: h,
            channels: 3,
            pixels: vec![0; (w * h * 3) as usize],
            georef: None,
        };
        let mut missing_tiles = 0;
        for &(tx, ty) in &ids {
            let qk = geo::tile_quadkey(tx, ty, level).map_err(|e| e.to_string())?;
            let tile = match src.fetch_tile(&qk) {
                Ok(t) => tiles::to_grayscale(&t),
                Err(_) => {
                    missing_tiles += 1;
                    continue;
                }
            };
            let (ox, oy) = ((tx - tx0) * TILE_SIZE, (ty - ty0) * TILE_SIZE);
            for y in 0..TILE_SIZE {
                for x in 0..TILE_SIZE {
                    image.set(ox + x, oy + y, tile.get(x, y));
                }
            }
        }
        Ok(Self {
            image,
            x0: tx0 as i64 * TILE_SIZE as i64,
            y0: ty0 as i64 * TILE_SIZE as i64,
            level,
            missing_tiles,
        })
    }

    /// Canvas pixel coordinates of a geographic point.
    pub fn locate(&self, p: &GeoPoint) -> Option<[f64; 2]> {
        let g = geo::latlon_to_pixel(p, self.level).ok()?;
        Some([g.x - self.x0 as f64, g.y - self.y0 as f64])
    }

    fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.image.width + x) * 3) as usize;
        self.image.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn polyline(&mut self, points: &[GeoPoint], rgb: [u8; 3]) {
        let px: Vec<[f64; 2]> = points.iter().filter_map(|p| self.locate(p)).collect();
        let (w, h) = (self.image.width, self.image.height);
        let mut hits = Vec::new();
        draw_polyline_with(w, h, &px, |x, y| hits.push((x, y)));
        for (x, y) in hits {
            self.put(x, y, rgb);
        }
    }

    fn marker(&mut self, p: &GeoPoint, rgb: [u8; 3]) {
        let Some([x, y]) = self.locate(p) else { return };
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (u, v) = (x.floor() as i64 + dx, y.floor() as i64 + dy);
                if u >= 0 && v >= 0 && u < self.image.width as i64 && v < self.image.height as i64 {
                    self.put(u as u32, v as u32, rgb);
                }
            }
        }
    }

    fn border_stations(model: &RoadModel) -> Result<(lanemap::centerline::Centerline, Vec<f64>), String> {
        let c = model.centerline().map_err(|e| e.to_string())?;
        let borders = chunk_borders(c.length(), model.chunk_length);
        Ok((c, borders))
    }

    pub fn chunk_borders(&mut self, model: &RoadModel) -> Result<(), String> {
        let (c, borders) = Self::border_stations(model)?;
        for s in borders {
            let a = c.frame().from_en(c.point_at(s, -BORDER_HALF_WIDTH));
            let b = c.frame().from_en(c.point_at(s, BORDER_HALF_WIDTH));
            self.polyline(&[a, b], BORDER);
        }
        Ok(())
    }

    pub fn trajectory_markers(&mut self, model: &RoadModel) -> Result<(), String> {
        let (c, borders) = Self::border_stations(model)?;
        for s in borders {
            self.marker(&c.frame().from_en(c.point_at(s, 0.0)), MARKER);
        }
        Ok(())
    }

    pub fn model_lines(&mut self, model: &RoadModel, rgb: [u8; 3]) {
        for chunk in &model.chunks {
            for l in chunk.lines.iter().filter(|l| l.kind != LineKind::Trajectory) {
                self.polyline(&l.points, rgb);
            }
        }
    }
}

/// Draws borders of the first model, the truth lines, each prediction and
/// finally the trajectory markers.
pub fn render(src: &TileSource, truth: Option<&RoadModel>, preds: &[RoadModel], level: u8) -> Result<Canvas, String> {
    let models: Vec<&RoadModel> = truth.into_iter().chain(preds.iter()).collect();
    let first = *models.first().ok_or("nothing to render")?;
    let mut canvas = Canvas::for_models(src, &models, level)?;
    canvas.chunk_borders(first)?;
    if let Some(t) = truth {
        canvas.model_lines(t, TRUTH);
    }
    for p in preds {
        canvas.model_lines(p, PRED);
    }
    canvas.trajectory_markers(first)?;
    Ok(canvas)
}
