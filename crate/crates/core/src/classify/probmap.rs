//! Patch-level marking probabilities on a globally aligned grid.

use rayon::prelude::*;

use super::features::compute_features;
use super::forest::ForestModel;
use crate::raster::{Mask, Raster};

/// Cell `(i, j)` is the patch centered at global pixel position
/// `(offset + (mx0 + i)·stride, offset + (my0 + j)·stride)`, where
/// `offset = patch_size / 2`. Grids of one level, stride and patch size line
/// up exactly across tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub level: u8,
    pub stride: u32,
    pub patch_size: u32,
    pub mx0: i64,
    pub my0: i64,
    pub cols: usize,
    pub rows: usize,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn empty(level: u8, stride: u32, patch_size: u32) -> Self {
        Self {
            level,
            stride,
            patch_size,
            mx0: 0,
            my0: 0,
            cols: 0,
            rows: 0,
            values: Vec::new(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[j * self.cols + i]
    }

    /// Value at global grid index `(mx, my)`, zero outside the map.
    pub fn at_grid(&self, mx: i64, my: i64) -> f32 {
        let (i, j) = (mx - self.mx0, my - self.my0);
        if i < 0 || j < 0 || i >= self.cols as i64 || j >= self.rows as i64 {
            return 0.0;
        }
        self.get(i as usize, j as usize)
    }

    /// Global pixel coordinates of the patch center of cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        let off = (self.patch_size / 2) as f64;
        let s = self.stride as f64;
        [off + (self.mx0 + i as i64) as f64 * s, off + (self.my0 + j as i64) as f64 * s]
    }

    /// Merges maps with identical level, stride and patch size; overlapping
    /// cells keep the larger value.
    pub fn stitch(maps: &[ProbabilityMap]) -> Option<ProbabilityMap> {
        let first = maps.iter().find(|m| m.cols > 0 && m.rows > 0)?;
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for m in maps.iter().filter(|m| m.cols > 0 && m.rows > 0) {
            assert!(m.level == first.level && m.stride == first.stride && m.patch_size == first.patch_size);
            x0 = x0.min(m.mx0);
            y0 = y0.min(m.my0);
            x1 = x1.max(m.mx0 + m.cols as i64);
            y1 = y1.max(m.my0 + m.rows as i64);
        }
        let (cols, rows) = ((x1 - x0) as usize, (y1 - y0) as usize);
        let mut values = vec![0f32; cols * rows];
        for m in maps.iter().filter(|m| m.cols > 0 && m.rows > 0) {
            for j in 0..m.rows {
                let row = (m.my0 - y0) as usize + j;
                for i in 0..m.cols {
                    let col = (m.mx0 - x0) as usize + i;
                    let v = &mut values[row * cols + col];
                    *v = v.max(m.get(i, j));
                }
            }
        }
        Some(ProbabilityMap {
            level: first.level,
            stride: first.stride,
            patch_size: first.patch_size,
            mx0: x0,
            my0: y0,
            cols,
            rows,
            values,
        })
    }
}

/// Evaluates the model on every grid patch that fits inside `image` and
/// whose center pixel is in `surface`; other cells are 0. `inner`, in local
/// pixels `(x, y, w, h)`, restricts the output to centers inside that box.
pub fn predict_map(
    image: &Raster,
    surface: &Mask,
    model: &ForestModel,
    stride: u32,
    inner: Option<(u32, u32, u32, u32)>,
) -> ProbabilityMap {
    let g = image.georef.expect("probability maps need a georeferenced image");
    let size = model.patch_size as i64;
    let half = size / 2;
    let s = stride as i64;
    let (bx, by, bw, bh) = inner.unwrap_or((0, 0, image.width, image.height));
    // Global grid indices m with patch [off + m·s - half, + size) inside the
    // image and center inside the inner box.
    let range = |origin: i64, extent: u32, b0: u32, blen: u32| -> (i64, i64) {
        let c_min = (origin + half).max(origin + b0 as i64);
        let c_max = (origin + extent as i64 - size + half).min(origin + (b0 + blen) as i64 - 1);
        let m_min = (c_min - half).div_euclid(s) + i64::from((c_min - half).rem_euclid(s) != 0);
        let m_max = (c_max - half).div_euclid(s);
        (m_min, m_max)
    };
    let (mx0, mx1) = range(g.x0, image.width, bx, bw);
    let (my0, my1) = range(g.y0, image.height, by, bh);
    if mx1 < mx0 || my1 < my0 {
        return ProbabilityMap::empty(g.level, stride, model.patch_size as u32);
    }
    let cols = (mx1 - mx0 + 1) as usize;
    let rows = (my1 - my0 + 1) as usize;
    let usize_ = size as usize;
    let values: Vec<f32> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut patch = vec![0u8; usize_ * usize_];
            (0..cols)
                .map(|i| {
                    let cx = half + (mx0 + i as i64) * s - g.x0;
                    let cy = half + (my0 + j as i64) * s - g.y0;
                    if !surface.get(cx as u32, cy as u32) {
                        return 0.0;
                    }
                    let (px, py) = ((cx - half) as u32, (cy - half) as u32);
                    for r in 0..usize_ {
                        for c in 0..usize_ {
                            patch[r * usize_ + c] = image.get(px + c as u32, py + r as u32);
                        }
                    }
                    let f = compute_features(&patch, usize_, model.feature_kind);
                    model.predict_unchecked(&f)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    ProbabilityMap {
        level: g.level,
        stride,
        patch_size: model.patch_size as u32,
        mx0,
        my0,
        cols,
        rows,
        values,
    }
}
