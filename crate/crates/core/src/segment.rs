//! From probability map to sub-pixel line segments.
//!
//! High-probability cells are grouped into regions, each region is cut into
//! one-pixel slices perpendicular to the trajectory, the brightest sample of
//! every slice is refined with a three-point Gaussian fit, and the resulting
//! peaks are chained into total-least-squares line segments.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classify::ProbabilityMap;
use crate::geo::{self, TilePixel};
use crate::raster::IntensitySource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub threshold: f32,
    pub min_region_cells: usize,
    /// Largest distance in pixels between consecutive peaks of one segment.
    pub max_gap: f64,
    /// Largest RMS distance in pixels of peaks from their fitted line.
    pub max_residual: f64,
    /// Extra pixels sampled beyond the region on each side of a slice.
    pub slice_margin: f64,
    /// A peak must exceed the brighter of the samples this many pixels to
    /// either side by `min_contrast`.
    pub contrast_window: usize,
    pub min_contrast: f64,
    /// A second peak in one slice is kept when its contrast reaches this
    /// fraction of the strongest one.
    pub second_mode_ratio: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_region_cells: 3,
            max_gap: 5.0,
            max_residual: 0.75,
            slice_margin: 2.0,
            contrast_window: 4,
            min_contrast: 30.0,
            second_mode_ratio: 0.8,
        }
    }
}

/// Connected cells of a probability map at or above the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkingRegion {
    pub cells: Vec<(usize, usize)>,
    /// Global pixel centers of the member patches.
    pub centers: Vec<[f64; 2]>,
    pub patch_size: u32,
    pub level: u8,
}

impl MarkingRegion {
    /// Axis-aligned footprint `[x0, y0, x1, y1]` covered by the member patches.
    pub fn footprint(&self) -> [f64; 4] {
        let h = self.patch_size as f64 / 2.0;
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for c in &self.centers {
            b[0] = b[0].min(c[0] - h);
            b[1] = b[1].min(c[1] - h);
            b[2] = b[2].max(c[0] + h);
            b[3] = b[3].max(c[1] + h);
        }
        b
    }

    /// Subset of the region; keeps level and patch size.
    pub fn subset(&self, keep: impl Fn(usize) -> bool) -> MarkingRegion {
        let idx: Vec<usize> = (0..self.cells.len()).filter(|&i| keep(i)).collect();
        MarkingRegion {
            cells: idx.iter().map(|&i| self.cells[i]).collect(),
            centers: idx.iter().map(|&i| self.centers[i]).collect(),
            patch_size: self.patch_size,
            level: self.level,
        }
    }
}

/// 8-connected components of cells with value ≥ `threshold`, in scan order
/// of their first cell; components smaller than `min_cells` are dropped.
pub fn extract_regions(pm: &ProbabilityMap, threshold: f32, min_cells: usize) -> Vec<MarkingRegion> {
    let (w, h) = (pm.cols, pm.rows);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for j in 0..h {
        for i in 0..w {
            if seen[j * w + i] || pm.get(i, j) < threshold {
                continue;
            }
            seen[j * w + i] = true;
            queue.push_back((i, j));
            let mut cells = Vec::new();
            while let Some((ci, cj)) = queue.pop_front() {
                cells.push((ci, cj));
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ni, nj) = (ci as i64 + di, cj as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= w as i64 || nj >= h as i64 {
                            continue;
                        }
                        let k = nj as usize * w + ni as usize;
                        if !seen[k] && pm.get(ni as usize, nj as usize) >= threshold {
                            seen[k] = true;
                            queue.push_back((ni as usize, nj as usize));
                        }
                    }
                }
            }
            if cells.len() >= min_cells {
                cells.sort_by_key(|&(a, b)| (b, a));
                let centers = cells.iter().map(|&(a, b)| pm.center(a, b)).collect();
                out.push(MarkingRegion {
                    cells,
                    centers,
                    patch_size: pm.patch_size,
                    level: pm.level,
                });
            }
        }
    }
    out
}

/// Intensities sampled along one perpendicular: sample `k` sits at
/// `origin + k·perp` in global pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub index: i64,
    pub origin: [f64; 2],
    pub perp: [f64; 2],
    pub values: Vec<f64>,
}

impl Slice {
    pub fn point(&self, k: f64) -> [f64; 2] {
        [self.origin[0] + k * self.perp[0], self.origin[1] + k * self.perp[1]]
    }
}

/// Cuts the region into slices one pixel apart along `dir` (a unit vector
/// in pixel coordinates, pointing along travel). Each slice runs left to
/// right across the region footprint plus `margin` pixels per side.
pub fn slice_region(r: &MarkingRegion, dir: [f64; 2], src: &impl IntensitySource, margin: f64) -> Vec<Slice> {
    if r.centers.is_empty() {
        return Vec::new();
    }
    let norm = dir[0].hypot(dir[1]);
    let d = [dir[0] / norm, dir[1] / norm];
    // Right-hand perpendicular in image coordinates (y grows downwards).
    let p = [-d[1], d[0]];
    let n = r.centers.len() as f64;
    let mean = r.centers.iter().fold([0.0, 0.0], |a, c| [a[0] + c[0] / n, a[1] + c[1] / n]);
    // Anchor on a pixel center so axis-aligned slices hit pixels exactly.
    let o = [mean[0].floor() + 0.5, mean[1].floor() + 0.5];
    let (mut a0, mut a1, mut p0, mut p1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &r.centers {
        let v = [c[0] - o[0], c[1] - o[1]];
        let a = v[0] * d[0] + v[1] * d[1];
        let q = v[0] * p[0] + v[1] * p[1];
        a0 = a0.min(a);
        a1 = a1.max(a);
        p0 = p0.min(q);
        p1 = p1.max(q);
    }
    let half = r.patch_size as f64 / 2.0;
    let k0 = (p0 - half - margin).floor() as i64;
    let k1 = (p1 + half + margin).ceil() as i64;
    let mut out = Vec::new();
    for a in a0.ceil() as i64..=a1.floor() as i64 {
        let base = [o[0] + a as f64 * d[0], o[1] + a as f64 * d[1]];
        let origin = [base[0] + k0 as f64 * p[0], base[1] + k0 as f64 * p[1]];
        let mut values = Vec::with_capacity((k1 - k0 + 1) as usize);
        let mut complete = true;
        for k in 0..=(k1 - k0) {
            match src.sample(origin[0] + k as f64 * p[0], origin[1] + k as f64 * p[1]) {
                Some(v) => values.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            out.push(Slice {
                index: a,
                origin,
                perp: p,
                values,
            });
        }
    }
    out
}

/// Index of the largest value; the first one on ties.
pub fn peak_pixel(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Peak position refined by a parabola through the logarithms of the
/// maximum and its two neighbours (exact for Gaussian profiles). Returns
/// the position and whether the refinement applied; at the slice edge or
/// for a non-concave triple the integer argmax is returned unrefined.
pub fn subpixel_peak(values: &[f64]) -> (f64, bool) {
    let i = peak_pixel(values);
    match subpixel_offset(values, i) {
        Some(d) => (i as f64 + d, true),
        None => (i as f64, false),
    }
}

fn subpixel_offset(values: &[f64], i: usize) -> Option<f64> {
    if i == 0 || i + 1 >= values.len() {
        return None;
    }
    let ln = |v: f64| v.max(1.0).ln();
    let (a, b, c) = (ln(values[i - 1]), ln(values[i]), ln(values[i + 1]));
    let den = a - 2.0 * b + c;
    if den >= 0.0 {
        return None;
    }
    Some((0.5 * (a - c) / den).clamp(-0.5, 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakPoint {
    pub position: TilePixel,
    pub intensity: f64,
    pub slice_index: i64,
    /// Position across the slice in pixels from the slice origin.
    pub offset: f64,
}

fn ridge_contrast(values: &[f64], i: usize, w: usize) -> Option<f64> {
    let left = i.checked_sub(w).map(|k| values[k]);
    let right = values.get(i + w).copied();
    let side = match (left, right) {
        (Some(l), Some(r)) => l.max(r),
        (Some(l), None) => l,
        (None, Some(r)) => r,
        (None, None) => return None,
    };
    Some(values[i] - side)
}

/// Ridge peaks of every slice: the brightest sample when it stands out from
/// its surroundings, plus a second clearly separated ridge of comparable
/// contrast.
pub fn find_peaks(slices: &[Slice], level: u8, cfg: &SegmentConfig) -> Vec<PeakPoint> {
    let w = cfg.contrast_window.max(1);
    let mut out = Vec::new();
    for s in slices {
        let v = &s.values;
        if v.len() < 3 {
            continue;
        }
        let i = peak_pixel(v);
        let Some(c) = ridge_contrast(v, i, w).filter(|c| *c >= cfg.min_contrast) else {
            continue;
        };
        let mut picks = vec![i];
        // Second mode: best local maximum at least `w` samples away.
        let second = (1..v.len() - 1)
            .filter(|&k| k.abs_diff(i) >= w && v[k] >= v[k - 1] && v[k] >= v[k + 1])
            .filter_map(|k| ridge_contrast(v, k, w).map(|c2| (k, c2)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((k, c2)) = second {
            if c2 >= cfg.second_mode_ratio * c && c2 >= cfg.min_contrast {
                picks.push(k);
            }
        }
        for k in picks {
            let off = k as f64 + subpixel_offset(v, k).unwrap_or(0.0);
            let p = s.point(off);
            out.push(PeakPoint {
                position: TilePixel::new(level, p[0], p[1]),
                intensity: v[k],
                slice_index: s.index,
                offset: off,
            });
        }
    }
    out
}

/// Splits peaks into tracks of consistent slice offset so that two markings
/// inside one region are fitted separately. Input order is by slice index.
pub fn split_tracks(peaks: &[PeakPoint], max_jump: f64, max_gap: f64) -> Vec<Vec<PeakPoint>> {
    let mut tracks: Vec<Vec<PeakPoint>> = Vec::new();
    for p in peaks {
        let best = tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                let last = t.last().unwrap();
                last.slice_index < p.slice_index
                    && (p.slice_index - last.slice_index) as f64 <= max_gap
                    && (p.offset - last.offset).abs() <= max_jump
            })
            .min_by(|a, b| {
                let da = (a.1.last().unwrap().offset - p.offset).abs();
                let db = (b.1.last().unwrap().offset - p.offset).abs();
                da.total_cmp(&db)
            })
            .map(|(i, _)| i);
        match best {
            Some(i) => tracks[i].push(p.clone()),
            None => tracks.push(vec![p.clone()]),
        }
    }
    tracks
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSegmentCandidate {
    pub a: TilePixel,
    pub b: TilePixel,
    pub peaks: Vec<PeakPoint>,
    pub rms_residual: f64,
}

impl LineSegmentCandidate {
    pub fn length_px(&self) -> f64 {
        (self.b.x - self.a.x).hypot(self.b.y - self.a.y)
    }
}

/// Running second moments of a point set for total-least-squares fits.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    /// First point; sums are taken relative to it to keep precision with
    /// global pixel coordinates.
    origin: [f64; 2],
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

impl Moments {
    fn add(&mut self, p: [f64; 2]) {
        if self.n == 0.0 {
            self.origin = p;
        }
        let p = [p[0] - self.origin[0], p[1] - self.origin[1]];
        self.n += 1.0;
        self.sx += p[0];
        self.sy += p[1];
        self.sxx += p[0] * p[0];
        self.sxy += p[0] * p[1];
        self.syy += p[1] * p[1];
    }

    fn mean(&self) -> [f64; 2] {
        let m = self.local_mean();
        [self.origin[0] + m[0], self.origin[1] + m[1]]
    }

    fn local_mean(&self) -> [f64; 2] {
        [self.sx / self.n, self.sy / self.n]
    }

    fn cov(&self) -> (f64, f64, f64) {
        let m = self.local_mean();
        (
            self.sxx / self.n - m[0] * m[0],
            self.sxy / self.n - m[0] * m[1],
            self.syy / self.n - m[1] * m[1],
        )
    }

    /// RMS perpendicular distance to the best-fit line.
    fn rms(&self) -> f64 {
        let (a, b, c) = self.cov();
        let lmin = (a + c) / 2.0 - (((a - c) / 2.0).powi(2) + b * b).sqrt();
        lmin.max(0.0).sqrt()
    }

    fn direction(&self) -> [f64; 2] {
        let (a, b, c) = self.cov();
        let th = 0.5 * (2.0 * b).atan2(a - c);
        [th.cos(), th.sin()]
    }
}

/// Greedy chaining of ordered peaks into line segments: a run ends at a gap
/// larger than `max_gap` pixels or when the next peak would raise the RMS
/// residual above `max_residual`. Runs of fewer than three peaks are dropped.
pub fn fit_segments(peaks: &[PeakPoint], max_gap: f64, max_residual: f64) -> Vec<LineSegmentCandidate> {
    let xy = |p: &PeakPoint| [p.position.x, p.position.y];
    let mut out = Vec::new();
    let mut run: Vec<PeakPoint> = Vec::new();
    let mut m = Moments::default();
    let finish = |run: &[PeakPoint], m: &Moments, out: &mut Vec<LineSegmentCandidate>| {
        if run.len() < 3 {
            return;
        }
        let c = m.mean();
        let d = m.direction();
        let proj = |p: [f64; 2]| {
            let t = (p[0] - c[0]) * d[0] + (p[1] - c[1]) * d[1];
            [c[0] + t * d[0], c[1] + t * d[1]]
        };
        let level = run[0].position.level;
        let a = proj(xy(&run[0]));
        let b = proj(xy(run.last().unwrap()));
        out.push(LineSegmentCandidate {
            a: TilePixel::new(level, a[0], a[1]),
            b: TilePixel::new(level, b[0], b[1]),
            peaks: run.to_vec(),
            rms_residual: m.rms(),
        });
    };
    for p in peaks {
        let q = xy(p);
        if let Some(last) = run.last() {
            let l = xy(last);
            let gap = (q[0] - l[0]).hypot(q[1] - l[1]);
            let mut trial = m;
            trial.add(q);
            if gap > max_gap || (run.len() >= 2 && trial.rms() > max_residual) {
                finish(&run, &m, &mut out);
                run.clear();
                m = Moments::default();
            }
        }
        run.push(p.clone());
        m.add(q);
    }
    finish(&run, &m, &mut out);
    out
}

/// Peaks as CSV rows `slice_index,x,y,intensity`.
pub fn peaks_csv(peaks: &[PeakPoint]) -> String {
    let mut s = String::from("slice_index,x,y,intensity\n");
    for p in peaks {
        let _ = writeln!(s, "{},{:.3},{:.3},{:.2}", p.slice_index, p.position.x, p.position.y, p.intensity);
    }
    s
}

/// Segments as a GeoJSON FeatureCollection of LineStrings.
pub fn segments_geojson(segs: &[LineSegmentCandidate]) -> serde_json::Value {
    let features: Vec<serde_json::Value> = segs
        .iter()
        .map(|s| {
            let coords: Vec<[f64; 2]> = [s.a, s.b]
                .iter()
                .map(|p| {
                    let g = geo::unproject_point(p.x, p.y, p.level);
                    [g.lon, g.lat]
                })
                .collect();
            serde_json::json!({
                "type": "Feature",
                "properties": { "rms_residual": s.rms_residual, "peaks": s.peaks.len() },
                "geometry": { "type": "LineString", "coordinates": coords },
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Georef, Raster};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn peak(i: i64, x: f64, y: f64) -> PeakPoint {
        PeakPoint {
            position: TilePixel::new(20, x, y),
            intensity: 200.0,
            slice_index: i,
            offset: x,
        }
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(peak_pixel(&[151.0, 154.0, 150.0]), 1);
        assert_eq!(peak_pixel(&[7.0; 5]), 0);
        assert_eq!(peak_pixel(&[1.0, 2.0, 3.0, 4.0]), 3);
    }

    #[test]
    fn log_parabola_values() {
        assert_eq!(subpixel_peak(&[100.0, 200.0, 100.0]), (1.0, true));
        let (p, ok) = subpixel_peak(&[90.0, 200.0, 110.0]);
        assert!(ok);
        // Closed form evaluated independently.
        let (a, b, c) = (90f64.ln(), 200f64.ln(), 110f64.ln());
        let expect = 0.5 * (a - c) / (a - 2.0 * b + c);
        assert!((p - 1.0 - expect).abs() < 1e-12);
        assert!((p - 1.0 - 0.0719).abs() < 1e-3);
        assert_eq!(subpixel_peak(&[5.0, 4.0, 3.0]), (0.0, false));
        // Zero intensities are treated as one.
        let (z, _) = subpixel_peak(&[0.0, 50.0, 1.0]);
        assert!((z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_parabola_matches_dense_gaussian_fit() {
        // Oracle: least-squares Gaussian centre by dense grid search.
        let v = [90.0f64, 200.0, 110.0];
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=20000 {
            let mu = -0.5 + k as f64 / 20000.0;
            // For fixed mu, the optimal log-amplitude and width follow from
            // fitting ln v = A - (x - mu)^2 / (2 s^2) exactly through 3 points.
            let xs = [-1.0f64, 0.0, 1.0];
            let q: Vec<f64> = xs.iter().map(|x| (x - mu).powi(2)).collect();
            let l: Vec<f64> = v.iter().map(|y| y.ln()).collect();
            let (mq, ml) = (q.iter().sum::<f64>() / 3.0, l.iter().sum::<f64>() / 3.0);
            let slope = q.iter().zip(&l).map(|(a, b)| (a - mq) * (b - ml)).sum::<f64>()
                / q.iter().map(|a| (a - mq).powi(2)).sum::<f64>();
            let err: f64 = q.iter().zip(&l).map(|(a, b)| (ml + slope * (a - mq) - b).powi(2)).sum();
            if err < best.0 {
                best = (err, mu);
            }
        }
        let (p, _) = subpixel_peak(&v);
        assert!((p - 1.0 - best.1).abs() < 1e-3, "{} vs {}", p - 1.0, best.1);
    }

    #[test]
    fn exact_on_sampled_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mu = 5.0 + rng.random_range(-0.49..0.49);
            let s = rng.random_range(0.7..2.0);
            let v: Vec<f64> = (0..11).map(|x| 180.0 * (-((x as f64 - mu).powi(2)) / (2.0 * s * s)).exp()).collect();
            let (p, ok) = subpixel_peak(&v);
            assert!(ok);
            assert!((p - mu).abs() < 1e-9, "{p} vs {mu}");
            assert!((p - peak_pixel(&v) as f64).abs() <= 0.5);
        }
    }

    fn line_image(x_true: f64) -> Raster {
        // Vertical 3-px bright line blurred by a Gaussian, on a 40×40 tile.
        let mut px = Vec::with_capacity(1600);
        for _y in 0..40 {
            for x in 0..40 {
                let c = x as f64 + 0.5;
                let v = 90.0 + 130.0 * (-((c - x_true).powi(2)) / (2.0 * 1.2f64.powi(2))).exp();
                px.push(v.round() as u8);
            }
        }
        Raster::from_gray(40, 40, px).with_georef(Georef { level: 20, x0: 0, y0: 0 })
    }

    fn vertical_region(x: f64) -> MarkingRegion {
        MarkingRegion {
            cells: (0..6).map(|j| (0, j)).collect(),
            centers: (0..6).map(|j| [x, 8.0 + 4.0 * j as f64]).collect(),
            patch_size: 12,
            level: 20,
        }
    }

    #[test]
    fn upward_slices_are_image_rows() {
        let img = line_image(20.3);
        let r = vertical_region(20.0);
        let slices = slice_region(&r, [0.0, -1.0], &img, 2.0);
        assert_eq!(slices.len(), 20);
        for s in &slices {
            let y = (s.origin[1] - 0.5) as u32;
            let x0 = (s.origin[0] - 0.5) as u32;
            assert_eq!(s.perp, [1.0, 0.0]);
            for (k, v) in s.values.iter().enumerate() {
                assert_eq!(*v, img.get(x0 + k as u32, y) as f64);
            }
            assert!(s.values.len() as f64 >= 12.0);
        }
        let peaks = find_peaks(&slices, 20, &SegmentConfig::default());
        assert_eq!(peaks.len(), slices.len());
        for p in &peaks {
            assert!((p.position.x - 20.3).abs() < 0.1, "{}", p.position.x);
        }
        let segs = fit_segments(&peaks, 5.0, 0.75);
        assert_eq!(segs.len(), 1);
        assert!(segs[0].rms_residual < 0.05);
    }

    #[test]
    fn diagonal_slice_count() {
        // 45° line; region cells along it, slices along the same direction.
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let centers: Vec<[f64; 2]> = (0..15).map(|k| [10.0 + 2.0 * k as f64, 10.0 + 2.0 * k as f64]).collect();
        let r = MarkingRegion {
            cells: (0..15).map(|k| (k, k)).collect(),
            centers: centers.clone(),
            patch_size: 12,
            level: 20,
        };
        let img = Raster::new_gray(80, 80, 90).with_georef(Georef { level: 20, x0: 0, y0: 0 });
        let slices = slice_region(&r, [d, d], &img, 2.0);
        let len = 28.0 * 2f64.sqrt();
        assert!((slices.len() as f64 - len).abs() <= 2.0, "{} vs {len}", slices.len());
    }

    #[test]
    fn subpixel_beats_argmax_on_blurred_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut e_sub, mut e_arg) = (0.0, 0.0);
        for _ in 0..200 {
            let p = rng.random_range(0.0..1.0);
            // Box marking of width 2.5 px centred at 10 + p, blurred, pixel-integrated.
            let v: Vec<f64> = (0..21)
                .map(|i| {
                    let mut acc = 0.0;
                    for k in 0..50 {
                        let x = i as f64 + (k as f64 + 0.5) / 50.0;
                        let u = (x - (10.0 + p)) / (1.0 * 2f64.sqrt());
                        let lo = erf(u + 1.25 / 2f64.sqrt());
                        let hi = erf(u - 1.25 / 2f64.sqrt());
                        acc += 90.0 + 130.0 * 0.5 * (lo - hi);
                    }
                    acc / 50.0
                })
                .collect();
            // Pixel i covers [i, i + 1); positions are pixel centers i + 0.5.
            let truth = 10.0 + p - 0.5;
            let (sp, _) = subpixel_peak(&v);
            assert!((sp - peak_pixel(&v) as f64).abs() <= 0.5);
            e_sub += (sp - truth).abs();
            e_arg += (peak_pixel(&v) as f64 - truth).abs();
        }
        assert!(e_sub < e_arg, "{e_sub} vs {e_arg}");
    }

    fn erf(x: f64) -> f64 {
        // Abramowitz-Stegun 7.1.26, adequate for a test profile.
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t + 0.254829592)
                * t
                * (-x * x).exp();
        y.copysign(x)
    }

    #[test]
    fn segments_from_runs() {
        let collinear: Vec<PeakPoint> = (0..20).map(|i| peak(i, 3.0 + 0.1 * i as f64, i as f64)).collect();
        let s = fit_segments(&collinear, 5.0, 0.5);
        assert_eq!(s.len(), 1);
        assert!(s[0].rms_residual < 1e-6);

        let mut gapped: Vec<PeakPoint> = (0..10).map(|i| peak(i, 3.0, i as f64)).collect();
        gapped.extend((30..40).map(|i| peak(i, 3.0, i as f64)));
        assert_eq!(fit_segments(&gapped, 5.0, 0.5).len(), 2);

        let short: Vec<PeakPoint> = (0..2).map(|i| peak(i, 3.0, i as f64)).collect();
        assert!(fit_segments(&short, 5.0, 0.5).is_empty());

        // Arc of radius 500 px over 60 px: sagitta 0.9 px, RMS residual ~0.27 px.
        let arc: Vec<PeakPoint> = (0..=60)
            .map(|i| {
                let y = i as f64 - 30.0;
                peak(i, 500.0 - (500.0f64 * 500.0 - y * y).sqrt(), y)
            })
            .collect();
        let a = fit_segments(&arc, 5.0, 0.5);
        assert_eq!(a.len(), 1);
        assert!((a[0].rms_residual - 0.268).abs() < 0.01, "{}", a[0].rms_residual);

        // Two legs of a sharp corner split on the residual.
        let mut corner: Vec<PeakPoint> = (0..15).map(|i| peak(i, 0.0, i as f64)).collect();
        corner.extend((15..30).map(|i| peak(i, (i - 14) as f64, 14.0)));
        assert!(fit_segments(&corner, 5.0, 0.75).len() >= 2);
    }

    #[test]
    fn fitting_uses_each_peak_at_most_once_and_is_direction_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let peaks: Vec<PeakPoint> = (0..50)
            .map(|i| peak(i, 5.0 + rng.random_range(-0.2..0.2), i as f64 + if i > 25 { 10.0 } else { 0.0 }))
            .collect();
        let segs = fit_segments(&peaks, 5.0, 0.75);
        let used: usize = segs.iter().map(|s| s.peaks.len()).sum();
        assert!(used <= peaks.len());
        let mut ids: Vec<i64> = segs.iter().flat_map(|s| s.peaks.iter().map(|p| p.slice_index)).collect();
        let n = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), n);

        let run: Vec<PeakPoint> = (0..20).map(|i| peak(i, 2.0 + 0.3 * i as f64 + rng.random_range(-0.1..0.1), i as f64)).collect();
        let mut rev = run.clone();
        rev.reverse();
        let f = &fit_segments(&run, 5.0, 0.75)[0];
        let r = &fit_segments(&rev, 5.0, 0.75)[0];
        assert!((f.a.x - r.b.x).abs() < 1e-9 && (f.a.y - r.b.y).abs() < 1e-9);
        assert!((f.b.x - r.a.x).abs() < 1e-9 && (f.rms_residual - r.rms_residual).abs() < 1e-12);
    }

    #[test]
    fn fit_is_precise_at_global_pixel_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x0, y0) = (142_615_000.0, 93_066_000.0);
        let noise: Vec<f64> = (0..200).map(|_| rng.random_range(-0.3..0.3)).collect();
        let at = |dx: f64, dy: f64| -> Vec<PeakPoint> {
            (0..200).map(|i| peak(i, dx + 0.36 * i as f64 + noise[i as usize], dy + i as f64)).collect()
        };
        let near = fit_segments(&at(0.0, 0.0), 5.0, 0.75);
        let far = fit_segments(&at(x0, y0), 5.0, 0.75);
        assert_eq!((near.len(), far.len()), (1, 1));
        assert!((near[0].rms_residual - far[0].rms_residual).abs() < 1e-6);
        assert!((far[0].a.x - x0 - near[0].a.x).abs() < 1e-6);
        // Uniform noise on ±0.3 across the line: RMS about 0.3/sqrt(3)·cos(angle).
        assert!((far[0].rms_residual - 0.16).abs() < 0.03, "{}", far[0].rms_residual);
    }

    fn map_from(cols: usize, rows: usize, on: &[(usize, usize)]) -> ProbabilityMap {
        let mut values = vec![0.0; cols * rows];
        for &(i, j) in on {
            values[j * cols + i] = 0.9;
        }
        ProbabilityMap {
            level: 20,
            stride: 4,
            patch_size: 12,
            mx0: 0,
            my0: 0,
            cols,
            rows,
            values,
        }
    }

    #[test]
    fn regions_are_8_connected() {
        assert!(extract_regions(&map_from(10, 10, &[]), 0.5, 3).is_empty());
        let blobs = map_from(10, 10, &[(0, 0), (1, 1), (2, 2), (6, 6), (7, 6), (6, 7), (9, 0)]);
        let r = extract_regions(&blobs, 0.5, 3);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].cells.len(), 3);
        let fp = r[1].footprint();
        assert_eq!(fp, [6.0 + 24.0 - 6.0, 6.0 + 24.0 - 6.0, 6.0 + 28.0 + 6.0, 6.0 + 28.0 + 6.0]);
    }

    #[test]
    fn merged_markings_split_into_tracks() {
        // Two parallel bright lines 8 px apart inside one slice range.
        let mut px = vec![90u8; 40 * 40];
        for y in 0..40 {
            px[y * 40 + 14] = 220;
            px[y * 40 + 22] = 210;
        }
        let img = Raster::from_gray(40, 40, px).with_georef(Georef { level: 20, x0: 0, y0: 0 });
        let r = vertical_region(18.0);
        let slices = slice_region(&r, [0.0, -1.0], &img, 2.0);
        let peaks = find_peaks(&slices, 20, &SegmentConfig::default());
        assert_eq!(peaks.len(), 2 * slices.len());
        let tracks = split_tracks(&peaks, 2.0, 5.0);
        assert_eq!(tracks.len(), 2);
        assert!(peaks_csv(&peaks).lines().count() == peaks.len() + 1);
    }
}
