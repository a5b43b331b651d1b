//! Arc-length / lateral-offset frame along a trajectory polyline.
//!
//! Every metric computation downstream of the imagery (chunking, grouping,
//! scoring) happens in this frame: `s` is the distance travelled along the
//! trajectory and `t` the signed perpendicular offset, negative to the left
//! of the travel direction.

use std::collections::HashMap;

use crate::geo::{GeoPoint, LocalFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Station {
    pub s: f64,
    pub t: f64,
}

const CELL: f64 = 25.0;

#[derive(Debug, Clone)]
pub struct Centerline {
    frame: LocalFrame,
    pts: Vec<[f64; 2]>,
    cum: Vec<f64>,
    grid: HashMap<(i64, i64), Vec<usize>>,
}

impl Centerline {
    /// Builds the frame anchored at the first point. Consecutive duplicate
    /// points are dropped; `None` when fewer than two distinct points remain.
    pub fn new(points: &[GeoPoint]) -> Option<Self> {
        let first = points.first()?;
        Self::with_frame(LocalFrame::new(*first), points)
    }

    pub fn with_frame(frame: LocalFrame, points: &[GeoPoint]) -> Option<Self> {
        let en: Vec<[f64; 2]> = points.iter().map(|p| frame.to_en(p)).collect();
        Self::from_en(frame, en)
    }

    pub fn from_en(frame: LocalFrame, en: Vec<[f64; 2]>) -> Option<Self> {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(en.len());
        for p in en {
            if pts.last().is_none_or(|q| dist(*q, p) > 1e-9) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return None;
        }
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, w) in pts.windows(2).enumerate() {
            let (lo, hi) = (cell_of([w[0][0].min(w[1][0]), w[0][1].min(w[1][1])]), cell_of([w[0][0].max(w[1][0]), w[0][1].max(w[1][1])]));
            for cx in lo.0..=hi.0 {
                for cy in lo.1..=hi.1 {
                    grid.entry((cx, cy)).or_default().push(i);
                }
            }
        }
        Some(Self { frame, pts, cum, grid })
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn points_en(&self) -> &[[f64; 2]] {
        &self.pts
    }

    pub fn project(&self, p: &GeoPoint) -> Station {
        self.project_en(self.frame.to_en(p))
    }

    /// Nearest-point projection. Points beyond either end are projected onto
    /// the extension of the end segment, so `s` may fall outside `[0, length]`.
    pub fn project_en(&self, p: [f64; 2]) -> Station {
        let seg = self.nearest_segment(p);
        let last = self.pts.len() - 2;
        let (a, b) = (self.pts[seg], self.pts[seg + 1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = self.cum[seg + 1] - self.cum[seg];
        let mut u = ((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / (len * len);
        if seg != 0 {
            u = u.max(0.0);
        }
        if seg != last {
            u = u.min(1.0);
        }
        let foot = [a[0] + u * d[0], a[1] + u * d[1]];
        let right = [d[1] / len, -d[0] / len];
        let v = [p[0] - foot[0], p[1] - foot[1]];
        let mut t = v[0] * right[0] + v[1] * right[1];
        // At an interior vertex the foot may not be perpendicular; keep the
        // true distance with the side given by the chosen segment.
        let off = dist(p, foot);
        if (off - t.abs()).abs() > 1e-9 {
            t = off.copysign(if t == 0.0 { 1.0 } else { t });
        }
        Station {
            s: self.cum[seg] + u * len,
            t,
        }
    }

    fn nearest_segment(&self, p: [f64; 2]) -> usize {
        let c = cell_of(p);
        let mut best = (f64::INFINITY, usize::MAX);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = self.grid.get(&(c.0 + dx, c.1 + dy)) {
                    for &i in list {
                        let d = seg_dist(p, self.pts[i], self.pts[i + 1]);
                        if d < best.0 || (d == best.0 && i < best.1) {
                            best = (d, i);
                        }
                    }
                }
            }
        }
        if best.0 <= CELL {
            return best.1;
        }
        let mut best = (f64::INFINITY, 0usize);
        for i in 0..self.pts.len() - 1 {
            let d = seg_dist(p, self.pts[i], self.pts[i + 1]);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn segment_at(&self, s: f64) -> usize {
        match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        }
    }

    /// Unit travel direction `[east, north]` at arc length `s`.
    pub fn direction_at(&self, s: f64) -> [f64; 2] {
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        [(b[0] - a[0]) / len, (b[1] - a[1]) / len]
    }

    /// Point at station `(s, t)`; extrapolates linearly past the ends.
    pub fn point_at(&self, s: f64, t: f64) -> [f64; 2] {
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let len = self.cum[i + 1] - self.cum[i];
        let u = (s - self.cum[i]) / len;
        let d = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        [a[0] + u * (b[0] - a[0]) + t * d[1], a[1] + u * (b[1] - a[1]) - t * d[0]]
    }

    pub fn geo_at(&self, s: f64, t: f64) -> GeoPoint {
        self.frame.from_en(self.point_at(s, t))
    }

    /// Trajectory polyline between `s0 < s1` including interior vertices.
    pub fn sub_polyline(&self, s0: f64, s1: f64) -> Vec<[f64; 2]> {
        let mut out = vec![self.point_at(s0, 0.0)];
        for (i, c) in self.cum.iter().enumerate() {
            if *c > s0 + 1e-9 && *c < s1 - 1e-9 {
                out.push(self.pts[i]);
            }
        }
        out.push(self.point_at(s1, 0.0));
        out
    }
}

fn cell_of(p: [f64; 2]) -> (i64, i64) {
    ((p[0] / CELL).floor() as i64, (p[1] / CELL).floor() as i64)
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub(crate) fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let l2 = d[0] * d[0] + d[1] * d[1];
    if l2 == 0.0 {
        return dist(p, a);
    }
    let u = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / l2).clamp(0.0, 1.0);
    dist(p, [a[0] + u * d[0], a[1] + u * d[1]])
}
