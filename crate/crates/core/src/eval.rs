//! Model-level accuracy of a predicted road model against ground truth.
//!
//! Lines are paired per chunk by a minimum-cost assignment on the absolute
//! signed lateral distance. A pair is a correct detection when the kinds
//! agree and the distance is below the threshold `T_d`. Geometry quality is
//! the per-chunk spread of signed distances relative to the largest spread
//! possible within the threshold, so a constant offset between the two
//! models is not penalized.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

use crate::centerline::{Centerline, Station};
use crate::geo::GeoPoint;
use crate::link::chunk_ranges;
use crate::roadmodel::{partition_lines, BoundaryLine, LineKind, ModelError, RoadModel};

pub const DEFAULT_T_D: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("distance threshold must be positive, got {0}")]
    Threshold(f64),
    #[error("trajectories do not align: {0}")]
    Alignment(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Offset of `line` where it crosses the perpendicular at arc length `s`.
fn offset_at(st: &[Station], s: f64) -> Option<f64> {
    st.windows(2).find_map(|w| {
        let (a, b) = (w[0], w[1]);
        let (lo, hi) = if a.s <= b.s { (a.s, b.s) } else { (b.s, a.s) };
        if s < lo || s > hi {
            return None;
        }
        if hi - lo < 1e-12 {
            return Some((a.t + b.t) / 2.0);
        }
        let u = (s - a.s) / (b.s - a.s);
        Some(a.t + u * (b.t - a.t))
    })
}

fn stations(points: &[GeoPoint], center: &Centerline) -> Vec<Station> {
    points.iter().map(|p| center.project(p)).collect()
}

fn s_extent(st: &[Station]) -> (f64, f64) {
    st.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.s), b.max(p.s)))
}

fn signed_distance_st(truth: &[Station], pred: &[Station], mid: f64) -> f64 {
    if let (Some(a), Some(b)) = (offset_at(truth, mid), offset_at(pred, mid)) {
        return b - a;
    }
    let (t0, t1) = s_extent(truth);
    let (p0, p1) = s_extent(pred);
    let (lo, hi) = (t0.max(p0), t1.min(p1));
    if hi > lo {
        let n = 20;
        let mut acc = 0.0;
        let mut k = 0;
        for i in 0..n {
            let s = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
            if let (Some(a), Some(b)) = (offset_at(truth, s), offset_at(pred, s)) {
                acc += b - a;
                k += 1;
            }
        }
        if k > 0 {
            return acc / k as f64;
        }
    }
    let mean = |st: &[Station]| st.iter().map(|p| p.t).sum::<f64>() / st.len() as f64;
    mean(pred) - mean(truth)
}

/// Lateral offset of `pred` relative to `truth` in meters, negative when
/// `pred` lies left of `truth`, measured on the perpendicular through the
/// middle of the chunk `range`. Lines that do not cross it are compared by
/// their mean offset over the common extent.
pub fn signed_distance(truth: &BoundaryLine, pred: &BoundaryLine, center: &Centerline, range: (f64, f64)) -> f64 {
    let mid = (range.0 + range.1) / 2.0;
    signed_distance_st(&stations(&truth.points, center), &stations(&pred.points, center), mid)
}

/// Minimum-cost assignment pairing `min(rows, cols)` rows with distinct
/// columns. Returns `(row, col)` pairs sorted by row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    let m = cost.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let mut out: Vec<(usize, usize)> = min_cost_assignment(&t).into_iter().map(|(j, i)| (i, j)).collect();
        out.sort_unstable();
        return out;
    }
    // Shortest augmenting paths with potentials, 1-based with a dummy column 0.
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let (mut p, mut way) = (vec![0usize; m + 1], vec![0usize; m + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinePair {
    pub truth: usize,
    pub pred: usize,
    /// Signed distance of the predicted line from the truth line, meters.
    pub d: f64,
}

/// Optimal pairing of one chunk's lines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMatching {
    pub chunk_id: u64,
    pub truth_kinds: Vec<LineKind>,
    pub pred_kinds: Vec<LineKind>,
    pub pairs: Vec<LinePair>,
    pub unmatched_truth: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl PairMatching {
    pub fn total_abs_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.d.abs()).sum()
    }
}

/// Pairs as many lines as possible, minimizing the sum of |d|, given the
/// signed distance matrix `d[truth][pred]`.
pub fn match_distances(chunk_id: u64, truth_kinds: Vec<LineKind>, pred_kinds: Vec<LineKind>, d: &[Vec<f64>]) -> PairMatching {
    let cost: Vec<Vec<f64>> = d.iter().map(|r| r.iter().map(|x| x.abs()).collect()).collect();
    let pairs: Vec<LinePair> = min_cost_assignment(&cost)
        .into_iter()
        .map(|(i, j)| LinePair {
            truth: i,
            pred: j,
            d: d[i][j],
        })
        .collect();
    let unmatched_truth = (0..truth_kinds.len()).filter(|i| !pairs.iter().any(|p| p.truth == *i)).collect();
    let unmatched_pred = (0..pred_kinds.len()).filter(|j| !pairs.iter().any(|p| p.pred == *j)).collect();
    PairMatching {
        chunk_id,
        truth_kinds,
        pred_kinds,
        pairs,
        unmatched_truth,
        unmatched_pred,
    }
}

/// Optimal pairing of the lines of one chunk spanning `range`.
pub fn match_lines(
    chunk_id: u64,
    truth: &[BoundaryLine],
    pred: &[BoundaryLine],
    center: &Centerline,
    range: (f64, f64),
) -> PairMatching {
    let mid = (range.0 + range.1) / 2.0;
    let ts: Vec<Vec<Station>> = truth.iter().map(|l| stations(&l.points, center)).collect();
    let ps: Vec<Vec<Station>> = pred.iter().map(|l| stations(&l.points, center)).collect();
    let d: Vec<Vec<f64>> = ts.iter().map(|t| ps.iter().map(|p| signed_distance_st(t, p, mid)).collect()).collect();
    match_distances(
        chunk_id,
        truth.iter().map(|l| l.kind).collect(),
        pred.iter().map(|l| l.kind).collect(),
        &d,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FunctionScores {
    pub correct_detections: usize,
    pub n_truth: usize,
    pub n_pred: usize,
    /// Correct detections per ground-truth line; `None` without truth lines.
    pub frac_of_truth_matched: Option<f64>,
    /// Correct detections per predicted line; `None` without predictions.
    pub frac_of_pred_matched: Option<f64>,
}

impl FunctionScores {
    /// Ratio over ground-truth lines, the denominator the metric calls precision.
    pub fn precision_function(&self) -> Option<f64> {
        self.frac_of_truth_matched
    }

    /// Ratio over predicted lines, the denominator the metric calls recall.
    pub fn recall_function(&self) -> Option<f64> {
        self.frac_of_pred_matched
    }
}

pub fn is_correct(m: &PairMatching, p: &LinePair, t_d: f64) -> bool {
    m.truth_kinds[p.truth] == m.pred_kinds[p.pred] && p.d.abs() < t_d
}

pub fn function_scores(matchings: &[PairMatching], t_d: f64) -> FunctionScores {
    let correct = matchings
        .iter()
        .map(|m| m.pairs.iter().filter(|p| is_correct(m, p, t_d)).count())
        .sum();
    let n_truth = matchings.iter().map(|m| m.truth_kinds.len()).sum();
    let n_pred = matchings.iter().map(|m| m.pred_kinds.len()).sum();
    let ratio = |n: usize| (n > 0).then(|| correct as f64 / n as f64);
    FunctionScores {
        correct_detections: correct,
        n_truth,
        n_pred,
        frac_of_truth_matched: ratio(n_truth),
        frac_of_pred_matched: ratio(n_pred),
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standard deviation of `floor(n/2)` copies of `t_d` and `ceil(n/2)` copies
/// of `-t_d`: the largest spread of `n` distances within the threshold.
pub fn sigma_max(n: usize, t_d: f64) -> f64 {
    assert!(n >= 1, "sigma_max needs at least one pair");
    let mut xs = vec![t_d; n / 2];
    xs.extend(std::iter::repeat_n(-t_d, n.div_ceil(2)));
    population_std(&xs)
}

/// Signed distances entering the geometry score: matched pairs with
/// `|d| <= t_d`.
pub fn geometry_distances(m: &PairMatching, t_d: f64) -> Vec<f64> {
    m.pairs.iter().map(|p| p.d).filter(|d| d.abs() <= t_d).collect()
}

/// Per-chunk geometry term `1 - sigma / sigma_max(n)`, clamped to [0, 1];
/// 1 for a single pair, `None` without pairs.
pub fn chunk_geometry(ds: &[f64], t_d: f64) -> Option<f64> {
    match ds.len() {
        0 => None,
        1 => Some(1.0),
        n => Some((1.0 - population_std(ds) / sigma_max(n, t_d)).clamp(0.0, 1.0)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometryScores {
    /// Mean signed distance; `None` without pairs.
    pub shift: Option<f64>,
    pub performance_geometry: Option<f64>,
    pub median_abs_distance: Option<f64>,
    pub pairs: usize,
}

pub fn geometry_scores(matchings: &[PairMatching], t_d: f64) -> GeometryScores {
    let per_chunk: Vec<Vec<f64>> = matchings.iter().map(|m| geometry_distances(m, t_d)).collect();
    let all: Vec<f64> = per_chunk.iter().flatten().copied().collect();
    if all.is_empty() {
        return GeometryScores {
            shift: None,
            performance_geometry: None,
            median_abs_distance: None,
            pairs: 0,
        };
    }
    let terms: Vec<f64> = per_chunk.iter().filter_map(|ds| chunk_geometry(ds, t_d)).collect();
    let mut abs: Vec<f64> = all.iter().map(|d| d.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let median = if abs.len() % 2 == 1 {
        abs[abs.len() / 2]
    } else {
        (abs[abs.len() / 2 - 1] + abs[abs.len() / 2]) / 2.0
    };
    GeometryScores {
        shift: Some(all.iter().sum::<f64>() / all.len() as f64),
        performance_geometry: Some(terms.iter().sum::<f64>() / terms.len() as f64),
        median_abs_distance: Some(median),
        pairs: all.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairReport {
    pub truth_id: Uuid,
    pub pred_id: Uuid,
    pub truth_kind: LineKind,
    pub pred_kind: LineKind,
    pub d: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkReport {
    pub chunk_id: u64,
    pub n_truth: usize,
    pub n_pred: usize,
    pub correct: usize,
    pub pairs: Vec<PairReport>,
    pub geometry: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "T_d")]
    pub t_d: f64,
    pub correct_detections: usize,
    pub n_truth: usize,
    pub n_pred: usize,
    pub frac_of_truth_matched: Option<f64>,
    pub frac_of_pred_matched: Option<f64>,
    pub precision_function: Option<f64>,
    pub recall_function: Option<f64>,
    pub shift: Option<f64>,
    pub performance_geometry: Option<f64>,
    pub median_abs_distance: Option<f64>,
    pub chunks: Vec<ChunkReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let rows = [
            ("T_d (m)", format!("{:.3}", self.t_d)),
            ("truth lines", self.n_truth.to_string()),
            ("predicted lines", self.n_pred.to_string()),
            ("correct detections", self.correct_detections.to_string()),
            ("correct / truth", f(self.frac_of_truth_matched)),
            ("correct / predicted", f(self.frac_of_pred_matched)),
            ("shift (m)", f(self.shift)),
            ("geometry performance", f(self.performance_geometry)),
            ("median |d| (m)", f(self.median_abs_distance)),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<22} {v}");
        }
        s
    }

    /// One row per chunk: id, line counts, correct detections, geometry term.
    pub fn chunks_csv(&self) -> String {
        let mut s = String::from("chunk_id,n_truth,n_pred,correct,pairs,geometry\n");
        for c in &self.chunks {
            let g = c.geometry.map_or(String::new(), |g| format!("{g:.6}"));
            let _ = writeln!(s, "{},{},{},{},{},{}", c.chunk_id, c.n_truth, c.n_pred, c.correct, c.pairs.len(), g);
        }
        s
    }
}

fn boundary(c: &crate::roadmodel::Chunk) -> Vec<BoundaryLine> {
    c.boundary_lines().cloned().collect()
}

/// Splits the predicted lines along the truth partition. Fragments of one
/// line within a truth chunk are joined; slivers shorter than `min_len`
/// meters of arc length are dropped.
fn rechunk(pred: &RoadModel, center: &Centerline, chunk_length: f64, n: usize, min_len: f64) -> Vec<Vec<BoundaryLine>> {
    let mut out: Vec<BTreeMap<(usize, Uuid), BoundaryLine>> = vec![BTreeMap::new(); n];
    let mut order = 0usize;
    let mut first_seen: BTreeMap<Uuid, usize> = BTreeMap::new();
    for c in &pred.chunks {
        let lines = boundary(c);
        for (k, frags) in partition_lines(&lines, center, chunk_length).into_iter().enumerate().take(n) {
            for f in frags {
                let st = stations(&f.points, center);
                let (a, b) = s_extent(&st);
                if b - a < min_len {
                    continue;
                }
                let rank = *first_seen.entry(f.line_id).or_insert_with(|| {
                    order += 1;
                    order
                });
                match out[k].get_mut(&(rank, f.line_id)) {
                    Some(l) => {
                        for p in f.points {
                            let last = l.points.last().unwrap();
                            if last.lat != p.lat || last.lon != p.lon {
                                l.points.push(p);
                            }
                        }
                    }
                    None => {
                        out[k].insert((rank, f.line_id), f);
                    }
                }
            }
        }
    }
    out.into_iter().map(|m| m.into_values().collect()).collect()
}

/// Scores `pred` against `truth`. Predicted lines are re-chunked onto the
/// truth partition along the truth trajectory. Fails when the predicted
/// trajectory starts, ends or strays more than one chunk length away.
pub fn evaluate(truth: &RoadModel, pred: &RoadModel, t_d: f64) -> Result<EvalReport, EvalError> {
    if !(t_d > 0.0) {
        return Err(EvalError::Threshold(t_d));
    }
    let center = truth.centerline()?;
    let len = center.length();
    let l = truth.chunk_length;
    let pred_traj = pred.trajectory_points();
    if pred_traj.len() < 2 {
        return Err(EvalError::Alignment("prediction has no trajectory".into()));
    }
    let a = center.project(&pred_traj[0]);
    let b = center.project(pred_traj.last().unwrap());
    if a.s.abs() > l || (b.s - len).abs() > l {
        return Err(EvalError::Alignment(format!(
            "predicted trajectory spans {:.1}..{:.1} m of a {:.1} m truth trajectory",
            a.s, b.s, len
        )));
    }
    if let Some(p) = pred_traj.iter().map(|p| center.project(p)).find(|st| st.t.abs() > l) {
        return Err(EvalError::Alignment(format!("predicted trajectory is {:.1} m off the truth", p.t)));
    }
    let ranges = chunk_ranges(len, l);
    let n = truth.chunks.len().min(ranges.len());
    let pred_lines = rechunk(pred, &center, l, n, (0.1 * l).min(0.5));
    let matchings: Vec<PairMatching> = (0..n)
        .map(|k| match_lines(truth.chunks[k].id, &boundary(&truth.chunks[k]), &pred_lines[k], &center, ranges[k]))
        .collect();
    let fs = function_scores(&matchings, t_d);
    let gs = geometry_scores(&matchings, t_d);
    let chunks = matchings
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let tl = boundary(&truth.chunks[k]);
            let pairs: Vec<PairReport> = m
                .pairs
                .iter()
                .map(|p| PairReport {
                    truth_id: tl[p.truth].line_id,
                    pred_id: pred_lines[k][p.pred].line_id,
                    truth_kind: m.truth_kinds[p.truth],
                    pred_kind: m.pred_kinds[p.pred],
                    d: p.d,
                    correct: is_correct(m, p, t_d),
                })
                .collect();
            ChunkReport {
                chunk_id: m.chunk_id,
                n_truth: m.truth_kinds.len(),
                n_pred: m.pred_kinds.len(),
                correct: pairs.iter().filter(|p| p.correct).count(),
                pairs,
                geometry: chunk_geometry(&geometry_distances(m, t_d), t_d),
            }
        })
        .collect();
    Ok(EvalReport {
        t_d,
        correct_detections: fs.correct_detections,
        n_truth: fs.n_truth,
        n_pred: fs.n_pred,
        frac_of_truth_matched: fs.frac_of_truth_matched,
        frac_of_pred_matched: fs.frac_of_pred_matched,
        precision_function: fs.precision_function(),
        recall_function: fs.recall_function(),
        shift: gs.shift,
        performance_geometry: gs.performance_geometry,
        median_abs_distance: gs.median_abs_distance,
        chunks,
    })
}

/// Copy of `model` with every non-trajectory line moved `offset` meters to
/// the right of travel along `center`.
pub fn shift_lines(model: &RoadModel, center: &Centerline, offset: f64) -> RoadModel {
    let mut out = model.clone();
    for c in &mut out.chunks {
        for l in &mut c.lines {
            if l.kind == LineKind::Trajectory {
                continue;
            }
            for p in &mut l.points {
                let st = center.project(p);
                *p = center.geo_at(st.s, st.t + offset);
            }
        }
    }
    out
}
