//! Chunk-wise grouping of line segments into lane boundaries.
//!
//! Segments are reduced to their station interval along the trajectory and
//! swept chunk by chunk into groups of similar lateral offset. Each group is
//! labeled solid or dashed by how much of its road span it covers, gaps are
//! bridged with synthetic members, and the result becomes a road model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centerline::{seg_dist, Centerline};
use crate::geo::{self, LocalFrame};
use crate::roadmodel::{chunk_borders, chunk_road, BoundaryLine, LineKind, ModelError, RoadModel};
use crate::segment::LineSegmentCandidate;
use crate::synth::{random_uuid, sub_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineFunction {
    Solid,
    Dashed,
    Ignored,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TightnessConfig {
    /// Largest offset difference in meters between a segment and a group.
    pub distance_threshold: f64,
    /// A group accepts segments only this many chunks past its last member.
    pub search_range: u64,
    pub dashed_ratio_max: f64,
    pub solid_ratio_min: f64,
    pub noise_ratio_min: f64,
    /// When set, only the groups nearest to the boundary offsets of this many
    /// lanes survive.
    pub expected_lane_count: Option<usize>,
    pub lane_width: f64,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 1.0,
            search_range: 3,
            dashed_ratio_max: 0.4,
            solid_ratio_min: 0.8,
            noise_ratio_min: 0.1,
            expected_lane_count: None,
            lane_width: 3.5,
        }
    }
}

impl TightnessConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.distance_threshold > 0.0) {
            return Err("distance_threshold must be positive".into());
        }
        if !(0.0 < self.noise_ratio_min
            && self.noise_ratio_min <= self.dashed_ratio_max
            && self.dashed_ratio_max < self.solid_ratio_min
            && self.solid_ratio_min <= 1.0)
        {
            return Err("need 0 < noise_ratio_min <= dashed_ratio_max < solid_ratio_min <= 1".into());
        }
        if self.expected_lane_count == Some(0) || !(self.lane_width > 0.0) {
            return Err("expected_lane_count and lane_width must be positive".into());
        }
        Ok(())
    }
}

/// A segment in trajectory coordinates: arc length `s` and signed offset `t`
/// (negative left) at both ends, with `s0 <= s1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub chunk: u64,
    pub s0: f64,
    pub t0: f64,
    pub s1: f64,
    pub t1: f64,
    pub synthetic: bool,
}

impl GroupMember {
    pub fn offset(&self) -> f64 {
        (self.t0 + self.t1) / 2.0
    }

    pub fn along(&self) -> f64 {
        self.s1 - self.s0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineGroup {
    pub id: usize,
    pub members: BTreeMap<u64, Vec<GroupMember>>,
    /// Running mean of member offsets in meters.
    pub mean_offset: f64,
    pub count: usize,
    pub function: LineFunction,
    /// Covered fraction of the group's road span, set by [`classify_groups`].
    pub ratio: f64,
}

impl LineGroup {
    pub fn first_chunk(&self) -> Option<u64> {
        self.members.keys().next().copied()
    }

    pub fn last_chunk(&self) -> Option<u64> {
        self.members.keys().next_back().copied()
    }

    /// Length-weighted mean offset of the members in `chunk`.
    pub fn chunk_offset(&self, chunk: u64) -> Option<f64> {
        let m = self.members.get(&chunk)?;
        let w: f64 = m.iter().map(|x| x.along().max(1e-6)).sum();
        Some(m.iter().map(|x| x.offset() * x.along().max(1e-6)).sum::<f64>() / w)
    }
}

/// Arc-length interval of every chunk of a trajectory of `length` meters.
pub fn chunk_ranges(length: f64, chunk_length: f64) -> Vec<(f64, f64)> {
    let borders = chunk_borders(length, chunk_length);
    let mut edges = vec![0.0];
    edges.extend(borders);
    edges.push(length);
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

fn chunk_of(s: f64, ranges: &[(f64, f64)]) -> usize {
    ranges.iter().position(|r| s < r.1).unwrap_or(ranges.len() - 1)
}

fn endpoints_en(seg: &LineSegmentCandidate, frame: &LocalFrame) -> [[f64; 2]; 2] {
    [seg.a, seg.b].map(|p| frame.to_en(&geo::unproject_point(p.x, p.y, p.level)))
}

/// Mean distance of 9 evenly spaced points (interval midpoints) of each
/// segment to the other, averaged over both directions. Endpoints are
/// east/north meters.
pub fn segment_distance(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> f64 {
    let one_way = |p: [[f64; 2]; 2], q: [[f64; 2]; 2]| {
        (0..9)
            .map(|i| {
                let u = (i as f64 + 0.5) / 9.0;
                let x = [p[0][0] + u * (p[1][0] - p[0][0]), p[0][1] + u * (p[1][1] - p[0][1])];
                seg_dist(x, q[0], q[1])
            })
            .sum::<f64>()
            / 9.0
    };
    (one_way(a, b) + one_way(b, a)) / 2.0
}

/// [`segment_distance`] of two pixel-space candidates, in meters.
pub fn relative_distance(a: &LineSegmentCandidate, b: &LineSegmentCandidate, frame: &LocalFrame) -> f64 {
    segment_distance(endpoints_en(a, frame), endpoints_en(b, frame))
}

/// Signed perpendicular offset of the segment midpoint from the trajectory.
pub fn signed_offset(seg: &LineSegmentCandidate, center: &Centerline) -> f64 {
    let [a, b] = endpoints_en(seg, center.frame());
    center.project_en([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]).t
}

/// Converts a candidate to trajectory coordinates and assigns it to the
/// chunk containing its midpoint. `None` when the midpoint lies more than
/// one chunk beyond either end of the trajectory.
pub fn locate_segment(seg: &LineSegmentCandidate, center: &Centerline, ranges: &[(f64, f64)]) -> Option<GroupMember> {
    let [a, b] = endpoints_en(seg, center.frame());
    let (pa, pb) = (center.project_en(a), center.project_en(b));
    let (p0, p1) = if pa.s <= pb.s { (pa, pb) } else { (pb, pa) };
    let mid = (p0.s + p1.s) / 2.0;
    let len = ranges.last()?.1;
    let slack = ranges[0].1 - ranges[0].0;
    if mid < -slack || mid > len + slack {
        return None;
    }
    Some(GroupMember {
        chunk: chunk_of(mid, ranges) as u64,
        s0: p0.s,
        t0: p0.t,
        s1: p1.s,
        t1: p1.t,
        synthetic: false,
    })
}

/// Sweeps members in chunk order, then offset order. A member joins the
/// group with the nearest running mean offset within the distance threshold
/// that has a member at most `search_range` chunks back; otherwise it seeds
/// a new group.
pub fn group_candidates(members: &[GroupMember], cfg: &TightnessConfig) -> Vec<LineGroup> {
    let mut sorted = members.to_vec();
    sorted.sort_by(|a, b| a.chunk.cmp(&b.chunk).then(a.offset().total_cmp(&b.offset())));
    let mut groups: Vec<LineGroup> = Vec::new();
    for m in sorted {
        let off = m.offset();
        let best = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| {
                let last = g.last_chunk().unwrap();
                m.chunk.saturating_sub(last) <= cfg.search_range && (g.mean_offset - off).abs() <= cfg.distance_threshold
            })
            .min_by(|a, b| (a.1.mean_offset - off).abs().total_cmp(&(b.1.mean_offset - off).abs()))
            .map(|(i, _)| i);
        match best {
            Some(i) => {
                let g = &mut groups[i];
                g.count += 1;
                g.mean_offset += (off - g.mean_offset) / g.count as f64;
                g.members.entry(m.chunk).or_default().push(m);
            }
            None => {
                let id = groups.len();
                groups.push(LineGroup {
                    id,
                    members: BTreeMap::from([(m.chunk, vec![m])]),
                    mean_offset: off,
                    count: 1,
                    function: LineFunction::Unknown,
                    ratio: 0.0,
                });
            }
        }
    }
    groups
}

/// Length of the union of observed member intervals over the length of the
/// chunks from the group's first to its last member.
pub fn coverage_ratio(g: &LineGroup, ranges: &[(f64, f64)]) -> f64 {
    let (Some(first), Some(last)) = (g.first_chunk(), g.last_chunk()) else {
        return 0.0;
    };
    let lo = ranges[(first as usize).min(ranges.len() - 1)].0;
    let hi = ranges[(last as usize).min(ranges.len() - 1)].1;
    if hi <= lo {
        return 0.0;
    }
    let mut iv: Vec<(f64, f64)> = g
        .members
        .values()
        .flatten()
        .filter(|m| !m.synthetic)
        .map(|m| (m.s0.max(lo), m.s1.min(hi)))
        .filter(|(a, b)| b > a)
        .collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut covered = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in iv {
        cur = match cur {
            Some((c0, c1)) if a <= c1 => Some((c0, c1.max(b))),
            Some((c0, c1)) => {
                covered += c1 - c0;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((c0, c1)) = cur {
        covered += c1 - c0;
    }
    covered / (hi - lo)
}

/// Labels every group from its coverage ratio, then keeps on each side of
/// the trajectory only the solid group nearest to it as the road border:
/// further solid groups and everything beyond a border become ignored.
pub fn classify_groups(groups: &mut [LineGroup], ranges: &[(f64, f64)], cfg: &TightnessConfig) {
    for g in groups.iter_mut() {
        g.ratio = coverage_ratio(g, ranges);
        g.function = if g.ratio >= cfg.solid_ratio_min {
            LineFunction::Solid
        } else if g.ratio >= cfg.noise_ratio_min {
            LineFunction::Dashed
        } else {
            LineFunction::Ignored
        };
    }
    if let Some(n) = cfg.expected_lane_count {
        keep_lattice(groups, n, cfg.lane_width);
    }
    let solid = |g: &&LineGroup| g.function == LineFunction::Solid;
    let left = groups.iter().filter(solid).filter(|g| g.mean_offset < 0.0).map(|g| g.mean_offset).max_by(f64::total_cmp);
    let right = groups.iter().filter(solid).filter(|g| g.mean_offset >= 0.0).map(|g| g.mean_offset).min_by(f64::total_cmp);
    for g in groups.iter_mut() {
        let outside = left.is_some_and(|l| g.mean_offset < l) || right.is_some_and(|r| g.mean_offset > r);
        if outside {
            g.function = LineFunction::Ignored;
        }
    }
}

/// Keeps, for each boundary offset of `lanes` lanes centered on the
/// trajectory, the nearest labeled group within half a lane width.
fn keep_lattice(groups: &mut [LineGroup], lanes: usize, lane_width: f64) {
    let mut keep = vec![false; groups.len()];
    for k in 0..=lanes {
        let target = -(lanes as f64) * lane_width / 2.0 + k as f64 * lane_width;
        let best = groups
            .iter()
            .enumerate()
            .filter(|(i, g)| !keep[*i] && g.function != LineFunction::Ignored)
            .filter(|(_, g)| (g.mean_offset - target).abs() < lane_width / 2.0)
            .min_by(|a, b| (a.1.mean_offset - target).abs().total_cmp(&(b.1.mean_offset - target).abs()));
        if let Some((i, _)) = best {
            keep[i] = true;
        }
    }
    for (g, k) in groups.iter_mut().zip(keep) {
        if !k {
            g.function = LineFunction::Ignored;
        }
    }
}

/// Fills every chunk between a labeled group's first and last member that
/// has no member with a synthetic one spanning the chunk, at the offset
/// interpolated linearly (by chunk index) between the nearest member chunks.
pub fn interpolate_missing(groups: &mut [LineGroup], ranges: &[(f64, f64)]) {
    for g in groups.iter_mut() {
        if matches!(g.function, LineFunction::Ignored | LineFunction::Unknown) {
            continue;
        }
        let known: Vec<(u64, f64)> = g.members.keys().map(|&c| (c, g.chunk_offset(c).unwrap())).collect();
        for w in known.windows(2) {
            let ((c0, t0), (c1, t1)) = (w[0], w[1]);
            for c in c0 + 1..c1 {
                let Some(&(s0, s1)) = ranges.get(c as usize) else { continue };
                let t = t0 + (t1 - t0) * (c - c0) as f64 / (c1 - c0) as f64;
                g.members.insert(
                    c,
                    vec![GroupMember {
                        chunk: c,
                        s0,
                        t0: t,
                        s1,
                        t1: t,
                        synthetic: true,
                    }],
                );
            }
        }
    }
}

/// Offset as a function of arc length for one chunk's members: a
/// least-squares line when the members cover at least half the chunk,
/// otherwise their length-weighted mean.
fn offset_profile(members: &[GroupMember], range: (f64, f64)) -> Box<dyn Fn(f64) -> f64> {
    let pts: Vec<(f64, f64)> = members.iter().flat_map(|m| [(m.s0, m.t0), (m.s1, m.t1)]).collect();
    let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo >= 0.5 * (range.1 - range.0) {
        let n = pts.len() as f64;
        let ms = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let mt = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - ms).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - ms) * (p.1 - mt)).sum();
        if sxx > 1e-9 {
            let slope = sxy / sxx;
            return Box::new(move |s| mt + slope * (s - ms));
        }
    }
    let w: f64 = members.iter().map(|m| m.along().max(1e-6)).sum();
    let mean = members.iter().map(|m| m.offset() * m.along().max(1e-6)).sum::<f64>() / w;
    Box::new(move |_| mean)
}

/// Road model over the chunk partition of `trajectory`: one boundary line
/// per solid or dashed group and chunk, spanning the whole chunk at the
/// members' offset profile. Line ids are drawn from `seed`.
pub fn to_road_model(
    groups: &[LineGroup],
    trajectory: &BoundaryLine,
    chunk_length: f64,
    seed: u64,
) -> Result<RoadModel, ModelError> {
    let mut model = chunk_road(&[], trajectory, chunk_length)?;
    let center = Centerline::new(&trajectory.points).ok_or(ModelError::DegenerateTrajectory)?;
    let ranges = chunk_ranges(center.length(), chunk_length);
    let mut order: Vec<&LineGroup> = groups
        .iter()
        .filter(|g| matches!(g.function, LineFunction::Solid | LineFunction::Dashed))
        .collect();
    order.sort_by(|a, b| a.mean_offset.total_cmp(&b.mean_offset).then(a.id.cmp(&b.id)));
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "group-ids"));
    for g in order {
        let id = random_uuid(&mut rng);
        let kind = if g.function == LineFunction::Solid { LineKind::Solid } else { LineKind::Dashed };
        for (&c, members) in &g.members {
            let Some(&(s0, s1)) = ranges.get(c as usize) else { continue };
            let t = offset_profile(members, (s0, s1));
            let n = ((s1 - s0) / 3.0).ceil().max(1.0) as usize;
            let points = (0..=n)
                .map(|i| {
                    let s = s0 + (s1 - s0) * i as f64 / n as f64;
                    center.geo_at(s, t(s))
                })
                .collect();
            model.chunks[c as usize].lines.push(BoundaryLine::new(id, kind, points));
        }
    }
    Ok(model)
}

/// Group members as GeoJSON LineStrings colored by function.
pub fn groups_geojson(groups: &[LineGroup], center: &Centerline) -> serde_json::Value {
    let mut features = Vec::new();
    for g in groups {
        let color = match g.function {
            LineFunction::Solid => "#00a000",
            LineFunction::Dashed => "#0050ff",
            LineFunction::Ignored => "#909090",
            LineFunction::Unknown => "#000000",
        };
        for m in g.members.values().flatten() {
            let coords: Vec<[f64; 2]> = [(m.s0, m.t0), (m.s1, m.t1)]
                .iter()
                .map(|&(s, t)| {
                    let p = center.geo_at(s, t);
                    [p.lon, p.lat]
                })
                .collect();
            features.push(serde_json::json!({
                "type": "Feature",
                "properties": {
                    "group": g.id,
                    "function": g.function,
                    "chunk": m.chunk,
                    "synthetic": m.synthetic,
                    "ratio": g.ratio,
                    "stroke": if m.synthetic { "#90ee90" } else { color },
                },
                "geometry": { "type": "LineString", "coordinates": coords },
            }));
        }
    }
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, TilePixel};
    use crate::roadmodel::{parse_chunk_json, serialize_chunk_json};
    use rand::Rng;

    const L: f64 = 12.0;

    fn member(chunk: u64, t: f64, s0: f64, s1: f64) -> GroupMember {
        GroupMember {
            chunk,
            s0: chunk as f64 * L + s0,
            t0: t,
            s1: chunk as f64 * L + s1,
            t1: t,
            synthetic: false,
        }
    }

    fn ranges(n: usize) -> Vec<(f64, f64)> {
        chunk_ranges(n as f64 * L, L)
    }

    fn straight_trajectory(len: f64) -> BoundaryLine {
        let f = LocalFrame::new(GeoPoint::new(48.0, 11.0));
        let pts = (0..=len as usize).map(|i| f.from_en([0.0, i as f64])).collect();
        BoundaryLine::new(uuid::Uuid::nil(), LineKind::Trajectory, pts)
    }

    fn candidate(frame: &LocalFrame, a: [f64; 2], b: [f64; 2]) -> LineSegmentCandidate {
        let px = |p: [f64; 2]| {
            let q = geo::project_point(&frame.from_en(p), 20);
            TilePixel::new(20, q[0], q[1])
        };
        LineSegmentCandidate {
            a: px(a),
            b: px(b),
            peaks: Vec::new(),
            rms_residual: 0.0,
        }
    }

    #[test]
    fn relative_distance_values() {
        let a = [[0.0, 0.0], [0.0, 10.0]];
        assert!(segment_distance(a, a) < 1e-12);
        assert!((segment_distance(a, [[3.5, 0.0], [3.5, 10.0]]) - 3.5).abs() < 1e-12);

        // Perpendicular segments sharing a midpoint against dense sampling.
        let b = [[-5.0, 5.0], [5.0, 5.0]];
        let dense = |p: [[f64; 2]; 2], q: [[f64; 2]; 2]| {
            (0..1000)
                .map(|i| {
                    let u = i as f64 / 999.0;
                    seg_dist([p[0][0] + u * (p[1][0] - p[0][0]), p[0][1] + u * (p[1][1] - p[0][1])], q[0], q[1])
                })
                .sum::<f64>()
                / 1000.0
        };
        let oracle = (dense(a, b) + dense(b, a)) / 2.0;
        let got = segment_distance(a, b);
        assert!((got - oracle).abs() / oracle < 0.02, "{got} vs {oracle}");

        let frame = LocalFrame::new(GeoPoint::new(48.0, 11.0));
        let ca = candidate(&frame, [0.0, 0.0], [0.0, 10.0]);
        let cb = candidate(&frame, [3.5, 0.0], [3.5, 10.0]);
        assert!((relative_distance(&ca, &cb, &frame) - 3.5).abs() < 1e-3);
    }

    #[test]
    fn offsets_are_signed_left_negative() {
        let traj = straight_trajectory(60.0);
        let c = Centerline::new(&traj.points).unwrap();
        let f = c.frame().clone();
        // Travelling north, east is to the right.
        assert!(signed_offset(&candidate(&f, [0.0, 5.0], [0.0, 15.0]), &c).abs() < 1e-3);
        assert!((signed_offset(&candidate(&f, [1.75, 5.0], [1.75, 15.0]), &c) - 1.75).abs() < 1e-3);
        assert!((signed_offset(&candidate(&f, [-1.75, 5.0], [-1.75, 15.0]), &c) + 1.75).abs() < 1e-3);
        let m = locate_segment(&candidate(&f, [1.75, 15.0], [1.75, 13.0]), &c, &ranges(5)).unwrap();
        assert_eq!(m.chunk, 1);
        assert!(m.s0 < m.s1 && (m.s0 - 13.0).abs() < 1e-3);
        assert!(locate_segment(&candidate(&f, [0.0, 200.0], [0.0, 210.0]), &c, &ranges(5)).is_none());
    }

    #[test]
    fn synthetic_truth_lines_sit_on_the_offset_lattice() {
        let spec = crate::synth::SceneSpec {
            length: 60.0,
            curvature: 0.004,
            ..Default::default()
        };
        let scene = crate::synth::generate_scene(&spec).unwrap();
        let c = scene.truth.centerline().unwrap();
        for l in scene.truth.assembled_lines().iter().filter(|l| l.kind != LineKind::Trajectory) {
            for w in l.points.windows(2).step_by(7) {
                let ca = candidate(c.frame(), c.frame().to_en(&w[0]), c.frame().to_en(&w[1]));
                let off = signed_offset(&ca, &c);
                let k = ((off + 5.25) / 3.5).round();
                assert!((off - (-5.25 + 3.5 * k)).abs() < 0.1, "{off}");
            }
        }
    }

    fn figure_input() -> Vec<GroupMember> {
        // 4 chunks, 5 lines; dashed lines miss some chunks.
        let mut m = Vec::new();
        for c in 0..4u64 {
            m.push(member(c, -7.0, 0.2, 11.8));
            m.push(member(c, 7.0, 0.2, 11.8));
            if c != 1 {
                m.push(member(c, -3.5, 1.0, 5.0));
            }
            if c != 2 {
                m.push(member(c, 0.05, 6.0, 10.0));
            }
            if c == 0 || c == 3 {
                m.push(member(c, 3.45, 2.0, 6.0));
            }
        }
        m
    }

    #[test]
    fn grouping_examples() {
        let cfg = TightnessConfig::default();
        let groups = group_candidates(&figure_input(), &cfg);
        assert_eq!(groups.len(), 5);
        for g in &groups {
            let offs: Vec<f64> = g.members.values().flatten().map(|m| m.offset()).collect();
            assert!(offs.iter().all(|o| (o - g.mean_offset).abs() <= cfg.distance_threshold));
        }

        let single: Vec<GroupMember> = (0..10).map(|c| member(c, 1.0 + 0.01 * c as f64, 0.0, 12.0)).collect();
        assert_eq!(group_candidates(&single, &cfg).len(), 1);

        let mut two = Vec::new();
        for c in 0..10 {
            two.push(member(c, 0.0, 0.0, 12.0));
            two.push(member(c, 2.0 * cfg.distance_threshold + 1e-9, 0.0, 12.0));
        }
        assert_eq!(group_candidates(&two, &cfg).len(), 2);

        // A member beyond the search range starts a new group.
        let far = vec![member(0, 0.0, 0.0, 12.0), member(5, 0.0, 0.0, 12.0)];
        assert_eq!(group_candidates(&far, &cfg).len(), 2);
    }

    #[test]
    fn grouping_is_deterministic_under_input_order() {
        let cfg = TightnessConfig::default();
        let a = group_candidates(&figure_input(), &cfg);
        let mut rev = figure_input();
        rev.reverse();
        let b = group_candidates(&rev, &cfg);
        let key = |g: &Vec<LineGroup>| g.iter().map(|g| (g.members.len(), (g.mean_offset * 1e6).round() as i64)).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn loosening_never_adds_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut members = Vec::new();
        for c in 0..40u64 {
            for k in 0..4 {
                if rng.random_bool(0.7) {
                    let t = -5.25 + 3.5 * k as f64 + rng.random_range(-0.15..0.15);
                    members.push(member(c, t, 1.0, 7.0));
                }
            }
        }
        let mut prev = usize::MAX;
        for (d, r) in [(0.3, 1), (0.5, 2), (1.0, 3), (1.5, 4), (1.7, 6)] {
            let cfg = TightnessConfig {
                distance_threshold: d,
                search_range: r,
                ..Default::default()
            };
            let n = group_candidates(&members, &cfg).len();
            assert!(n <= prev, "{n} > {prev}");
            prev = n;
        }
    }

    fn group_with_ratio(id: usize, offset: f64, ratio: f64) -> LineGroup {
        let members = (0..10u64).map(|c| (c, vec![member(c, offset, 0.0, ratio * L)])).collect();
        LineGroup {
            id,
            members,
            mean_offset: offset,
            count: 10,
            function: LineFunction::Unknown,
            ratio: 0.0,
        }
    }

    #[test]
    fn labels_follow_ratio_bands() {
        let cfg = TightnessConfig::default();
        let r = ranges(10);
        let mut g = vec![
            group_with_ratio(0, -5.0, 0.85),
            group_with_ratio(1, -1.0, 0.30),
            group_with_ratio(2, 1.0, 0.05),
            group_with_ratio(3, 2.0, 0.6),
        ];
        classify_groups(&mut g, &r, &cfg);
        assert!((g[0].ratio - 0.85).abs() < 1e-9);
        let f: Vec<LineFunction> = g.iter().map(|g| g.function).collect();
        assert_eq!(f, [LineFunction::Solid, LineFunction::Dashed, LineFunction::Ignored, LineFunction::Dashed]);

        let mut b = vec![group_with_ratio(0, -5.4, 0.9), group_with_ratio(1, 5.4, 0.9), group_with_ratio(2, 9.0, 0.9)];
        classify_groups(&mut b, &r, &cfg);
        let f: Vec<LineFunction> = b.iter().map(|g| g.function).collect();
        assert_eq!(f, [LineFunction::Solid, LineFunction::Solid, LineFunction::Ignored]);
    }

    #[test]
    fn coverage_counts_overlaps_once() {
        let mut g = group_with_ratio(0, 0.0, 0.5);
        g.members.get_mut(&0).unwrap().push(member(0, 0.1, 0.0, 6.0));
        assert!((coverage_ratio(&g, &ranges(10)) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn lane_count_keeps_lattice_groups() {
        let cfg = TightnessConfig {
            expected_lane_count: Some(2),
            ..Default::default()
        };
        let mut g = vec![
            group_with_ratio(0, -3.5, 0.9),
            group_with_ratio(1, 0.1, 0.3),
            group_with_ratio(2, 0.9, 0.3),
            group_with_ratio(3, 3.4, 0.9),
        ];
        classify_groups(&mut g, &ranges(10), &cfg);
        let f: Vec<LineFunction> = g.iter().map(|g| g.function).collect();
        assert_eq!(f, [LineFunction::Solid, LineFunction::Dashed, LineFunction::Ignored, LineFunction::Solid]);
    }

    #[test]
    fn interpolation_fills_gaps_only() {
        let mut g = LineGroup {
            id: 0,
            members: BTreeMap::from([
                (1, vec![member(1, 0.5, 0.0, 4.0)]),
                (2, vec![member(2, 1.0, 0.0, 4.0)]),
                (4, vec![member(4, 2.0, 0.0, 4.0)]),
            ]),
            mean_offset: 1.2,
            count: 3,
            function: LineFunction::Dashed,
            ratio: 0.3,
        };
        let before = g.clone();
        let mut gs = [g.clone()];
        interpolate_missing(&mut gs, &ranges(8));
        g = gs[0].clone();
        assert_eq!(g.members.keys().copied().collect::<Vec<_>>(), [1, 2, 3, 4]);
        let m = g.members[&3][0];
        assert!(m.synthetic && (m.offset() - 1.5).abs() < 1e-12);
        assert_eq!((m.s0, m.s1), (36.0, 48.0));

        let mut full = [group_with_ratio(0, 0.0, 0.9)];
        full[0].function = LineFunction::Solid;
        let copy = full.clone();
        interpolate_missing(&mut full, &ranges(10));
        assert_eq!(full, copy);

        let mut ignored = [LineGroup {
            function: LineFunction::Ignored,
            ..before
        }];
        let copy = ignored.clone();
        interpolate_missing(&mut ignored, &ranges(8));
        assert_eq!(ignored, copy);
    }

    #[test]
    fn model_from_figure_instance() {
        let cfg = TightnessConfig::default();
        let traj = straight_trajectory(48.0);
        let r = ranges(4);
        let mut groups = group_candidates(&figure_input(), &cfg);
        classify_groups(&mut groups, &r, &cfg);
        interpolate_missing(&mut groups, &r);
        for g in &groups {
            let chunks: Vec<u64> = g.members.keys().copied().collect();
            assert!(chunks.windows(2).all(|w| w[1] == w[0] + 1));
        }
        let model = to_road_model(&groups, &traj, L, 7).unwrap();
        model.validate().unwrap();
        let lines = model.assembled_lines();
        let count = |k: LineKind| lines.iter().filter(|l| l.kind == k).count();
        assert_eq!((count(LineKind::Solid), count(LineKind::Dashed)), (2, 3));
        assert_eq!(model.chunks.len(), 4);
        let c = Centerline::new(&traj.points).unwrap();
        for ch in &model.chunks {
            for l in ch.boundary_lines() {
                let st = c.project(&l.points[l.points.len() / 2]);
                let lattice = (st.t / 3.5).round() * 3.5;
                assert!((st.t - lattice).abs() < 0.1);
            }
            let bytes = serialize_chunk_json(ch);
            assert_eq!(serialize_chunk_json(&parse_chunk_json(&bytes).unwrap()), bytes);
        }

        let empty = to_road_model(&[], &traj, L, 7).unwrap();
        assert!(empty.chunks.iter().all(|c| c.lines.len() == 1 && c.trajectory().is_some()));
        let gj = groups_geojson(&groups, &c);
        assert!(!gj["features"].as_array().unwrap().is_empty());
    }
}
