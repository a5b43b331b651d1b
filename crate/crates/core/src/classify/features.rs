//! Patch descriptors: raw intensities, HOG and LBP histograms.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Pixel,
    Hog,
    Lbp,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pixel" => Some(FeatureKind::Pixel),
            "hog" => Some(FeatureKind::Hog),
            "lbp" => Some(FeatureKind::Lbp),
            _ => None,
        }
    }
}

const HOG_BINS: usize = 9;
const HOG_CELL: usize = 4;
const LBP_BINS: usize = 256;

/// Descriptor length for a square patch of `size` pixels.
pub fn feature_len(kind: FeatureKind, size: usize) -> usize {
    match kind {
        FeatureKind::Pixel => size * size,
        FeatureKind::Hog => {
            let cells = size / HOG_CELL;
            let blocks = cells.saturating_sub(1);
            blocks * blocks * 4 * HOG_BINS
        }
        FeatureKind::Lbp => LBP_BINS,
    }
}

pub fn compute_features(pixels: &[u8], size: usize, kind: FeatureKind) -> Vec<f32> {
    debug_assert_eq!(pixels.len(), size * size);
    match kind {
        FeatureKind::Pixel => pixels.iter().map(|&v| v as f32 / 255.0).collect(),
        FeatureKind::Hog => hog(pixels, size),
        FeatureKind::Lbp => lbp(pixels, size),
    }
}

/// Unsigned-orientation histograms over 4×4 cells, L2-normalized per
/// overlapping 2×2 block. Votes are split linearly between adjacent bins.
fn hog(px: &[u8], size: usize) -> Vec<f32> {
    let cells = size / HOG_CELL;
    let mut hist = vec![0f32; cells * cells * HOG_BINS];
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, size as isize - 1) as usize;
        let y = y.clamp(0, size as isize - 1) as usize;
        px[y * size + x] as f32
    };
    let bin_width = 180.0 / HOG_BINS as f32;
    for y in 0..cells * HOG_CELL {
        for x in 0..cells * HOG_CELL {
            let (xi, yi) = (x as isize, y as isize);
            let gx = at(xi + 1, yi) - at(xi - 1, yi);
            let gy = at(xi, yi + 1) - at(xi, yi - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ang = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let pos = ang / bin_width - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as isize).rem_euclid(HOG_BINS as isize) as usize;
            let b1 = (b0 + 1) % HOG_BINS;
            let cell = (y / HOG_CELL) * cells + x / HOG_CELL;
            hist[cell * HOG_BINS + b0] += mag * (1.0 - frac);
            hist[cell * HOG_BINS + b1] += mag * frac;
        }
    }
    let blocks = cells.saturating_sub(1);
    let mut out = Vec::with_capacity(feature_len(FeatureKind::Hog, size));
    for by in 0..blocks {
        for bx in 0..blocks {
            let start = out.len();
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let cell = (by + dy) * cells + bx + dx;
                out.extend_from_slice(&hist[cell * HOG_BINS..(cell + 1) * HOG_BINS]);
            }
            let norm = out[start..].iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 1e-6 {
                for v in &mut out[start..] {
                    *v /= norm;
                }
            } else {
                out[start..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    out
}

/// 8-neighbour local binary patterns over interior pixels, neighbours read
/// clockwise from the top-left, bit set when neighbour ≥ center.
fn lbp(px: &[u8], size: usize) -> Vec<f32> {
    const NB: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];
    let mut hist = vec![0f32; LBP_BINS];
    if size < 3 {
        return hist;
    }
    let mut n = 0usize;
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let c = px[y * size + x];
            let mut code = 0usize;
            for (k, (dx, dy)) in NB.iter().enumerate() {
                let v = px[(y as isize + dy) as usize * size + (x as isize + dx) as usize];
                if v >= c {
                    code |= 1 << k;
                }
            }
            hist[code] += 1.0;
            n += 1;
        }
    }
    for h in &mut hist {
        *h /= n as f32;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_depend_only_on_kind_and_size() {
        for size in [8, 12, 16, 24] {
            let p = vec![7u8; size * size];
            for kind in [FeatureKind::Pixel, FeatureKind::Hog, FeatureKind::Lbp] {
                assert_eq!(compute_features(&p, size, kind).len(), feature_len(kind, size));
            }
        }
        assert_eq!(feature_len(FeatureKind::Hog, 12), 144);
        assert_eq!(feature_len(FeatureKind::Hog, 8), 36);
    }

    #[test]
    fn constant_patch() {
        let p = vec![128u8; 144];
        let f = compute_features(&p, 12, FeatureKind::Pixel);
        assert!(f.iter().all(|v| *v == f[0]));
        assert!(compute_features(&p, 12, FeatureKind::Hog).iter().all(|v| *v == 0.0));
        let l = compute_features(&p, 12, FeatureKind::Lbp);
        assert_eq!(l[255], 1.0);
        assert!((l.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lbp_hand_evaluated_window() {
        // Center 50 with neighbours clockwise from the top-left.
        let p = [60, 40, 50, 10, 50, 90, 50, 20, 70];
        // Neighbour order: (0,0)=60, (1,0)=40, (2,0)=50, (2,1)=90, (2,2)=70, (1,2)=20, (0,2)=50, (0,1)=10.
        let expected = 1 | 1 << 2 | 1 << 3 | 1 << 4 | 1 << 6;
        let h = compute_features(&p, 3, FeatureKind::Lbp);
        assert_eq!(h[expected], 1.0);
    }

    #[test]
    fn hog_sees_vertical_edge_orientation() {
        // Left half dark, right half bright: horizontal gradient, angle 0.
        let size = 12;
        let p: Vec<u8> = (0..size * size).map(|i| if i % size < 6 { 20 } else { 200 }).collect();
        let f = compute_features(&p, size, FeatureKind::Hog);
        // Bin 0 (centred at 10°) and bin 8 (170°) share the 0° votes.
        let mut by_bin = [0f32; 9];
        for (i, v) in f.iter().enumerate() {
            by_bin[i % 9] += v;
        }
        let strongest = by_bin.iter().cloned().fold(0.0, f32::max);
        assert!(by_bin[0] == strongest || by_bin[8] == strongest);
        assert!(by_bin[4] < 1e-6);
        for block in f.chunks(36) {
            let n: f32 = block.iter().map(|v| v * v).sum();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-4);
        }
    }
}
