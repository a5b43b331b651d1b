//! Patch-level lane-marking classification.

pub mod features;
pub mod forest;
pub mod probmap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{compute_features, feature_len, FeatureKind};
pub use forest::{train_forest, ForestConfig, ForestModel};
pub use probmap::{predict_map, ProbabilityMap};

use crate::geo::TilePixel;
use crate::raster::{Mask, Raster};
use crate::synth::sub_seed;

pub const PATCH_SIZES: [usize; 4] = [8, 12, 16, 24];

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("patch size {size} exceeds the {width}x{height} image")]
    PatchTooLarge { size: usize, width: u32, height: u32 },
    #[error("mask dimensions differ from the image")]
    MaskSize,
    #[error("feature length {got} does not match the model ({expected})")]
    Dimension { expected: usize, got: usize },
    #[error("training failed: {0}")]
    Training(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// Classifier families. Only the Random Forest is implemented; the others
/// are accepted by the parser so configurations can name them, and rejected
/// when selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    RandomForest,
    Svm,
    Ann,
    Cnn,
}

impl ClassifierKind {
    pub fn ensure_supported(self) -> Result<(), ClassifyError> {
        match self {
            ClassifierKind::RandomForest => Ok(()),
            other => Err(ClassifyError::Config(format!("classifier {other:?} is not implemented"))),
        }
    }
}

/// Patch sizes must be one of the supported values and stay below the 24 px
/// bound that keeps a patch narrower than a lane at the default level.
pub fn check_patch_size(size: usize) -> Result<(), ClassifyError> {
    if !PATCH_SIZES.contains(&size) {
        return Err(ClassifyError::Config(format!("patch size {size} not in {PATCH_SIZES:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub size: usize,
    pub pixels: Vec<u8>,
    /// Global pixel position of the patch center.
    pub center: TilePixel,
    pub label: Option<bool>,
}

/// Sliding-window patches with top-left corners on multiples of `stride`,
/// fully inside the image, centered on a surface pixel. A patch is positive
/// iff any marking pixel falls inside it.
pub fn extract_patches(
    tile: &Raster,
    surface: &Mask,
    marking: &Mask,
    size: usize,
    stride: usize,
) -> Result<Vec<PatchSample>, ClassifyError> {
    if size == 0 || size > tile.width as usize || size > tile.height as usize {
        return Err(ClassifyError::PatchTooLarge {
            size,
            width: tile.width,
            height: tile.height,
        });
    }
    if (surface.width, surface.height) != (tile.width, tile.height)
        || (marking.width, marking.height) != (tile.width, tile.height)
    {
        return Err(ClassifyError::MaskSize);
    }
    let (w, h) = (tile.width as usize, tile.height as usize);
    // Summed-area table of the marking mask for O(1) label queries.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += marking.get(x as u32, y as u32) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let area = |x0: usize, y0: usize| {
        let (x1, y1) = (x0 + size, y0 + size);
        sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
    };
    let (gx, gy, level) = tile.georef.map(|g| (g.x0, g.y0, g.level)).unwrap_or((0, 0, 0));
    let half = size / 2;
    let mut out = Vec::new();
    for y0 in (0..=h - size).step_by(stride) {
        for x0 in (0..=w - size).step_by(stride) {
            if !surface.get((x0 + half) as u32, (y0 + half) as u32) {
                continue;
            }
            let mut pixels = Vec::with_capacity(size * size);
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    pixels.push(tile.get(x as u32, y as u32));
                }
            }
            out.push(PatchSample {
                size,
                pixels,
                center: TilePixel::new(level, (gx + (x0 + half) as i64) as f64, (gy + (y0 + half) as i64) as f64),
                label: Some(area(x0, y0) > 0),
            });
        }
    }
    Ok(out)
}

/// Keeps every positive and at most `ratio` negatives per positive, then
/// caps the total at `max_samples`, preserving the class ratio.
pub fn balance(samples: Vec<PatchSample>, ratio: f64, max_samples: usize, seed: u64) -> Vec<PatchSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "balance"));
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.label == Some(true));
    neg.shuffle(&mut rng);
    neg.truncate(((pos.len() as f64) * ratio).ceil() as usize);
    let total = pos.len() + neg.len();
    if total > max_samples {
        let keep = max_samples as f64 / total as f64;
        pos.shuffle(&mut rng);
        pos.truncate((pos.len() as f64 * keep).round() as usize);
        neg.truncate((neg.len() as f64 * keep).round() as usize);
    }
    pos.extend(neg);
    pos
}

pub fn features_of(samples: &[PatchSample], kind: FeatureKind) -> Vec<Vec<f32>> {
    samples
        .par_iter()
        .map(|s| compute_features(&s.pixels, s.size, kind))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Sample indices held out in each fold.
    pub folds: Vec<Vec<usize>>,
}

/// Stratified folds: each class is shuffled and dealt round-robin, the
/// negatives continuing where the positives stopped, so fold sizes differ by
/// at most one overall and per class.
pub fn stratified_folds(y: &[bool], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "folds"));
    let mut pos: Vec<usize> = (0..y.len()).filter(|&i| y[i]).collect();
    let mut neg: Vec<usize> = (0..y.len()).filter(|&i| !y[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (n, i) in pos.iter().chain(neg.iter()).enumerate() {
        folds[n % k].push(*i);
    }
    folds
}

/// k-fold cross-validation with pooled counts; a sample is predicted
/// positive when its probability is at least 0.5.
pub fn cross_validate(
    x: &[Vec<f32>],
    y: &[bool],
    cfg: &ForestConfig,
    kind: FeatureKind,
    patch_size: usize,
    k: usize,
) -> Result<CvResult, ClassifyError> {
    let pos = y.iter().filter(|v| **v).count();
    if k < 2 || pos < k || y.len() - pos < k {
        return Err(ClassifyError::Training(format!(
            "{k}-fold cross-validation needs at least {k} samples of each class"
        )));
    }
    let folds = stratified_folds(y, k, cfg.seed);
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (f, test) in folds.iter().enumerate() {
        let mut held = vec![false; y.len()];
        for &i in test {
            held[i] = true;
        }
        let train: Vec<usize> = (0..y.len()).filter(|&i| !held[i]).collect();
        let tx: Vec<Vec<f32>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        let fold_cfg = ForestConfig {
            seed: sub_seed(cfg.seed, &format!("fold-{f}")),
            ..*cfg
        };
        let model = train_forest(&tx, &ty, &fold_cfg, kind, patch_size)?;
        for &i in test {
            let p = model.predict_proba(&x[i])? >= 0.5;
            match (p, y[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    Ok(CvResult {
        precision: ratio(tp, fp),
        recall: ratio(tp, fneg),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Georef;
    use rand::Rng;

    fn tile() -> Raster {
        Raster::new_gray(256, 256, 90).with_georef(Georef::for_tile(3, 4, 10))
    }

    #[test]
    fn sliding_window_count() {
        let t = tile();
        let p = extract_patches(&t, &Mask::full(256, 256), &Mask::new(256, 256), 12, 4).unwrap();
        assert_eq!(p.len(), 62 * 62);
        assert!(p.iter().all(|s| s.label == Some(false)));
        assert_eq!(p[0].center.x, 3.0 * 256.0 + 6.0);
        assert!(extract_patches(&t, &Mask::full(256, 256), &Mask::new(256, 256), 300, 4).is_err());
        assert!(extract_patches(&t, &Mask::full(10, 10), &Mask::new(256, 256), 12, 4).is_err());
    }

    #[test]
    fn label_rule_matches_exhaustive_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Raster::new_gray(40, 40, 0);
        for _ in 0..20 {
            let mut m = Mask::new(40, 40);
            for _ in 0..rng.random_range(0..6) {
                m.set(rng.random_range(0..40), rng.random_range(0..40), true);
            }
            let patches = extract_patches(&t, &Mask::full(40, 40), &m, 8, 3).unwrap();
            let mut k = 0;
            for y0 in (0..=32).step_by(3) {
                for x0 in (0..=32).step_by(3) {
                    let hit = (y0..y0 + 8).any(|y| (x0..x0 + 8).any(|x| m.get(x, y)));
                    assert_eq!(patches[k].label, Some(hit));
                    k += 1;
                }
            }
        }
        // A patch exactly covering a single marked pixel.
        let mut dot = Mask::new(12, 12);
        dot.set(11, 11, true);
        let p = extract_patches(&Raster::new_gray(12, 12, 0), &Mask::full(12, 12), &dot, 12, 4).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].label, Some(true));
    }

    #[test]
    fn surface_limits_centers() {
        let t = tile();
        let mut s = Mask::new(256, 256);
        for y in 0..256 {
            for x in 100..120 {
                s.set(x, y, true);
            }
        }
        let p = extract_patches(&t, &s, &Mask::new(256, 256), 12, 4).unwrap();
        // Local centers x0 + 6 in [100, 120) with x0 a multiple of 4.
        assert_eq!(p.len(), 5 * 62);
    }

    #[test]
    fn folds_are_stratified_and_disjoint() {
        let y: Vec<bool> = (0..103).map(|i| i % 4 == 0).collect();
        let folds = stratified_folds(&y, 10, 1);
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let pos: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| y[i]).count()).collect();
        assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn cross_validation_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f32>> = (0..400).map(|_| vec![rng.random::<f32>(), rng.random::<f32>()]).collect();
        let y: Vec<bool> = x.iter().map(|r| r[0] > 0.6).collect();
        let cfg = ForestConfig { n_trees: 20, ..Default::default() };
        let r = cross_validate(&x, &y, &cfg, FeatureKind::Pixel, 0, 10).unwrap();
        assert!(r.precision >= 0.97 && r.recall >= 0.97, "{r:?}");

        // Separable with a margin: exactly right.
        let xs: Vec<Vec<f32>> = (0..200).map(|i| vec![if i % 2 == 0 { 0.1 } else { 0.9 }, rng.random()]).collect();
        let ys: Vec<bool> = (0..200).map(|i| i % 2 == 1).collect();
        let r = cross_validate(&xs, &ys, &cfg, FeatureKind::Pixel, 0, 10).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 1.0));

        // Labels independent of features: precision near the prior.
        let xn: Vec<Vec<f32>> = (0..1000).map(|_| vec![rng.random::<f32>(), rng.random::<f32>()]).collect();
        let yn: Vec<bool> = (0..1000).map(|_| rng.random_bool(0.3)).collect();
        let prior = yn.iter().filter(|v| **v).count() as f64 / 1000.0;
        let r = cross_validate(&xn, &yn, &cfg, FeatureKind::Pixel, 0, 10).unwrap();
        assert!((r.precision - prior).abs() < 0.05, "{} vs {prior}", r.precision);

        assert!(cross_validate(&x[..15], &y[..15], &cfg, FeatureKind::Pixel, 0, 10).is_err());
    }

    #[test]
    fn cross_validation_never_tests_on_training_data() {
        let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let folds = stratified_folds(&y, 10, 2);
        for (a, fa) in folds.iter().enumerate() {
            for (b, fb) in folds.iter().enumerate() {
                if a != b {
                    assert!(fa.iter().all(|i| !fb.contains(i)));
                }
            }
        }
    }

    #[test]
    fn reserved_classifiers_are_rejected() {
        assert!(ClassifierKind::RandomForest.ensure_supported().is_ok());
        assert!(ClassifierKind::Svm.ensure_supported().is_err());
        assert!(check_patch_size(12).is_ok());
        assert!(check_patch_size(32).is_err());
    }

    fn line_tile() -> (Raster, Mask) {
        let mut t = tile();
        let mut mark = Mask::new(256, 256);
        for y in 0..256 {
            for x in 127..130 {
                t.set(x, y, 220);
                mark.set(x, y, true);
            }
        }
        (t, mark)
    }

    fn trained_on_line() -> ForestModel {
        let (t, mark) = line_tile();
        let p = extract_patches(&t, &Mask::full(256, 256), &mark, 12, 4).unwrap();
        let x = features_of(&p, FeatureKind::Pixel);
        let y: Vec<bool> = p.iter().map(|s| s.label.unwrap()).collect();
        train_forest(&x, &y, &ForestConfig { n_trees: 10, ..Default::default() }, FeatureKind::Pixel, 12).unwrap()
    }

    #[test]
    fn probability_map_peaks_on_the_line() {
        let m = trained_on_line();
        let (t, _) = line_tile();
        let pm = predict_map(&t, &Mask::full(256, 256), &m, 4, None);
        assert_eq!((pm.cols, pm.rows), (62, 62));
        assert!(pm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        for j in 0..pm.rows {
            let best = (0..pm.cols).max_by(|a, b| pm.get(*a, j).total_cmp(&pm.get(*b, j))).unwrap();
            let cx = pm.center(best, j)[0] - 3.0 * 256.0;
            assert!((cx - 128.5).abs() <= 12.0, "{cx}");
        }

        let empty = predict_map(&t, &Mask::new(256, 256), &m, 4, None);
        assert!(empty.values.iter().all(|v| *v == 0.0));

        let mut half = Mask::new(256, 256);
        for y in 0..256 {
            for x in 0..128 {
                half.set(x, y, true);
            }
        }
        let hm = predict_map(&t, &half, &m, 4, None);
        for j in 0..hm.rows {
            for i in 0..hm.cols {
                let c = hm.center(i, j)[0] as i64 - 3 * 256;
                if c >= 128 {
                    assert_eq!(hm.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn grid_shape_follows_patch_size_and_stitches() {
        let (t, mark) = line_tile();
        for size in PATCH_SIZES {
            let p = extract_patches(&t, &Mask::full(256, 256), &mark, size, 4).unwrap();
            let x = features_of(&p, FeatureKind::Lbp);
            let y: Vec<bool> = p.iter().map(|s| s.label.unwrap()).collect();
            let m = train_forest(&x, &y, &ForestConfig { n_trees: 2, ..Default::default() }, FeatureKind::Lbp, size).unwrap();
            let pm = predict_map(&t, &Mask::full(256, 256), &m, 4, None);
            let n = (256 - size) / 4 + 1;
            assert_eq!((pm.cols, pm.rows), (n, n));
            assert_eq!(pm.center(0, 0), [3.0 * 256.0 + (size / 2) as f64, 4.0 * 256.0 + (size / 2) as f64]);
        }

        // Two halves of one image stitch into the whole.
        let m = trained_on_line();
        let full = predict_map(&t, &Mask::full(256, 256), &m, 4, None);
        let left = predict_map(&t, &Mask::full(256, 256), &m, 4, Some((0, 0, 128, 256)));
        let right = predict_map(&t, &Mask::full(256, 256), &m, 4, Some((128, 0, 128, 256)));
        assert_eq!(left.cols + right.cols, full.cols);
        assert_eq!(ProbabilityMap::stitch(&[left, right]).unwrap(), full);
    }
}
