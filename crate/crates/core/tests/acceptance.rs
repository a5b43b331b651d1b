//! Acceptance criteria for the whole toolkit. Runs without the libtest
//! harness so that one PASS/FAIL line per criterion is always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use lanemap::centerline::Centerline;
use lanemap::classify::cross_validate;
use lanemap::eval::{evaluate, match_lines, shift_lines, sigma_max, EvalReport};
use lanemap::geo::{self, GeoPoint, LocalFrame};
use lanemap::pipeline::{self, PipelineConfig, TrainingData};
use lanemap::roadmodel::{parse_chunk_json, serialize_chunk_json, BoundaryLine, LineKind, RoadModel};
use lanemap::segment::{peak_pixel, subpixel_peak};
use lanemap::synth::{corrupt, generate_scene, Scene, SceneSpec};
use lanemap::tiles::TileMosaic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAX_DP_M: f64 = 0.05;
const GROUND_RES_RANGE: (f64, f64) = (0.149, 0.150);
const SUBPIXEL_LINES: usize = 200;
const MAX_SUBPIXEL_CORRECTION: f64 = 0.5;
const ORACLE_CHUNKS: usize = 1000;
const ORACLE_MAX_LINES: usize = 6;
const T_D: f64 = 0.5;
const SHIFT_M: f64 = 0.1;
const SHIFT_TOL: f64 = 1e-6;
const E2E_MIN_FRACTION: f64 = 0.9;
const E2E_MIN_GEOMETRY: f64 = 0.9;
const E2E_MEDIAN_GR_FACTOR: f64 = 2.0;
const OCCLUSION: f64 = 0.3;
const CV_MIN: f64 = 0.9;
const CV_FOLDS: usize = 10;
const ROUND_TRIP_CHUNKS: usize = 100;
const ROUND_TRIP_TOL_DEG: f64 = 5e-10;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() < limit_s as f64 {
        Ok(())
    } else {
        Err(format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
    }
}

fn projection_error_bound() -> Outcome {
    let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0);
    for lat in -85..=85 {
        for dx in -256..=256 {
            let d = geo::mercator_cartesian_error_dp(lat as f64, dx as f64, 0.0, 20).map_err(|e| e.to_string())?;
            if d > worst.0 {
                worst = (d, lat as f64, dx as f64);
            }
        }
    }
    check(
        worst.0 < MAX_DP_M,
        format!("max d_p {:.5} m at lat {} dx {} (< {MAX_DP_M})", worst.0, worst.1, worst.2),
    )
}

fn ground_resolution_at_equator() -> Outcome {
    let gr = geo::ground_resolution(0.0, 20);
    check(
        (GROUND_RES_RANGE.0..=GROUND_RES_RANGE.1).contains(&gr),
        format!("{gr:.6} m/px in [{}, {}]", GROUND_RES_RANGE.0, GROUND_RES_RANGE.1),
    )
}

fn erf(x: f64) -> f64 {
    // Abramowitz and Stegun 7.1.26, absolute error below 1.5e-7.
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs());
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let y = 1.0 - poly * (-x * x).exp();
    if x >= 0.0 {
        y
    } else {
        -y
    }
}

/// Cross-section samples of a painted stripe of width `w` pixels centered at
/// `c`, blurred by a Gaussian of `sigma` pixels over a darker background.
fn blurred_stripe(c: f64, w: f64, sigma: f64, n: usize) -> Vec<f64> {
    let s = sigma * std::f64::consts::SQRT_2;
    (0..n)
        .map(|k| {
            let x = k as f64;
            let cover = 0.5 * (erf((x - c + w / 2.0) / s) - erf((x - c - w / 2.0) / s));
            60.0 + 170.0 * cover
        })
        .collect()
}

fn subpixel_beats_argmax() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut err_sub, mut err_arg, mut worst_corr) = (0.0, 0.0, 0.0f64);
    for _ in 0..SUBPIXEL_LINES {
        let truth = 12.0 + rng.random_range(0.0..1.0);
        let v = blurred_stripe(truth, rng.random_range(1.5..3.0), rng.random_range(0.8..1.6), 25);
        let i = peak_pixel(&v);
        let (pos, _) = subpixel_peak(&v);
        worst_corr = worst_corr.max((pos - i as f64).abs());
        err_sub += (pos - truth).abs();
        err_arg += (i as f64 - truth).abs();
    }
    let (ms, ma) = (err_sub / SUBPIXEL_LINES as f64, err_arg / SUBPIXEL_LINES as f64);
    check(
        ms < ma && worst_corr <= MAX_SUBPIXEL_CORRECTION,
        format!("mean error sub-pixel {ms:.4} px vs argmax {ma:.4} px, max correction {worst_corr:.3} px"),
    )
}

/// Minimum total |offset difference| over all pairings of min(n, m) lines,
/// by exhaustive enumeration.
fn brute_force_cost(t: &[f64], p: &[f64]) -> f64 {
    fn rec(t: &[f64], p: &[f64], used: &mut Vec<bool>, k: usize, acc: f64, best: &mut f64) {
        if k == t.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..p.len() {
            if !used[j] {
                used[j] = true;
                rec(t, p, used, k + 1, acc + (t[k] - p[j]).abs(), best);
                used[j] = false;
            }
        }
    }
    let (a, b) = if t.len() <= p.len() { (t, p) } else { (p, t) };
    let mut best = f64::INFINITY;
    rec(a, b, &mut vec![false; b.len()], 0, 0.0, &mut best);
    best
}

fn matching_oracle() -> Outcome {
    let frame = LocalFrame::new(GeoPoint::new(48.2203, 11.5126));
    let center = Centerline::with_frame(frame.clone(), &[frame.from_en([0.0, 0.0]), frame.from_en([12.0, 0.0])]).unwrap();
    // Offsets are positive to the right of travel; the trajectory runs east.
    let line = |off: f64, kind| BoundaryLine::new(uuid::Uuid::nil(), kind, vec![frame.from_en([-1.0, -off]), frame.from_en([13.0, -off])]);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for chunk in 0..ORACLE_CHUNKS {
        let n = rng.random_range(0..=ORACLE_MAX_LINES);
        let m = rng.random_range(0..=ORACLE_MAX_LINES);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-9.0..9.0)).collect();
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(-9.0..9.0)).collect();
        let kind = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { LineKind::Solid } else { LineKind::Dashed };
        let tl: Vec<BoundaryLine> = t.iter().map(|&o| line(o, kind(&mut rng))).collect();
        let pl: Vec<BoundaryLine> = p.iter().map(|&o| line(o, kind(&mut rng))).collect();
        let got = match_lines(chunk as u64, &tl, &pl, &center, (0.0, 12.0));
        if got.pairs.len() != n.min(m) {
            return Err(format!("chunk {chunk}: {} pairs for {n}x{m} lines", got.pairs.len()));
        }
        for pr in &got.pairs {
            let expect = (p[pr.pred] - t[pr.truth]).abs();
            if (pr.d.abs() - expect).abs() > 1e-6 {
                return Err(format!("chunk {chunk}: distance {} vs {expect}", pr.d));
            }
        }
        let cost: f64 = got.pairs.iter().map(|pr| pr.d.abs()).sum();
        let best = if n.min(m) == 0 { 0.0 } else { brute_force_cost(&t, &p) };
        worst = worst.max((cost - best).abs());
    }
    let s4 = sigma_max(4, T_D);
    check(
        worst < 1e-6 && s4 == T_D,
        format!("{ORACLE_CHUNKS} chunks, max cost gap {worst:.2e} m; sigma_max(4) = {s4}"),
    )
}

fn scene(length: f64, seed: u64) -> Scene {
    generate_scene(&SceneSpec {
        length,
        lane_count: 3,
        seed,
        ..Default::default()
    })
    .expect("scene")
}

fn shift_tolerance() -> Outcome {
    let s = scene(300.0, 5);
    let center = s.truth.centerline().map_err(|e| e.to_string())?;
    let shifted = shift_lines(&s.truth, &center, SHIFT_M);
    let r = evaluate(&s.truth, &shifted, T_D).map_err(|e| e.to_string())?;
    let one = |v: Option<f64>| v == Some(1.0);
    let shift = r.shift.unwrap_or(f64::NAN);
    let perf = r.performance_geometry.unwrap_or(f64::NAN);
    check(
        one(r.frac_of_truth_matched)
            && one(r.frac_of_pred_matched)
            && (shift - SHIFT_M).abs() <= SHIFT_TOL
            && (perf - 1.0).abs() <= SHIFT_TOL,
        format!(
            "fractions {:?}/{:?}, shift {shift:.9} m, performance {perf:.9}",
            r.frac_of_truth_matched, r.frac_of_pred_matched
        ),
    )
}

struct Trained {
    model: lanemap::classify::ForestModel,
    cfg: PipelineConfig,
    test: Scene,
}

fn trained() -> &'static Trained {
    static T: std::sync::OnceLock<Trained> = std::sync::OnceLock::new();
    T.get_or_init(|| {
        let cfg = PipelineConfig::default();
        let train = scene(300.0, 21);
        let out = pipeline::train(&[TrainingData::from_scene(&train)], &cfg, false).expect("training");
        Trained {
            model: out.model,
            cfg,
            test: scene(1000.0, 5),
        }
    })
}

fn run_extraction(tiles: &[(String, lanemap::raster::Raster)], linking: bool) -> Result<EvalReport, String> {
    let t = trained();
    let mut cfg = t.cfg.clone();
    cfg.extract.linking = linking;
    let mosaic = TileMosaic::from_tiles(20, tiles.iter().map(|(_, r)| r.clone()));
    let traj = BoundaryLine::new(uuid::Uuid::nil(), LineKind::Trajectory, t.test.truth.trajectory_points());
    let out = pipeline::extract(&t.model, &mosaic, &traj, Some(&t.test.surface), t.test.truth.chunk_length, 1, &cfg)
        .map_err(|e| e.to_string())?;
    if out.model.chunks.len() != t.test.truth.chunks.len() {
        return Err(format!("{} predicted chunks vs {} truth", out.model.chunks.len(), t.test.truth.chunks.len()));
    }
    evaluate(&t.test.truth, &out.model, T_D).map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let t = trained();
    let r = run_extraction(&t.test.tiles, true)?;
    let gr = geo::ground_resolution(t.test.spec.origin.lat, 20);
    let ft = r.frac_of_truth_matched.unwrap_or(0.0);
    let fp = r.frac_of_pred_matched.unwrap_or(0.0);
    let perf = r.performance_geometry.unwrap_or(0.0);
    let med = r.median_abs_distance.unwrap_or(f64::INFINITY);
    check(
        ft >= E2E_MIN_FRACTION && fp >= E2E_MIN_FRACTION && perf >= E2E_MIN_GEOMETRY && med <= E2E_MEDIAN_GR_FACTOR * gr,
        format!(
            "truth matched {ft:.4}, pred matched {fp:.4}, performance {perf:.4}, median |d| {med:.4} m (limit {:.4})",
            E2E_MEDIAN_GR_FACTOR * gr
        ),
    )
}

fn linking_direction() -> Outcome {
    let t = trained();
    let tiles = corrupt(&t.test.tiles, &t.test.truth, OCCLUSION, 77).map_err(|e| e.to_string())?;
    let with = run_extraction(&tiles, true)?;
    let without = run_extraction(&tiles, false)?;
    let (fw, fo) = (with.frac_of_truth_matched.unwrap_or(0.0), without.frac_of_truth_matched.unwrap_or(0.0));
    let (pw, po) = (with.performance_geometry.unwrap_or(0.0), without.performance_geometry.unwrap_or(0.0));
    check(
        fw > fo && pw <= po,
        format!("truth matched {fw:.4} with vs {fo:.4} without; performance {pw:.4} with vs {po:.4} without"),
    )
}

fn classifier_cross_validation() -> Outcome {
    let cfg = PipelineConfig::default();
    if cfg.patch.size != 12 || cfg.patch.feature != lanemap::classify::FeatureKind::Pixel {
        return Err("defaults changed: expected 12 px pixel features".into());
    }
    let data = TrainingData::from_scene(&scene(300.0, 31));
    let (x, y) = pipeline::training_set(&[data], &cfg).map_err(|e| e.to_string())?;
    let cv = cross_validate(&x, &y, &cfg.forest_config(), cfg.patch.feature, cfg.patch.size, CV_FOLDS)
        .map_err(|e| e.to_string())?;
    check(
        cv.precision >= CV_MIN && cv.recall >= CV_MIN,
        format!("{CV_FOLDS}-fold precision {:.4}, recall {:.4} on {} patches", cv.precision, cv.recall, y.len()),
    )
}

fn chunk_round_trip() -> Outcome {
    let s = scene(ROUND_TRIP_CHUNKS as f64 * 12.0, 8);
    let model: &RoadModel = &s.truth;
    if model.chunks.len() != ROUND_TRIP_CHUNKS {
        return Err(format!("{} chunks generated", model.chunks.len()));
    }
    for c in &model.chunks {
        let once = serialize_chunk_json(c);
        let parsed = parse_chunk_json(&once).map_err(|e| e.to_string())?;
        let twice = serialize_chunk_json(&parsed);
        if once != twice || !parsed.approx_eq(c, ROUND_TRIP_TOL_DEG) {
            return Err(format!("chunk {} differs after round trip", c.id));
        }
        let v: serde_json::Value = serde_json::from_slice(&once).map_err(|e| e.to_string())?;
        let keys = |o: &serde_json::Value| -> Vec<String> {
            let mut k: Vec<String> = o.as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default();
            k.sort();
            k
        };
        if keys(&v) != ["id", "lines", "map version"] {
            return Err(format!("chunk keys {:?}", keys(&v)));
        }
        for l in v["lines"].as_array().into_iter().flatten() {
            if keys(l) != ["line id", "points", "type"] {
                return Err(format!("line keys {:?}", keys(l)));
            }
        }
    }
    Ok(format!("{ROUND_TRIP_CHUNKS} chunks byte-identical after serialize, parse, serialize"))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("projection error below 5 cm at level 20", 5, projection_error_bound),
        ("ground resolution at the equator", 1, ground_resolution_at_equator),
        ("sub-pixel peaks beat argmax", 10, subpixel_beats_argmax),
        ("assignment equals brute force", 10, matching_oracle),
        ("constant lateral shift is absorbed", 5, shift_tolerance),
        ("end-to-end extraction on a 1 km highway", 300, end_to_end),
        ("linking raises detections under occlusion", 600, linking_direction),
        ("patch classifier cross validation", 300, classifier_cross_validation),
        ("chunk format round trip", 5, chunk_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|d| within(elapsed, *limit).map(|_| d));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {}: {tag} {name}: {detail} [{:.2} s]", i + 1, elapsed.as_secs_f64());
        failed += outcome.is_err() as usize;
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
