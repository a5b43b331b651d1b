mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lanemap::classify::{FeatureKind, ForestModel};
use lanemap::eval::{evaluate, EvalError};
use lanemap::geo;
use lanemap::pipeline::{self, PipelineConfig, PipelineError};
use lanemap::roadmodel::{ModelError, RoadModel, RoadSurface};
use lanemap::synth::{generate_scene, SceneSpec, SynthError};
use lanemap::tiles::{encode_png, TileError, TileSource};

/// Environment variable that overrides the tile cache directory.
const CACHE_ENV: &str = "LANEMAP_CACHE_DIR";

#[derive(Parser)]
#[command(name = "lanemap", version, about = "Lane-boundary extraction from overhead tile imagery")]
struct Cli {
    /// Worker threads for tile, classification and segmentation work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: tiles, truth model, surface and markings.
    Synth {
        /// Scene description (TOML).
        spec: PathBuf,
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the patch classifier on one or more data directories.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Data directory holding tiles/, truth/ and optionally surface.json
        /// and markings.json.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long = "model-out")]
        model_out: PathBuf,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        stride: Option<u32>,
        #[arg(long, value_parser = parse_feature)]
        feature: Option<FeatureKind>,
        /// Skip k-fold cross validation.
        #[arg(long)]
        no_cv: bool,
    },
    /// Classify, segment and link along a route; writes a road model.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Road model directory or GeoJSON LineString.
        #[arg(long)]
        route: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of `<map version>/<quadkey>.png` tiles.
        #[arg(long)]
        tiles: Option<PathBuf>,
        /// Tile URL template containing `{quadkey}`.
        #[arg(long)]
        tile_url: Option<String>,
        /// Drivable surface polygon; defaults to a corridor around the route.
        #[arg(long)]
        surface: Option<PathBuf>,
        #[arg(long)]
        map_version: Option<i64>,
        /// Skip gap interpolation between chunks.
        #[arg(long)]
        no_linking: bool,
    },
    /// Score a predicted road model against the truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "t-d")]
        t_d: Option<f64>,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-chunk CSV path.
        #[arg(long)]
        chunks_csv: Option<PathBuf>,
    },
    /// Draw models over the imagery.
    Render {
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long, default_value_t = 1)]
        map_version: i64,
        #[arg(long, default_value_t = 20)]
        level: u8,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long = "pred")]
        pred: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tables of the projection error and the tile span error.
    GeoError {
        #[arg(long, default_value_t = 20)]
        level: u8,
        #[arg(long, default_value_t = -80.0, allow_hyphen_values = true)]
        lat_min: f64,
        #[arg(long, default_value_t = 80.0, allow_hyphen_values = true)]
        lat_max: f64,
        #[arg(long, default_value_t = 5.0)]
        lat_step: f64,
        /// Largest horizontal shift in pixels.
        #[arg(long, default_value_t = 256.0)]
        dx_max: f64,
        #[arg(long, default_value_t = 32.0)]
        dx_step: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        dy: f64,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the tile span error over latitude and level.
        #[arg(long)]
        span_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_feature(s: &str) -> Result<FeatureKind, String> {
    FeatureKind::parse(s).ok_or_else(|| format!("unknown feature kind {s:?} (pixel, hog, lbp)"))
}

/// Failure with its exit code: 2 for usage or input problems, 3 for data
/// that is present but inconsistent.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    fn data(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Data(_) | PipelineError::Classify(_) => Self::data(msg),
            PipelineError::Model(m) => m.into(),
            PipelineError::Config(_) | PipelineError::Input(_) | PipelineError::Tile(_) | PipelineError::Geo(_) => {
                Self::input(msg)
            }
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } | ModelError::Parse { .. } => Self::input(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<TileError> for Failure {
    fn from(e: TileError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Threshold(_) => Self::input(e.to_string()),
            EvalError::Alignment(_) => Self::data(e.to_string()),
            EvalError::Model(m) => m.into(),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Model(m) => m.into(),
            _ => Self::input(e.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_toml(&read_text(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        cfg.tiles.cache_dir = Some(PathBuf::from(dir));
    }
    Ok(cfg)
}

fn validated(cfg: PipelineConfig) -> Result<PipelineConfig, Failure> {
    cfg.validate().map_err(|e| Failure::input(e.to_string()))?;
    Ok(cfg)
}

fn load_model_dir(path: &Path) -> Result<RoadModel, Failure> {
    if !path.is_dir() {
        return Err(Failure::input(format!("{} is not a road model directory", path.display())));
    }
    Ok(RoadModel::load_dir(path)?)
}

fn cmd_synth(spec: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec = SceneSpec::from_toml(&read_text(spec)?).map_err(|e| Failure::input(format!("{}: {e}", spec.display())))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate_scene(&spec)?;
    pipeline::write_scene_dir(&scene, out)?;
    println!(
        "wrote {} tiles and {} truth chunks to {}",
        scene.tiles.len(),
        scene.truth.chunks.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: &ConfigArgs,
    data: &[PathBuf],
    model_out: &Path,
    patch_size: Option<usize>,
    stride: Option<u32>,
    feature: Option<FeatureKind>,
    no_cv: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(cfg)?;
    if let Some(p) = patch_size {
        cfg.patch.size = p;
    }
    if let Some(s) = stride {
        cfg.patch.stride = s;
    }
    if let Some(f) = feature {
        cfg.patch.feature = f;
    }
    let cfg = validated(cfg)?;
    let sets = data
        .iter()
        .map(|d| pipeline::load_training_dir(d, Some(cfg.tiles.map_version)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = pipeline::train(&sets, &cfg, !no_cv)?;
    write_bytes(model_out, out.model.to_json())?;
    println!(
        "trained on {} positive and {} negative patches (size {}, {:?} features)",
        out.positives, out.negatives, out.model.patch_size, cfg.patch.feature
    );
    if let Some(cv) = out.cv {
        println!("{}-fold cv precision {:.4} recall {:.4}", cfg.patch.cv_folds, cv.precision, cv.recall);
    }
    println!("model written to {}", model_out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_extract(
    cfg: &ConfigArgs,
    model: &Path,
    route: &Path,
    out: &Path,
    tiles: Option<PathBuf>,
    tile_url: Option<String>,
    surface: Option<PathBuf>,
    map_version: Option<i64>,
    no_linking: bool,
) -> Result<(), Failure> {
    let mut cfg = load_config(cfg)?;
    if tiles.is_some() {
        cfg.tiles.root = tiles;
        cfg.tiles.url = None;
    }
    if tile_url.is_some() {
        cfg.tiles.url = tile_url;
    }
    if no_linking {
        cfg.extract.linking = false;
    }
    let forest = ForestModel::from_json(&read_text(model)?).map_err(|e| Failure::input(format!("{}: {e}", model.display())))?;
    if !route.exists() {
        return Err(Failure::input(format!("route {} does not exist", route.display())));
    }
    let (trajectory, chunk_length, route_version) = pipeline::load_route(route)?;
    if let Some(v) = map_version {
        cfg.tiles.map_version = v;
    } else if cfg.tiles.map_version == PipelineConfig::default().tiles.map_version {
        cfg.tiles.map_version = route_version;
    }
    let cfg = validated(cfg)?;
    let surface = surface.map(|p| RoadSurface::load(&p)).transpose()?;
    let src = cfg.tile_source()?;
    let center = lanemap::centerline::Centerline::new(&trajectory.points).ok_or(ModelError::DegenerateTrajectory)?;
    let mosaic = pipeline::fetch_route_tiles(&src, &center, cfg.extract.corridor_half_width, cfg.tiles.level)?;
    let result = pipeline::extract(
        &forest,
        &mosaic,
        &trajectory,
        surface.as_ref(),
        chunk_length,
        cfg.tiles.map_version,
        &cfg,
    )?;
    result.model.save_dir(out)?;
    let debug = out.join("debug");
    write_bytes(
        &debug.join("segments.geojson"),
        serde_json::to_string(&lanemap::segment::segments_geojson(&result.segments)).expect("json"),
    )?;
    write_bytes(
        &debug.join("groups.geojson"),
        serde_json::to_string(&lanemap::link::groups_geojson(&result.groups, &center)).expect("json"),
    )?;
    write_bytes(&debug.join("probability.png"), encode_png(&pipeline::probability_image(&result.probability)))?;
    println!(
        "extracted {} line groups over {} chunks{} into {}",
        result.groups.len(),
        result.model.chunks.len(),
        if cfg.extract.linking { "" } else { " (no linking)" },
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    cfg: &ConfigArgs,
    truth: &Path,
    pred: &Path,
    t_d: Option<f64>,
    report: Option<PathBuf>,
    chunks_csv: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = load_config(cfg)?;
    if let Some(t) = t_d {
        cfg.eval.t_d = t;
    }
    let cfg = validated(cfg)?;
    let truth = load_model_dir(truth)?;
    let pred = load_model_dir(pred)?;
    let r = evaluate(&truth, &pred, cfg.eval.t_d)?;
    print!("{}", r.to_table());
    if let Some(p) = report {
        write_bytes(&p, r.to_json())?;
    }
    if let Some(p) = chunks_csv {
        write_bytes(&p, r.chunks_csv())?;
    }
    Ok(())
}

fn cmd_render(
    tiles: PathBuf,
    map_version: i64,
    level: u8,
    truth: Option<PathBuf>,
    pred: &[PathBuf],
    out: &Path,
) -> Result<(), Failure> {
    geo::check_level(level).map_err(|e| Failure::input(e.to_string()))?;
    let truth = truth.as_deref().map(load_model_dir).transpose()?;
    let preds = pred.iter().map(|p| load_model_dir(p)).collect::<Result<Vec<_>, _>>()?;
    if truth.is_none() && preds.is_empty() {
        return Err(Failure::input("render needs --truth or at least one --pred"));
    }
    let src = TileSource::directory(tiles, map_version);
    let canvas = render::render(&src, truth.as_ref(), &preds, level).map_err(Failure::data)?;
    write_bytes(out, encode_png(&canvas.image))?;
    if canvas.missing_tiles > 0 {
        eprintln!("warning: {} tiles missing, drawn black", canvas.missing_tiles);
    }
    println!("wrote {}x{} overlay to {}", canvas.image.width, canvas.image.height, out.display());
    Ok(())
}

/// Inclusive grid `start, start + step, ...` up to `end`.
fn grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>, Failure> {
    if !(step > 0.0) || !(end >= start) || !start.is_finite() || !end.is_finite() {
        return Err(Failure::input(format!("invalid range {start}..{end} step {step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

#[allow(clippy::too_many_arguments)]
fn cmd_geo_error(
    level: u8,
    lat_min: f64,
    lat_max: f64,
    lat_step: f64,
    dx_max: f64,
    dx_step: f64,
    dy: f64,
    out: &Path,
    span_out: Option<PathBuf>,
) -> Result<(), Failure> {
    let lats = grid(lat_min, lat_max, lat_step)?;
    let dxs = grid(0.0, dx_max, dx_step)?;
    let input = |e: geo::GeoError| Failure::input(e.to_string());
    geo::check_level(level).map_err(input)?;
    let mut csv = String::from("lat,dx,dy,level,d_p\n");
    let mut worst: f64 = 0.0;
    for &lat in &lats {
        for &dx in &dxs {
            let d = geo::mercator_cartesian_error_dp(lat, dx, dy, level).map_err(input)?;
            worst = worst.max(d);
            csv.push_str(&format!("{lat},{dx},{dy},{level},{d:.9}\n"));
        }
    }
    write_bytes(out, csv)?;
    println!("{} cells, max d_p {:.4} m", lats.len() * dxs.len(), worst);
    if let Some(path) = span_out {
        let mut csv = String::from("lat,level,d_e\n");
        for &lat in &lats {
            for l in geo::MIN_LEVEL..=geo::MAX_LEVEL {
                let px = geo::latlon_to_pixel(&geo::GeoPoint::new(lat, 0.0), l).map_err(input)?;
                let (tx, ty) = px.tile();
                let d = geo::tile_span_error_de(tx, ty, l).map_err(input)?;
                csv.push_str(&format!("{lat},{l},{d:.9}\n"));
            }
        }
        write_bytes(&path, csv)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Failure::input("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { spec, out, seed } => cmd_synth(&spec, &out, seed),
        Command::Train {
            cfg,
            data,
            model_out,
            patch_size,
            stride,
            feature,
            no_cv,
        } => cmd_train(&cfg, &data, &model_out, patch_size, stride, feature, no_cv),
        Command::Extract {
            cfg,
            model,
            route,
            out,
            tiles,
            tile_url,
            surface,
            map_version,
            no_linking,
        } => cmd_extract(&cfg, &model, &route, &out, tiles, tile_url, surface, map_version, no_linking),
        Command::Eval {
            cfg,
            truth,
            pred,
            t_d,
            report,
            chunks_csv,
        } => cmd_eval(&cfg, &truth, &pred, t_d, report, chunks_csv),
        Command::Render {
            tiles,
            map_version,
            level,
            truth,
            pred,
            out,
        } => cmd_render(tiles, map_version, level, truth, &pred, &out),
        Command::GeoError {
            level,
            lat_min,
            lat_max,
            lat_step,
            dx_max,
            dx_step,
            dy,
            out,
            span_out,
        } => cmd_geo_error(level, lat_min, lat_max, lat_step, dx_max, dx_step, dy, &out, span_out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
