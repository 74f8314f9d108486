use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dlcal::config::{Layout, SensorConfig};
use dlcal::io::{self, Colormap, OverlayParams};
use dlcal::pipeline::{calibrate, format_summary, CalibrateParams, CalibrationInput};
use dlcal::response::{compare_modes, ResponseMap, DEFAULT_REL_THRESHOLD};
use dlcal::sim::{default_kernel_bank, simulate_scan, KernelBank, NoiseKind, SceneSpec, SimConfig};
use dlcal::{Error, Result};

/// Spatial calibration of multi-zone diffuse LiDAR sensors against an RGB camera.
///
/// Exit codes: 0 success, 2 configuration error, 3 invalid or inconsistent
/// input data, 4 degenerate data (no signal, flat maps, too few detections),
/// 5 filesystem error.
#[derive(Debug, Parser)]
#[command(name = "dlcal", version)]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scan dataset with known ground truth.
    Simulate(SimulateArgs),
    /// Estimate per-pixel response maps from a scan dataset.
    Calibrate(CalibrateArgs),
    /// Compare two sets of response maps.
    Compare(CompareArgs),
    /// Overlay response maps on an RGB image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `sim`, `scene` and optional `kernel_bank` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_noise)]
    noise: Option<NoiseKind>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    /// Zone layout: 3x3-wide, 4x4, 3x6 or 8x8.
    #[arg(long, value_parser = parse_layout)]
    layout: Option<Layout>,
}

#[derive(Debug, Args)]
struct HoughArgs {
    #[arg(long)]
    r_min: Option<u32>,
    #[arg(long)]
    r_max: Option<u32>,
    /// Edge threshold as a fraction of the strongest gradient.
    #[arg(long)]
    gradient_threshold: Option<f64>,
    #[arg(long)]
    vote_threshold: Option<u32>,
    #[arg(long)]
    blur_radius: Option<u32>,
    /// Absolute gradient floor, in intensity per pixel.
    #[arg(long)]
    min_edge_strength: Option<f64>,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    /// viridis or gray.
    #[arg(long, value_parser = parse_colormap)]
    colormap: Option<Colormap>,
    #[arg(long)]
    opacity: Option<f64>,
    /// Splat radius in px (default: half the anchor spacing).
    #[arg(long)]
    splat_radius: Option<f64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for maps, overlays and the summary.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `calibrate` and `overlay` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Explicit depth window LO:HI (inclusive bins).
    #[arg(long, value_parser = parse_window)]
    window: Option<(usize, usize)>,
    /// Half-width of the automatically selected window.
    #[arg(long)]
    half_width: Option<usize>,
    /// Support threshold relative to the map peak.
    #[arg(long)]
    rel_threshold: Option<f64>,
    /// Minimum fraction of scan points with a valid detection.
    #[arg(long)]
    min_valid_fraction: Option<f64>,
    #[command(flatten)]
    hough: HoughArgs,
    #[command(flatten)]
    overlay: OverlayArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// First maps directory.
    a: PathBuf,
    /// Second maps directory.
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a `rel_threshold` field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rel_threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Maps directory.
    #[arg(long)]
    maps: PathBuf,
    /// Base RGB image (PNG).
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with overlay parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overlay: OverlayArgs,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    sim: SimConfig,
    scene: SceneSpec,
    /// Defaults to the built-in bank for the sensor layout.
    kernel_bank: Option<KernelBank>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CalibrateConfig {
    calibrate: CalibrateParams,
    overlay: OverlayParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareConfig {
    rel_threshold: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            rel_threshold: DEFAULT_REL_THRESHOLD,
        }
    }
}

#[derive(Debug, Serialize)]
struct Echo<'a, T> {
    command: &'static str,
    inputs: Vec<String>,
    config: &'a T,
}

fn parse_named<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_layout(s: &str) -> std::result::Result<Layout, String> {
    parse_named(s)
}

fn parse_noise(s: &str) -> std::result::Result<NoiseKind, String> {
    parse_named(s)
}

fn parse_colormap(s: &str) -> std::result::Result<Colormap, String> {
    parse_named(s)
}

fn parse_window(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

/// Reads an optional config file; parse problems are configuration errors.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    io::read_json(path).map_err(|e| match e {
        Error::Parse { path, msg } => Error::Config(format!("{}: {msg}", path.display())),
        Error::MissingFile { path } => Error::Config(format!("config file {} not found", path.display())),
        other => other,
    })
}

fn echo<T: Serialize>(dir: &Path, command: &'static str, inputs: &[&Path], config: &T) -> Result<()> {
    let inputs = inputs.iter().map(|p| p.display().to_string()).collect();
    io::write_json(&dir.join("effective_config.json"), &Echo { command, inputs, config })
}

fn apply_overlay(params: &mut OverlayParams, args: &OverlayArgs) {
    if let Some(c) = args.colormap {
        params.colormap = c;
    }
    if let Some(o) = args.opacity {
        params.opacity = o;
    }
    if let Some(r) = args.splat_radius {
        params.splat_radius = Some(r);
    }
}

fn write_overlays(dir: &Path, maps: &[ResponseMap], base: &image::RgbImage, params: &OverlayParams) -> Result<()> {
    io::create_dir(dir)?;
    for m in maps {
        let img = io::render_overlay(&[m], base, params)?;
        io::write_png(&dir.join(format!("pixel_{:02}.png", m.pixel)), &img)?;
    }
    let all: Vec<&ResponseMap> = maps.iter().collect();
    io::write_png(&dir.join("composite.png"), &io::render_overlay(&all, base, params)?)
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg: SimulateConfig = load_config(args.config.as_deref())?;
    let sim = &mut cfg.sim;
    if let Some(layout) = args.layout {
        sim.sensor = SensorConfig {
            pixel_count: layout.pixel_count(),
            layout,
            ..sim.sensor.clone()
        };
    }
    if let Some(seed) = args.seed {
        sim.seed = seed;
    }
    if let Some(noise) = args.noise {
        sim.noise = noise;
    }
    if let Some(cols) = args.cols {
        sim.grid.cols = cols;
    }
    if let Some(rows) = args.rows {
        sim.grid.rows = rows;
    }
    sim.validate()?;
    let bank = match &cfg.kernel_bank {
        Some(b) => b.clone(),
        None => default_kernel_bank(sim.sensor.layout, sim.frame)?,
    };
    io::create_dir(&args.out)?;
    let manifest = simulate_scan(&bank, &cfg.scene, &cfg.sim, &args.out, None)?;
    echo(&args.out, "simulate", &[], &cfg)?;
    println!(
        "wrote {} scan points ({}x{}) to {}",
        manifest.scans.len(),
        manifest.grid.cols,
        manifest.grid.rows,
        args.out.display()
    );
    Ok(())
}

fn run_calibrate(args: &CalibrateArgs) -> Result<()> {
    let mut cfg: CalibrateConfig = load_config(args.config.as_deref())?;
    let p = &mut cfg.calibrate;
    if args.window.is_some() {
        p.window = args.window;
    }
    if let Some(v) = args.half_width {
        p.half_width = v;
    }
    if let Some(v) = args.rel_threshold {
        p.rel_threshold = v;
    }
    if let Some(v) = args.min_valid_fraction {
        p.min_valid_fraction = v;
    }
    let h = &mut p.hough;
    let a = &args.hough;
    if let Some(v) = a.r_min {
        h.r_min = v;
    }
    if let Some(v) = a.r_max {
        h.r_max = v;
    }
    if let Some(v) = a.gradient_threshold {
        h.gradient_threshold = v;
    }
    if let Some(v) = a.vote_threshold {
        h.vote_threshold = v;
    }
    if let Some(v) = a.blur_radius {
        h.blur_radius = v;
    }
    if let Some(v) = a.min_edge_strength {
        h.min_edge_strength = v;
    }
    apply_overlay(&mut cfg.overlay, &args.overlay);

    let dataset = io::load_dataset(&args.dataset)?;
    let cal = calibrate(&CalibrationInput::from_dataset(&dataset), &cfg.calibrate)?;
    io::save_response_maps(
        &args.out,
        &cal.maps,
        &cal.masks,
        &cal.detections,
        cfg.calibrate.rel_threshold,
        Some(dataset.manifest.frame),
    )?;
    let base_path = dataset
        .background_frame_paths
        .first()
        .ok_or_else(|| Error::Consistency("dataset has no background frames".into()))?;
    let base = io::read_png(base_path)?;
    write_overlays(&args.out.join("overlays"), &cal.maps, &base, &cfg.overlay)?;
    io::write_json(&args.out.join("summary.json"), &cal.summary)?;
    let text = format_summary(&cal.summary);
    std::fs::write(args.out.join("summary.txt"), &text).map_err(|e| Error::Io {
        path: args.out.join("summary.txt"),
        source: e,
    })?;
    echo(&args.out, "calibrate", &[&args.dataset], &cfg)?;
    for w in &cal.summary.warnings {
        eprintln!("warning: {w}");
    }
    print!("{text}");
    Ok(())
}

fn run_compare(args: &CompareArgs) -> Result<()> {
    let mut cfg: CompareConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.rel_threshold {
        cfg.rel_threshold = v;
    }
    let a = io::load_response_maps(&args.a)?;
    let b = io::load_response_maps(&args.b)?;
    if a.maps.len() != b.maps.len() {
        return Err(Error::Consistency(format!(
            "{} has {} pixels, {} has {}",
            args.a.display(),
            a.maps.len(),
            args.b.display(),
            b.maps.len()
        )));
    }
    if a.meta.grid != b.meta.grid {
        return Err(Error::Consistency(format!(
            "grids differ: {}x{} in {} vs {}x{} in {}",
            a.meta.grid.cols,
            a.meta.grid.rows,
            args.a.display(),
            b.meta.grid.cols,
            b.meta.grid.rows,
            args.b.display()
        )));
    }
    let report = compare_modes(&a.maps, &b.maps, cfg.rel_threshold)?;
    io::create_dir(&args.out)?;
    io::write_consistency_report(&args.out, &report)?;
    echo(&args.out, "compare", &[&args.a, &args.b], &cfg)?;
    print!("{}", io::format_consistency_report(&report));
    Ok(())
}

fn run_render(args: &RenderArgs) -> Result<()> {
    let mut params: OverlayParams = load_config(args.config.as_deref())?;
    apply_overlay(&mut params, &args.overlay);
    let maps = io::load_response_maps(&args.maps)?;
    let base = io::read_png(&args.base)?;
    write_overlays(&args.out, &maps.maps, &base, &params)?;
    echo(&args.out, "render", &[&args.maps, &args.base], &params)?;
    println!("wrote {} overlays to {}", maps.maps.len() + 1, args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Compare(a) => run_compare(a),
        Command::Render(a) => run_render(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
