//! On-disk formats.
//!
//! A dataset is one directory:
//!
//! ```text
//! manifest.json          DatasetManifest (format_version 1)
//! hist/scan_NNNNN.csv    patch-present histograms, P rows x T integer columns
//! bg_hist/scan_NNNNN.csv patch-removed histograms, same shape
//! frames/scan_NNNNN.png  8-bit RGB frames of the patch-present scan
//! bg_frames/scan_NNNNN.png
//! ground_truth.csv       simulator only, see `GroundTruth`
//! ```
//!
//! A maps directory written by `save_response_maps` holds `maps.json`,
//! `detections.csv` and three grid CSVs per pixel (`pixel_PP_values.csv`,
//! `pixel_PP_valid.csv`, `pixel_PP_support.csv`), each `rows` lines of `cols`
//! comma-separated fields. Reals are written in shortest round-trip form.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{GridSpec, RgbFrameSpec, SensorConfig};
use crate::detect::{DetectedCircle, PatchDetection};
use crate::error::{Error, Result};
use crate::histogram::{BinWindow, CubeKind, HistogramCube};
use crate::pipeline::FrameSource;
use crate::response::{ConsistencyReport, ResponseMap, SupportMask};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAPS_FILE: &str = "maps.json";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

pub fn scan_file_stem(k: usize) -> String {
    format!("scan_{k:05}")
}

// ---------------------------------------------------------------- helpers

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingFile { path: path.into() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Lossless PNG with fixed encoder settings, so equal images give equal bytes.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(&mut buf, CompressionType::Fast, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(Error::MissingFile { path: path.into() });
    }
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            msg: format!("{other:?}"),
        },
    }
}

/// Reads a headerless CSV into rows of trimmed string fields.
fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    if !path.is_file() {
        return Err(Error::MissingFile { path: path.into() });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    rdr.records()
        .map(|r| {
            r.map(|rec| rec.iter().map(str::to_owned).collect())
                .map_err(|e| csv_err(path, e))
        })
        .collect()
}

fn write_grid<T: ToString>(path: &Path, grid: GridSpec, cells: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in cells.chunks(grid.cols) {
        w.write_record(row.iter().map(ToString::to_string))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_grid<T>(path: &Path, grid: GridSpec, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let rows = read_rows(path)?;
    if rows.len() != grid.rows {
        return Err(Error::Shape {
            path: path.into(),
            msg: format!("{} rows, expected {}", rows.len(), grid.rows),
        });
    }
    let mut out = Vec::with_capacity(grid.len());
    for (r, row) in rows.iter().enumerate() {
        if row.len() != grid.cols {
            return Err(Error::Shape {
                path: path.into(),
                msg: format!("row {r} has {} fields, expected {}", row.len(), grid.cols),
            });
        }
        for (c, field) in row.iter().enumerate() {
            out.push(parse(field).ok_or_else(|| Error::Parse {
                path: path.into(),
                msg: format!("row {r} column {c}: cannot parse {field:?}"),
            })?);
        }
    }
    Ok(out)
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn flag(b: &bool) -> &'static str {
    if *b {
        "1"
    } else {
        "0"
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub index: usize,
    pub frame_path: String,
    pub hist_path: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub sensor: SensorConfig,
    pub grid: GridSpec,
    pub frame: RgbFrameSpec,
    #[serde(default)]
    pub window: Option<BinWindow>,
    pub scans: Vec<ScanEntry>,
    pub background: Vec<ScanEntry>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Manifest with the standard per-scan file layout.
    pub fn standard(sensor: SensorConfig, grid: GridSpec, frame: RgbFrameSpec, provenance: Provenance) -> Self {
        let entries = |frames: &str, hist: &str| -> Vec<ScanEntry> {
            (0..grid.len())
                .map(|k| ScanEntry {
                    index: k,
                    frame_path: format!("{frames}/{}.png", scan_file_stem(k)),
                    hist_path: format!("{hist}/{}.csv", scan_file_stem(k)),
                })
                .collect()
        };
        Self {
            format_version: FORMAT_VERSION,
            sensor,
            grid,
            frame,
            window: None,
            scans: entries("frames", "hist"),
            background: entries("bg_frames", "bg_hist"),
            provenance,
        }
    }

    fn check_entries(&self, what: &str, entries: &[ScanEntry]) -> Result<()> {
        let k_total = self.grid.len();
        let mut seen = vec![false; k_total];
        for e in entries {
            if e.index >= k_total {
                return Err(Error::Range {
                    what: "scan index",
                    index: e.index,
                    limit: k_total,
                });
            }
            if std::mem::replace(&mut seen[e.index], true) {
                return Err(Error::DuplicateIndex {
                    what: what.into(),
                    index: e.index,
                });
            }
        }
        let missing: Vec<usize> = (0..k_total).filter(|&k| !seen[k]).collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteDataset {
                what: what.into(),
                missing,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "manifest format_version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.sensor.validate()?;
        self.grid.validate()?;
        self.frame.validate()?;
        if let Some(w) = self.window {
            BinWindow::new(w.lo(), w.hi(), self.sensor.bin_count)?;
        }
        self.check_entries("scans", &self.scans)?;
        self.check_entries("background", &self.background)
    }
}

pub fn write_histogram(path: &Path, cube: &HistogramCube) -> Result<()> {
    let mut w = csv_writer(path)?;
    for p in 0..cube.pixels() {
        w.write_record(cube.pixel(p).iter().map(u32::to_string))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates one histogram file against the sensor description.
pub fn read_histogram(path: &Path, sensor: &SensorConfig, index: usize, kind: CubeKind) -> Result<HistogramCube> {
    let rows = read_rows(path)?;
    if rows.len() != sensor.pixel_count {
        return Err(Error::Shape {
            path: path.into(),
            msg: format!("{} histogram rows, expected {} pixels", rows.len(), sensor.pixel_count),
        });
    }
    let mut counts = Vec::with_capacity(sensor.pixel_count * sensor.bin_count);
    for (row, fields) in rows.iter().enumerate() {
        if fields.len() != sensor.bin_count {
            return Err(Error::Shape {
                path: path.into(),
                msg: format!("row {row} has {} bins, expected {}", fields.len(), sensor.bin_count),
            });
        }
        for (bin, field) in fields.iter().enumerate() {
            let value: i64 = field.parse().map_err(|_| Error::Parse {
                path: path.into(),
                msg: format!("row {row} bin {bin}: {field:?} is not an integer count"),
            })?;
            if value < 0 {
                return Err(Error::NegativeCount {
                    path: path.into(),
                    index,
                    row,
                    bin,
                    value,
                });
            }
            if value > sensor.max_count as i64 {
                return Err(Error::CountOverflow {
                    path: path.into(),
                    index,
                    row,
                    bin,
                    value,
                    max: sensor.max_count,
                });
            }
            counts.push(value as u32);
        }
    }
    HistogramCube::new(sensor.pixel_count, sensor.bin_count, counts, index, kind)
}

/// A validated dataset: histograms in memory, frames referenced by path.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Indexed by scan index.
    pub patch: Vec<HistogramCube>,
    pub background: Vec<HistogramCube>,
    pub frame_paths: Vec<PathBuf>,
    pub background_frame_paths: Vec<PathBuf>,
}

impl Dataset {
    pub fn ground_truth_path(&self) -> Option<PathBuf> {
        self.manifest
            .provenance
            .ground_truth
            .as_ref()
            .map(|p| self.root.join(p))
    }
}

impl FrameSource for Dataset {
    fn frame(&self, k: usize) -> Result<RgbImage> {
        let path = self.frame_paths.get(k).ok_or(Error::Range {
            what: "scan index",
            index: k,
            limit: self.frame_paths.len(),
        })?;
        read_png(path)
    }
}

fn check_frame(path: &Path, frame: &RgbFrameSpec) -> Result<()> {
    if !path.is_file() {
        return Err(Error::MissingFile { path: path.into() });
    }
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    if (w, h) != (frame.width, frame.height) {
        return Err(Error::Shape {
            path: path.into(),
            msg: format!("frame is {w}x{h}, expected {}x{}", frame.width, frame.height),
        });
    }
    Ok(())
}

fn load_side(
    root: &Path,
    manifest: &DatasetManifest,
    entries: &[ScanEntry],
    kind: CubeKind,
) -> Result<(Vec<HistogramCube>, Vec<PathBuf>)> {
    let mut sorted: Vec<&ScanEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.index);
    // per-file results are gathered in index order so the reported error is
    // always the one for the lowest failing index
    let loaded: Vec<Result<(HistogramCube, PathBuf)>> = sorted
        .par_iter()
        .map(|e| {
            let hist = root.join(&e.hist_path);
            if !hist.is_file() {
                return Err(Error::MissingFile { path: hist });
            }
            let cube = read_histogram(&hist, &manifest.sensor, e.index, kind)?;
            let frame = root.join(&e.frame_path);
            check_frame(&frame, &manifest.frame)?;
            Ok((cube, frame))
        })
        .collect();
    let mut cubes = Vec::with_capacity(loaded.len());
    let mut frames = Vec::with_capacity(loaded.len());
    for r in loaded {
        let (c, f) = r?;
        cubes.push(c);
        frames.push(f);
    }
    Ok((cubes, frames))
}

/// Loads a dataset from its directory or from the manifest file itself.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    manifest.validate()?;
    let (patch, frame_paths) = load_side(&root, &manifest, &manifest.scans, CubeKind::PatchPresent)?;
    let (background, background_frame_paths) =
        load_side(&root, &manifest, &manifest.background, CubeKind::Background)?;
    if let Some(gt) = &manifest.provenance.ground_truth {
        let p = root.join(gt);
        if !p.is_file() {
            return Err(Error::MissingFile { path: p });
        }
    }
    Ok(Dataset {
        root,
        manifest,
        patch,
        background,
        frame_paths,
        background_frame_paths,
    })
}

// ---------------------------------------------------------------- ground truth

/// Simulator ground truth sampled at the scan positions.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub grid: GridSpec,
    /// Patch centre of each scan index.
    pub positions: Vec<(f64, f64)>,
    /// `kernel_value[p][k]`: kernel of pixel `p` at the patch centre.
    pub kernel_value: Vec<Vec<f64>>,
    /// `disk_mass[p][k]`: kernel of pixel `p` integrated over the patch disk.
    pub disk_mass: Vec<Vec<f64>>,
}

const GT_HEADER: [&str; 8] = ["scan_index", "row", "col", "x", "y", "pixel", "kernel_value", "disk_mass"];

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(GT_HEADER).map_err(|e| csv_err(path, e))?;
    for (k, &(x, y)) in gt.positions.iter().enumerate() {
        let (row, col) = gt.grid.snake_index_to_cell(k)?;
        for p in 0..gt.kernel_value.len() {
            w.write_record([
                k.to_string(),
                row.to_string(),
                col.to_string(),
                x.to_string(),
                y.to_string(),
                p.to_string(),
                gt.kernel_value[p][k].to_string(),
                gt.disk_mass[p][k].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path, grid: GridSpec, pixels: usize) -> Result<GroundTruth> {
    let rows = read_rows(path)?;
    let k_total = grid.len();
    let mut gt = GroundTruth {
        grid,
        positions: vec![(f64::NAN, f64::NAN); k_total],
        kernel_value: vec![vec![f64::NAN; k_total]; pixels],
        disk_mass: vec![vec![f64::NAN; k_total]; pixels],
    };
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.into(),
        msg: format!("line {}: {msg}", line + 1),
    };
    if rows.first().map(|r| r.iter().map(String::as_str).eq(GT_HEADER)) != Some(true) {
        return Err(bad(0, "unexpected header"));
    }
    for (line, row) in rows.iter().enumerate().skip(1) {
        if row.len() != GT_HEADER.len() {
            return Err(bad(line, "wrong field count"));
        }
        let int = |i: usize| row[i].parse::<usize>().map_err(|_| bad(line, "bad integer"));
        let real = |i: usize| row[i].parse::<f64>().map_err(|_| bad(line, "bad number"));
        let (k, p) = (int(0)?, int(5)?);
        if k >= k_total || p >= pixels {
            return Err(bad(line, "scan or pixel index out of range"));
        }
        gt.positions[k] = (real(3)?, real(4)?);
        gt.kernel_value[p][k] = real(6)?;
        gt.disk_mass[p][k] = real(7)?;
    }
    if gt.disk_mass.iter().flatten().any(|v| v.is_nan()) {
        return Err(bad(rows.len(), "ground truth does not cover every (scan, pixel)"));
    }
    Ok(gt)
}

// ---------------------------------------------------------------- response maps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsMeta {
    pub format_version: u32,
    pub pixel_count: usize,
    pub grid: GridSpec,
    pub normalized: bool,
    pub rel_threshold: f64,
    #[serde(default)]
    pub frame: Option<RgbFrameSpec>,
}

fn pixel_file(dir: &Path, p: usize, what: &str) -> PathBuf {
    dir.join(format!("pixel_{p:02}_{what}.csv"))
}

pub fn write_detections(path: &Path, detections: &[PatchDetection]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scan_index", "x", "y", "radius", "votes", "valid"])
        .map_err(|e| csv_err(path, e))?;
    for d in detections {
        let rec = match d.circle {
            Some(c) => [
                d.scan_index.to_string(),
                c.x.to_string(),
                c.y.to_string(),
                c.radius.to_string(),
                c.votes.to_string(),
                "1".into(),
            ],
            None => [
                d.scan_index.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "0".into(),
            ],
        };
        w.write_record(rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<PatchDetection>> {
    let rows = read_rows(path)?;
    let bad = |line: usize, msg: String| Error::Parse {
        path: path.into(),
        msg: format!("line {}: {msg}", line + 1),
    };
    rows.iter()
        .enumerate()
        .skip(1)
        .map(|(line, row)| {
            if row.len() != 6 {
                return Err(bad(line, format!("{} fields, expected 6", row.len())));
            }
            let scan_index = row[0].parse().map_err(|_| bad(line, "bad scan index".into()))?;
            let circle = match row[5].as_str() {
                "0" => None,
                "1" => {
                    let real = |i: usize| row[i].parse::<f64>().map_err(|_| bad(line, format!("bad number {:?}", row[i])));
                    Some(DetectedCircle {
                        x: real(1)?,
                        y: real(2)?,
                        radius: real(3)?,
                        votes: row[4].parse().map_err(|_| bad(line, "bad vote count".into()))?,
                    })
                }
                other => return Err(bad(line, format!("valid flag {other:?}"))),
            };
            Ok(PatchDetection { scan_index, circle })
        })
        .collect()
}

/// Writes maps, their validity and support masks, detections and `maps.json`.
pub fn save_response_maps(
    dir: &Path,
    maps: &[ResponseMap],
    masks: &[SupportMask],
    detections: &[PatchDetection],
    rel_threshold: f64,
    frame: Option<RgbFrameSpec>,
) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Consistency("no maps to save".into()))?;
    if masks.len() != maps.len() {
        return Err(Error::Consistency(format!(
            "{} maps but {} support masks",
            maps.len(),
            masks.len()
        )));
    }
    let grid = first.grid;
    if maps.iter().any(|m| m.grid != grid || m.is_normalized() != first.is_normalized()) {
        return Err(Error::Consistency("maps differ in grid or normalisation".into()));
    }
    create_dir(dir)?;
    for (p, (m, s)) in maps.iter().zip(masks).enumerate() {
        write_grid(&pixel_file(dir, p, "values"), grid, m.values())?;
        let valid: Vec<&str> = m.valid().iter().map(flag).collect();
        write_grid(&pixel_file(dir, p, "valid"), grid, &valid)?;
        let support: Vec<&str> = s.mask().iter().map(flag).collect();
        write_grid(&pixel_file(dir, p, "support"), grid, &support)?;
    }
    write_detections(&dir.join(DETECTIONS_FILE), detections)?;
    write_json(
        &dir.join(MAPS_FILE),
        &MapsMeta {
            format_version: FORMAT_VERSION,
            pixel_count: maps.len(),
            grid,
            normalized: first.is_normalized(),
            rel_threshold,
            frame,
        },
    )
}

#[derive(Debug, Clone)]
pub struct LoadedMaps {
    pub meta: MapsMeta,
    pub maps: Vec<ResponseMap>,
    pub masks: Vec<SupportMask>,
    pub detections: Vec<PatchDetection>,
}

pub fn load_response_maps(dir: &Path) -> Result<LoadedMaps> {
    let meta: MapsMeta = read_json(&dir.join(MAPS_FILE))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "maps format_version {} unsupported",
            meta.format_version
        )));
    }
    meta.grid.validate()?;
    let grid = meta.grid;
    let det_path = dir.join(DETECTIONS_FILE);
    let detections = read_detections(&det_path)?;
    let mut anchors = vec![None; grid.len()];
    let mut seen = vec![false; grid.len()];
    for d in &detections {
        let (row, col) = grid.snake_index_to_cell(d.scan_index)?;
        if std::mem::replace(&mut seen[d.scan_index], true) {
            return Err(Error::DuplicateIndex {
                what: det_path.display().to_string(),
                index: d.scan_index,
            });
        }
        anchors[grid.flat(row, col)] = d.center();
    }
    let missing: Vec<usize> = (0..grid.len()).filter(|&k| !seen[k]).collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteDataset {
            what: det_path.display().to_string(),
            missing,
        });
    }
    let mut maps = Vec::with_capacity(meta.pixel_count);
    let mut masks = Vec::with_capacity(meta.pixel_count);
    for p in 0..meta.pixel_count {
        let values = read_grid(&pixel_file(dir, p, "values"), grid, |s| s.parse::<f64>().ok())?;
        let valid = read_grid(&pixel_file(dir, p, "valid"), grid, parse_flag)?;
        let support = read_grid(&pixel_file(dir, p, "support"), grid, parse_flag)?;
        let map_anchors: Vec<Option<(f64, f64)>> = anchors
            .iter()
            .zip(&valid)
            .map(|(a, &ok)| if ok { *a } else { None })
            .collect();
        if valid.iter().zip(&anchors).any(|(&ok, a)| ok && a.is_none()) {
            return Err(Error::Consistency(format!(
                "pixel {p}: valid cell without a valid detection"
            )));
        }
        maps.push(ResponseMap::from_parts(p, grid, values, valid, map_anchors, meta.normalized)?);
        masks.push(SupportMask::new(p, grid, support)?);
    }
    Ok(LoadedMaps {
        meta,
        maps,
        masks,
        detections,
    })
}

// ---------------------------------------------------------------- reports

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "undefined".into())
}

/// Key-value text rendering of a consistency report.
pub fn format_consistency_report(r: &ConsistencyReport) -> String {
    let mut s = String::new();
    s.push_str("# response map consistency report\n");
    s.push_str(&format!("rel_threshold = {}\n", r.rel_threshold));
    s.push_str(&format!("pixel_count = {}\n", r.pixels.len()));
    s.push_str(&format!("invalid_cells_a = {}\n", r.invalid_cells_a));
    s.push_str(&format!("invalid_cells_b = {}\n", r.invalid_cells_b));
    for px in &r.pixels {
        s.push_str(&format!("\n[pixel {}]\n", px.pixel));
        s.push_str(&format!("iou = {}\n", opt(px.iou)));
        s.push_str(&format!("centroid_displacement_px = {}\n", opt(px.centroid_displacement)));
        s.push_str(&format!("cosine = {}\n", opt(px.cosine)));
        for note in &px.notes {
            s.push_str(&format!("note = {note}\n"));
        }
    }
    s.push_str("\n[aggregate]\n");
    for (name, a) in [
        ("iou", &r.iou),
        ("centroid_displacement_px", &r.centroid_displacement),
        ("cosine", &r.cosine),
    ] {
        s.push_str(&format!("{name}_mean = {}\n", a.mean));
        s.push_str(&format!("{name}_std = {}\n", a.std));
        s.push_str(&format!("{name}_count = {}\n", a.count));
        s.push_str(&format!("{name}_undefined = {}\n", a.undefined));
    }
    s.push_str(&format!(
        "summary = IoU {:.3} ± {:.3}; centroid displacement {:.2} ± {:.2} px; cosine {:.3} ± {:.3}\n",
        r.iou.mean, r.iou.std, r.centroid_displacement.mean, r.centroid_displacement.std, r.cosine.mean, r.cosine.std
    ));
    s
}

/// Writes `consistency.txt`, `consistency.csv` and `consistency.json`.
pub fn write_consistency_report(dir: &Path, r: &ConsistencyReport) -> Result<()> {
    create_dir(dir)?;
    let txt = dir.join("consistency.txt");
    fs::write(&txt, format_consistency_report(r)).map_err(|e| Error::io(&txt, e))?;
    let csv_path = dir.join("consistency.csv");
    let mut w = csv_writer(&csv_path)?;
    let rec = |w: &mut csv::Writer<fs::File>, fields: [String; 4]| {
        w.write_record(fields).map_err(|e| csv_err(&csv_path, e))
    };
    rec(&mut w, ["pixel".into(), "iou".into(), "centroid_displacement_px".into(), "cosine".into()])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for px in &r.pixels {
        rec(&mut w, [px.pixel.to_string(), cell(px.iou), cell(px.centroid_displacement), cell(px.cosine)])?;
    }
    rec(&mut w, ["mean".into(), r.iou.mean.to_string(), r.centroid_displacement.mean.to_string(), r.cosine.mean.to_string()])?;
    rec(&mut w, ["std".into(), r.iou.std.to_string(), r.centroid_displacement.std.to_string(), r.cosine.std.to_string()])?;
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_json(&dir.join("consistency.json"), r)
}

// ---------------------------------------------------------------- overlays

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Viridis,
    Gray,
}

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

impl Colormap {
    /// Colour for `v` in [0, 1].
    pub fn color(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [255.0 * v; 3],
            Colormap::Viridis => {
                let pos = v * (VIRIDIS.len() - 1) as f64;
                let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
                let f = pos - i as f64;
                let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
                [0, 1, 2].map(|c| a[c] + f * (b[c] - a[c]))
            }
        }
    }

    pub fn top(self) -> [u8; 3] {
        self.color(1.0).map(|c| c.round() as u8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayParams {
    pub colormap: Colormap,
    /// Blend weight at value 1; a cell of value `v` blends with `opacity * v`.
    pub opacity: f64,
    /// Splat radius in px; half the anchor spacing when unset.
    pub splat_radius: Option<f64>,
}

impl Default for OverlayParams {
    fn default() -> Self {
        Self {
            colormap: Colormap::Viridis,
            opacity: 1.0,
            splat_radius: None,
        }
    }
}

/// Half the median distance between horizontally adjacent valid anchors.
fn auto_splat_radius(map: &ResponseMap) -> f64 {
    let g = map.grid;
    let mut d: Vec<f64> = Vec::new();
    for r in 0..g.rows {
        for c in 1..g.cols {
            if let (Some(a), Some(b)) = (map.anchors()[g.flat(r, c - 1)], map.anchors()[g.flat(r, c)]) {
                d.push((a.0 - b.0).hypot(a.1 - b.1));
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    (0.5 * d[d.len() / 2]).max(1.0)
}

fn splat_field(maps: &[&ResponseMap], width: u32, height: u32, radius: f64) -> Vec<f64> {
    let mut field = vec![0.0_f64; (width * height) as usize];
    for m in maps {
        for (v, a) in m.values().iter().zip(m.anchors()) {
            let (Some((ax, ay)), true) = (a, *v > 0.0) else {
                continue;
            };
            let x0 = (ax - radius).floor().max(0.0) as u32;
            let y0 = (ay - radius).floor().max(0.0) as u32;
            let x1 = ((ax + radius).ceil().max(0.0) as u32).min(width.saturating_sub(1));
            let y1 = ((ay + radius).ceil().max(0.0) as u32).min(height.saturating_sub(1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if (x as f64 - ax).hypot(y as f64 - ay) <= radius {
                        let f = &mut field[(y * width + x) as usize];
                        *f = f.max(*v);
                    }
                }
            }
        }
    }
    field
}

/// Splats peak-normalised maps onto a base image. Several maps are combined
/// by taking the per-pixel maximum before colouring.
pub fn render_overlay(maps: &[&ResponseMap], base: &RgbImage, params: &OverlayParams) -> Result<RgbImage> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Precondition("no maps to render".into()))?;
    if let Some(m) = maps.iter().find(|m| !m.is_normalized()) {
        return Err(Error::Precondition(format!(
            "pixel {} is not peak-normalized",
            m.pixel
        )));
    }
    if !(0.0..=1.0).contains(&params.opacity) {
        return Err(Error::Config(format!("opacity {} outside [0, 1]", params.opacity)));
    }
    let radius = params.splat_radius.unwrap_or_else(|| auto_splat_radius(first));
    let (w, h) = base.dimensions();
    let field = splat_field(maps, w, h, radius);
    let mut out = base.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let v = field[i];
        if v <= 0.0 {
            continue;
        }
        let alpha = params.opacity * v;
        let color = params.colormap.color(v);
        for c in 0..3 {
            let blended = px.0[c] as f64 * (1.0 - alpha) + color[c] * alpha;
            px.0[c] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}
