//! End-to-end calibration: patch detection, depth-window selection, patch
//! responses, map assembly, peak normalisation and support estimation.

use std::collections::BTreeMap;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GridSpec, RgbFrameSpec, SensorConfig};
use crate::detect::{detect_patch, HoughParams, PatchDetection};
use crate::error::{Error, Result};
use crate::histogram::{auto_select_window, patch_response, BinWindow, HistogramCube};
use crate::response::{assemble_map, support_mask, ResponseMap, SupportMask, DEFAULT_REL_THRESHOLD};

/// Supplies the patch-present RGB frame of each scan index.
pub trait FrameSource: Sync {
    fn frame(&self, k: usize) -> Result<RgbImage>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateParams {
    pub hough: HoughParams,
    /// Explicit `[lo, hi]` window; overrides the manifest and auto selection.
    pub window: Option<(usize, usize)>,
    /// Half-width of the automatically selected window.
    pub half_width: usize,
    pub rel_threshold: f64,
    /// Fraction of scan points that must have a valid detection.
    pub min_valid_fraction: f64,
}

impl Default for CalibrateParams {
    fn default() -> Self {
        Self {
            hough: HoughParams::default(),
            window: None,
            half_width: 3,
            rel_threshold: DEFAULT_REL_THRESHOLD,
            min_valid_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSource {
    Explicit,
    Manifest,
    Auto,
}

pub struct CalibrationInput<'a> {
    pub sensor: &'a SensorConfig,
    pub grid: GridSpec,
    pub frame: RgbFrameSpec,
    pub patch: &'a [HistogramCube],
    pub background: &'a [HistogramCube],
    pub frames: &'a dyn FrameSource,
    /// Window recorded with the dataset, if any.
    pub manifest_window: Option<BinWindow>,
}

impl<'a> CalibrationInput<'a> {
    pub fn from_dataset(ds: &'a crate::io::Dataset) -> Self {
        Self {
            sensor: &ds.manifest.sensor,
            grid: ds.manifest.grid,
            frame: ds.manifest.frame,
            patch: &ds.patch,
            background: &ds.background,
            frames: ds,
            manifest_window: ds.manifest.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub window_lo: usize,
    pub window_hi: usize,
    pub window_source: WindowSource,
    pub scan_count: usize,
    pub invalid_detections: usize,
    pub invalid_scan_indices: Vec<usize>,
    pub valid_fraction: f64,
    /// Raw (pre-normalisation) peak response per pixel.
    pub peak_responses: Vec<f64>,
    pub support_cells: Vec<usize>,
    pub rel_threshold: f64,
    /// Bins at max_count inside the window, over all patch-present cubes.
    pub saturated_window_bins: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub window: BinWindow,
    pub detections: Vec<PatchDetection>,
    pub raw_maps: Vec<ResponseMap>,
    pub maps: Vec<ResponseMap>,
    pub masks: Vec<SupportMask>,
    pub summary: CalibrationSummary,
}

fn check_cubes(input: &CalibrationInput<'_>) -> Result<()> {
    let k_total = input.grid.len();
    for (what, cubes) in [("patch", input.patch), ("background", input.background)] {
        if cubes.len() != k_total {
            return Err(Error::Consistency(format!(
                "{} {what} cubes for a grid of {k_total} scan points",
                cubes.len()
            )));
        }
        for (k, c) in cubes.iter().enumerate() {
            if c.scan_index != k {
                return Err(Error::Consistency(format!(
                    "{what} cube at position {k} has scan index {}",
                    c.scan_index
                )));
            }
            c.check_against(input.sensor)?;
        }
    }
    Ok(())
}

/// Runs the whole inverse pipeline on one scan dataset.
pub fn calibrate(input: &CalibrationInput<'_>, params: &CalibrateParams) -> Result<Calibration> {
    input.sensor.validate()?;
    input.grid.validate()?;
    params.hough.validate(&input.frame)?;
    if !(0.0..=1.0).contains(&params.min_valid_fraction) {
        return Err(Error::Config(format!(
            "min_valid_fraction {} outside [0, 1]",
            params.min_valid_fraction
        )));
    }
    if !(params.rel_threshold > 0.0 && params.rel_threshold < 1.0) {
        return Err(Error::Config(format!(
            "rel_threshold {} outside (0, 1)",
            params.rel_threshold
        )));
    }
    check_cubes(input)?;
    let k_total = input.grid.len();
    let bins = input.sensor.bin_count;

    let detections: Vec<PatchDetection> = (0..k_total)
        .into_par_iter()
        .map(|k| {
            let frame = input.frames.frame(k)?;
            detect_patch(&frame, &params.hough, &input.frame, k)
        })
        .collect::<Result<_>>()?;
    let invalid: Vec<usize> = detections
        .iter()
        .filter(|d| !d.is_valid())
        .map(|d| d.scan_index)
        .collect();
    let valid_fraction = (k_total - invalid.len()) as f64 / k_total as f64;
    if valid_fraction < params.min_valid_fraction {
        return Err(Error::TooFewDetections {
            valid: k_total - invalid.len(),
            total: k_total,
            required: 100.0 * params.min_valid_fraction,
        });
    }

    let (window, window_source) = match (params.window, input.manifest_window) {
        (Some((lo, hi)), _) => (BinWindow::new(lo, hi, bins)?, WindowSource::Explicit),
        (None, Some(w)) => (BinWindow::new(w.lo(), w.hi(), bins)?, WindowSource::Manifest),
        (None, None) => (
            auto_select_window(input.patch.iter().zip(input.background), params.half_width)?,
            WindowSource::Auto,
        ),
    };

    let pixels = input.sensor.pixel_count;
    let raw_maps: Vec<ResponseMap> = (0..pixels)
        .into_par_iter()
        .map(|p| {
            let responses: BTreeMap<usize, f64> = input
                .patch
                .iter()
                .zip(input.background)
                .map(|(h, bg)| Ok((h.scan_index, patch_response(h, bg, window, p)?)))
                .collect::<Result<_>>()?;
            assemble_map(&responses, &detections, input.grid, p)
        })
        .collect::<Result<_>>()?;
    let maps: Vec<ResponseMap> = raw_maps.iter().map(ResponseMap::normalize).collect::<Result<_>>()?;
    let masks: Vec<SupportMask> = maps
        .iter()
        .map(|m| support_mask(m, params.rel_threshold))
        .collect::<Result<_>>()?;

    let max = input.sensor.max_count;
    let saturated_window_bins: usize = input
        .patch
        .iter()
        .map(|c| {
            (0..pixels)
                .map(|p| {
                    c.pixel(p)[window.lo()..=window.hi()]
                        .iter()
                        .filter(|&&v| v >= max)
                        .count()
                })
                .sum::<usize>()
        })
        .sum();

    let mut warnings = Vec::new();
    if saturated_window_bins > 0 {
        warnings.push(format!(
            "{saturated_window_bins} histogram bins inside the window are saturated at max_count {max}; \
             responses there are clipped and underestimate the spatial sensitivity"
        ));
    }
    if !invalid.is_empty() {
        warnings.push(format!(
            "{} of {k_total} scan points have no valid patch detection and are masked out",
            invalid.len()
        ));
    }

    let summary = CalibrationSummary {
        window_lo: window.lo(),
        window_hi: window.hi(),
        window_source,
        scan_count: k_total,
        invalid_detections: invalid.len(),
        invalid_scan_indices: invalid,
        valid_fraction,
        peak_responses: raw_maps.iter().map(ResponseMap::peak).collect(),
        support_cells: masks.iter().map(SupportMask::count).collect(),
        rel_threshold: params.rel_threshold,
        saturated_window_bins,
        warnings,
    };
    Ok(Calibration {
        window,
        detections,
        raw_maps,
        maps,
        masks,
        summary,
    })
}

/// Plain-text rendering of a calibration summary.
pub fn format_summary(s: &CalibrationSummary) -> String {
    let mut out = String::new();
    out.push_str("# calibration summary\n");
    out.push_str(&format!("window = [{}, {}]\n", s.window_lo, s.window_hi));
    out.push_str(&format!("window_source = {:?}\n", s.window_source).to_lowercase());
    out.push_str(&format!("scan_count = {}\n", s.scan_count));
    out.push_str(&format!("invalid_detections = {}\n", s.invalid_detections));
    out.push_str(&format!("valid_fraction = {}\n", s.valid_fraction));
    out.push_str(&format!("rel_threshold = {}\n", s.rel_threshold));
    out.push_str(&format!("saturated_window_bins = {}\n", s.saturated_window_bins));
    for (p, (peak, cells)) in s.peak_responses.iter().zip(&s.support_cells).enumerate() {
        out.push_str(&format!("pixel_{p:02} = peak {peak}, support {cells} cells\n"));
    }
    for w in &s.warnings {
        out.push_str(&format!("warning = {w}\n"));
    }
    out
}
