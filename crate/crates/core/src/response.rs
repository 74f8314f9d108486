//! Per-pixel response maps on the scan grid, their support regions, and the
//! cross-capture consistency metrics (support IoU, centroid displacement,
//! cosine similarity).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::GridSpec;
use crate::detect::PatchDetection;
use crate::error::{Error, Result};
use crate::histogram::peak_normalize;

pub const DEFAULT_REL_THRESHOLD: f64 = 0.05;

/// Responses of one LiDAR pixel laid out on the scan grid (row-major).
///
/// Invalid cells (failed patch detection) hold 0 and no anchor, and are
/// ignored by every statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub pixel: usize,
    pub grid: GridSpec,
    values: Vec<f64>,
    valid: Vec<bool>,
    anchors: Vec<Option<(f64, f64)>>,
    normalized: bool,
}

impl ResponseMap {
    /// Builds a map from dense row-major arrays, checking the map invariants.
    pub fn from_parts(
        pixel: usize,
        grid: GridSpec,
        values: Vec<f64>,
        valid: Vec<bool>,
        anchors: Vec<Option<(f64, f64)>>,
        normalized: bool,
    ) -> Result<Self> {
        let n = grid.len();
        if values.len() != n || valid.len() != n || anchors.len() != n {
            return Err(Error::Consistency(format!(
                "pixel {pixel}: map arrays must have {n} cells"
            )));
        }
        for i in 0..n {
            let v = values[i];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Consistency(format!(
                    "pixel {pixel}: cell {i} has invalid value {v}"
                )));
            }
            if !valid[i] && v != 0.0 {
                return Err(Error::Consistency(format!(
                    "pixel {pixel}: invalid cell {i} carries value {v}"
                )));
            }
            if valid[i] != anchors[i].is_some() {
                return Err(Error::Consistency(format!(
                    "pixel {pixel}: cell {i} anchor presence disagrees with validity"
                )));
            }
        }
        let map = Self {
            pixel,
            grid,
            values,
            valid,
            anchors,
            normalized,
        };
        if normalized {
            let peak = map.peak();
            if (peak - 1.0).abs() > 1e-12 {
                return Err(Error::Consistency(format!(
                    "pixel {pixel}: normalized map peaks at {peak}"
                )));
            }
        }
        Ok(map)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn anchors(&self) -> &[Option<(f64, f64)>] {
        &self.anchors
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.flat(row, col)]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[self.grid.flat(row, col)]
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// Largest value over valid cells (0 for an empty map).
    pub fn peak(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, ok)| **ok)
            .map(|(v, _)| *v)
            .fold(0.0, f64::max)
    }

    /// Row-major index of the first cell holding the peak value.
    pub fn argmax(&self) -> Option<usize> {
        let peak = self.peak();
        (0..self.values.len()).find(|&i| self.valid[i] && self.values[i] == peak)
    }

    /// Peak normalisation over valid cells.
    pub fn normalize(&self) -> Result<Self> {
        let valid: BTreeMap<usize, f64> = (0..self.values.len())
            .filter(|&i| self.valid[i])
            .map(|i| (i, self.values[i]))
            .collect();
        let scaled = peak_normalize(&valid).map_err(|e| match e {
            Error::DegenerateMap { reason, .. } => Error::degenerate(Some(self.pixel), reason),
            other => other,
        })?;
        let mut values = vec![0.0; self.values.len()];
        for (i, v) in scaled {
            values[i] = v;
        }
        Ok(Self {
            values,
            normalized: true,
            ..self.clone()
        })
    }

    /// Same map with every value multiplied by `alpha`; clears the normalised
    /// flag.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * alpha).collect(),
            normalized: false,
            ..self.clone()
        }
    }
}

/// Places one pixel's responses on its snake grid cells.
pub fn assemble_map(
    responses: &BTreeMap<usize, f64>,
    detections: &[PatchDetection],
    grid: GridSpec,
    pixel: usize,
) -> Result<ResponseMap> {
    let k_total = grid.len();
    let by_index: BTreeMap<usize, &PatchDetection> =
        detections.iter().map(|d| (d.scan_index, d)).collect();

    let missing_resp: Vec<usize> = (0..k_total).filter(|k| !responses.contains_key(k)).collect();
    if !missing_resp.is_empty() {
        return Err(Error::IncompleteDataset {
            what: format!("responses for pixel {pixel}"),
            missing: missing_resp,
        });
    }
    let missing_det: Vec<usize> = (0..k_total).filter(|k| !by_index.contains_key(k)).collect();
    if !missing_det.is_empty() {
        return Err(Error::IncompleteDataset {
            what: "patch detections".into(),
            missing: missing_det,
        });
    }

    let mut values = vec![0.0; k_total];
    let mut valid = vec![false; k_total];
    let mut anchors = vec![None; k_total];
    for k in 0..k_total {
        let (row, col) = grid.snake_index_to_cell(k)?;
        let i = grid.flat(row, col);
        if let Some(center) = by_index[&k].center() {
            values[i] = responses[&k];
            valid[i] = true;
            anchors[i] = Some(center);
        }
    }
    ResponseMap::from_parts(pixel, grid, values, valid, anchors, false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportMask {
    pub pixel: usize,
    pub grid: GridSpec,
    mask: Vec<bool>,
}

impl SupportMask {
    pub fn new(pixel: usize, grid: GridSpec, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::Consistency(format!(
                "pixel {pixel}: support mask needs {} cells, got {}",
                grid.len(),
                mask.len()
            )));
        }
        Ok(Self { pixel, grid, mask })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[self.grid.flat(row, col)]
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 3x3 median over valid neighbours; invalid cells come out as 0.
pub fn median_filter(map: &ResponseMap) -> Vec<f64> {
    let GridSpec { rows, cols, .. } = map.grid;
    let mut out = vec![0.0; rows * cols];
    let mut window = Vec::with_capacity(9);
    for r in 0..rows {
        for c in 0..cols {
            if !map.is_valid(r, c) {
                continue;
            }
            window.clear();
            for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    if map.is_valid(rr, cc) {
                        window.push(map.value(rr, cc));
                    }
                }
            }
            out[map.grid.flat(r, c)] = median(&mut window);
        }
    }
    out
}

/// Cells whose median-filtered response reaches `rel_threshold` of the
/// filtered peak.
pub fn support_mask(map: &ResponseMap, rel_threshold: f64) -> Result<SupportMask> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::Config(format!(
            "support threshold {rel_threshold} outside (0, 1)"
        )));
    }
    let filtered = median_filter(map);
    let peak = filtered.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::degenerate(
            Some(map.pixel),
            "median-filtered map is zero everywhere",
        ));
    }
    let cut = rel_threshold * peak;
    let mask = filtered
        .iter()
        .zip(&map.valid)
        .map(|(&v, &ok)| ok && v >= cut)
        .collect();
    SupportMask::new(map.pixel, map.grid, mask)
}

/// Response-weighted mean of the anchor coordinates, in RGB pixels.
pub fn centroid(map: &ResponseMap) -> Result<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (v, a) in map.values.iter().zip(&map.anchors) {
        if let Some((x, y)) = a {
            sw += v;
            sx += v * x;
            sy += v * y;
        }
    }
    if sw <= 0.0 {
        return Err(Error::degenerate(
            Some(map.pixel),
            "no positive response on a valid cell",
        ));
    }
    Ok((sx / sw, sy / sw))
}

pub fn iou(a: &SupportMask, b: &SupportMask) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Consistency(format!(
            "support masks on different grids ({}x{} vs {}x{})",
            a.grid.cols, a.grid.rows, b.grid.cols, b.grid.rows
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::UndefinedIou);
    }
    Ok(inter as f64 / union as f64)
}

/// Cosine similarity over cells valid in both maps.
pub fn cosine_similarity(a: &ResponseMap, b: &ResponseMap) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::Consistency("maps on different grids".into()));
    }
    if !a.normalized || !b.normalized {
        return Err(Error::Precondition(
            "cosine similarity expects peak-normalized maps".into(),
        ));
    }
    let (mut dot, mut na, mut nb, mut joint) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..a.values.len() {
        if a.valid[i] && b.valid[i] {
            let (x, y) = (a.values[i], b.values[i]);
            dot += x * y;
            na += x * x;
            nb += y * y;
            joint += 1;
        }
    }
    if joint == 0 {
        return Err(Error::DegenerateInput(format!(
            "pixel {}: no cell is valid in both maps",
            a.pixel
        )));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(format!(
            "pixel {}: zero-norm map on the jointly valid cells",
            a.pixel
        )));
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb) keeps a == b exactly 1
    Ok((dot / (na * nb).sqrt()).clamp(0.0, 1.0))
}

/// Mean and sample standard deviation over the defined per-pixel entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub undefined: usize,
}

impl Aggregate {
    pub fn from_entries(entries: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = entries.iter().flatten().copied().collect();
        let n = defined.len();
        let undefined = entries.len() - n;
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                undefined,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            count: n,
            undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelConsistency {
    pub pixel: usize,
    pub iou: Option<f64>,
    pub centroid_displacement: Option<f64>,
    pub cosine: Option<f64>,
    /// Why any metric above is undefined.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rel_threshold: f64,
    pub pixels: Vec<PixelConsistency>,
    pub iou: Aggregate,
    pub centroid_displacement: Aggregate,
    pub cosine: Aggregate,
    pub invalid_cells_a: usize,
    pub invalid_cells_b: usize,
}

impl ConsistencyReport {
    /// Rebuilds the aggregates from the per-pixel entries.
    pub fn recompute_aggregates(&mut self) {
        let col = |f: fn(&PixelConsistency) -> Option<f64>| -> Vec<Option<f64>> {
            self.pixels.iter().map(f).collect()
        };
        let (i, d, c) = (
            Aggregate::from_entries(&col(|p| p.iou)),
            Aggregate::from_entries(&col(|p| p.centroid_displacement)),
            Aggregate::from_entries(&col(|p| p.cosine)),
        );
        self.iou = i;
        self.centroid_displacement = d;
        self.cosine = c;
    }
}

fn compare_pixel(a: &ResponseMap, b: &ResponseMap, rel_threshold: f64) -> PixelConsistency {
    let mut notes = Vec::new();
    let mut keep = |r: Result<f64>, what: &str| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    };
    let iou_v = keep(
        support_mask(a, rel_threshold).and_then(|ma| iou(&ma, &support_mask(b, rel_threshold)?)),
        "iou",
    );
    let disp = keep(
        centroid(a).and_then(|ca| {
            let cb = centroid(b)?;
            Ok((ca.0 - cb.0).hypot(ca.1 - cb.1))
        }),
        "centroid",
    );
    let cos = keep(cosine_similarity(a, b), "cosine");
    PixelConsistency {
        pixel: a.pixel,
        iou: iou_v,
        centroid_displacement: disp,
        cosine: cos,
        notes,
    }
}

/// Per-pixel agreement between two calibrations of the same sensor.
pub fn compare_modes(
    set_a: &[ResponseMap],
    set_b: &[ResponseMap],
    rel_threshold: f64,
) -> Result<ConsistencyReport> {
    if set_a.len() != set_b.len() {
        return Err(Error::Consistency(format!(
            "map sets have {} and {} pixels",
            set_a.len(),
            set_b.len()
        )));
    }
    if set_a.is_empty() {
        return Err(Error::Consistency("no maps to compare".into()));
    }
    for (a, b) in set_a.iter().zip(set_b) {
        if a.grid != b.grid {
            return Err(Error::Consistency(format!(
                "pixel {}: grids differ ({}x{} vs {}x{})",
                a.pixel, a.grid.cols, a.grid.rows, b.grid.cols, b.grid.rows
            )));
        }
        if a.pixel != b.pixel {
            return Err(Error::Consistency(format!(
                "pixel order differs ({} vs {})",
                a.pixel, b.pixel
            )));
        }
        if !a.normalized || !b.normalized {
            return Err(Error::Precondition(format!(
                "pixel {}: maps must be peak-normalized before comparison",
                a.pixel
            )));
        }
    }
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::Config(format!(
            "support threshold {rel_threshold} outside (0, 1)"
        )));
    }
    let pixels = set_a
        .iter()
        .zip(set_b)
        .map(|(a, b)| compare_pixel(a, b, rel_threshold))
        .collect();
    let mut report = ConsistencyReport {
        rel_threshold,
        pixels,
        iou: Aggregate::from_entries(&[]),
        centroid_displacement: Aggregate::from_entries(&[]),
        cosine: Aggregate::from_entries(&[]),
        invalid_cells_a: set_a.first().map_or(0, ResponseMap::invalid_count),
        invalid_cells_b: set_b.first().map_or(0, ResponseMap::invalid_count),
    };
    report.recompute_aggregates();
    Ok(report)
}
