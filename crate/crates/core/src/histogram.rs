//! Photon-arrival histograms and the scalar patch response derived from a
//! patch-present / patch-removed histogram pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::SensorConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubeKind {
    PatchPresent,
    Background,
}

/// Per-pixel photon counts for one scan point, stored pixel-major
/// (`counts[p * bins + t]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramCube {
    pixels: usize,
    bins: usize,
    counts: Vec<u32>,
    pub scan_index: usize,
    pub kind: CubeKind,
}

impl HistogramCube {
    pub fn new(
        pixels: usize,
        bins: usize,
        counts: Vec<u32>,
        scan_index: usize,
        kind: CubeKind,
    ) -> Result<Self> {
        if pixels == 0 || bins == 0 {
            return Err(Error::Consistency(format!(
                "histogram cube must be at least 1x1, got {pixels}x{bins}"
            )));
        }
        if counts.len() != pixels * bins {
            return Err(Error::Consistency(format!(
                "histogram cube expects {} counts ({pixels}x{bins}), got {}",
                pixels * bins,
                counts.len()
            )));
        }
        Ok(Self {
            pixels,
            bins,
            counts,
            scan_index,
            kind,
        })
    }

    pub fn zeros(pixels: usize, bins: usize, scan_index: usize, kind: CubeKind) -> Self {
        Self {
            pixels,
            bins,
            counts: vec![0; pixels * bins],
            scan_index,
            kind,
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn pixel(&self, p: usize) -> &[u32] {
        &self.counts[p * self.bins..(p + 1) * self.bins]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [u32] {
        &mut self.counts[p * self.bins..(p + 1) * self.bins]
    }

    /// Checks shape and count range against a sensor description.
    pub fn check_against(&self, sensor: &SensorConfig) -> Result<()> {
        if self.pixels != sensor.pixel_count || self.bins != sensor.bin_count {
            return Err(Error::Consistency(format!(
                "cube for scan {} is {}x{}, sensor expects {}x{}",
                self.scan_index, self.pixels, self.bins, sensor.pixel_count, sensor.bin_count
            )));
        }
        if let Some(&c) = self.counts.iter().find(|&&c| c > sensor.max_count) {
            return Err(Error::Consistency(format!(
                "cube for scan {} has count {c} above max_count {}",
                self.scan_index, sensor.max_count
            )));
        }
        Ok(())
    }

    /// Number of bins sitting exactly at the saturation ceiling.
    pub fn saturated_bins(&self, max_count: u32) -> usize {
        self.counts.iter().filter(|&&c| c >= max_count).count()
    }
}

/// Inclusive range of histogram bins that contain the patch return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinWindow {
    lo: usize,
    hi: usize,
}

impl BinWindow {
    pub fn new(lo: usize, hi: usize, bins: usize) -> Result<Self> {
        if lo > hi || hi >= bins {
            return Err(Error::Config(format!(
                "bin window [{lo}, {hi}] invalid for {bins} bins"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.lo..=self.hi).contains(&t)
    }

    pub fn fits(&self, bins: usize) -> bool {
        self.hi < bins
    }
}

fn check_pair(h: &HistogramCube, bg: &HistogramCube) -> Result<()> {
    if h.scan_index != bg.scan_index {
        return Err(Error::Consistency(format!(
            "patch scan {} paired with background scan {}",
            h.scan_index, bg.scan_index
        )));
    }
    if h.pixels != bg.pixels || h.bins != bg.bins {
        return Err(Error::Consistency(format!(
            "scan {}: patch cube {}x{} vs background cube {}x{}",
            h.scan_index, h.pixels, h.bins, bg.pixels, bg.bins
        )));
    }
    if h.kind != CubeKind::PatchPresent || bg.kind != CubeKind::Background {
        return Err(Error::Consistency(format!(
            "scan {}: expected (patch_present, background) pair, got ({:?}, {:?})",
            h.scan_index, h.kind, bg.kind
        )));
    }
    Ok(())
}

/// Background-subtracted windowed maximum: `max_{t in G} [h(t) - bg(t)]_+`.
pub fn patch_response(
    h: &HistogramCube,
    bg: &HistogramCube,
    window: BinWindow,
    p: usize,
) -> Result<f64> {
    check_pair(h, bg)?;
    if p >= h.pixels {
        return Err(Error::Range {
            what: "pixel",
            index: p,
            limit: h.pixels,
        });
    }
    if !window.fits(h.bins) {
        return Err(Error::Consistency(format!(
            "window [{}, {}] exceeds {} bins",
            window.lo, window.hi, h.bins
        )));
    }
    let range = window.lo..=window.hi;
    let best = h.pixel(p)[range.clone()]
        .iter()
        .zip(&bg.pixel(p)[range])
        .map(|(&a, &b)| a.saturating_sub(b))
        .max()
        .unwrap_or(0);
    Ok(best as f64)
}

/// Picks the window centred on the bin with the largest total
/// background-subtracted signal, `half_width` bins either side.
///
/// Ties go to the smallest bin index.
pub fn auto_select_window<'a, I>(pairs: I, half_width: usize) -> Result<BinWindow>
where
    I: IntoIterator<Item = (&'a HistogramCube, &'a HistogramCube)>,
{
    let mut totals: Vec<u64> = Vec::new();
    let mut seen = false;
    for (h, bg) in pairs {
        check_pair(h, bg)?;
        if !seen {
            totals = vec![0; h.bins];
            seen = true;
        } else if totals.len() != h.bins {
            return Err(Error::Consistency(format!(
                "scan {} has {} bins, earlier scans have {}",
                h.scan_index,
                h.bins,
                totals.len()
            )));
        }
        for (a, b) in h.counts.chunks_exact(h.bins).zip(bg.counts.chunks_exact(h.bins)) {
            for (t, (&x, &y)) in a.iter().zip(b).enumerate() {
                totals[t] += u64::from(x.saturating_sub(y));
            }
        }
    }
    if !seen {
        return Err(Error::Consistency("window selection needs at least one scan".into()));
    }
    let peak = totals.iter().copied().max().unwrap_or(0);
    if peak == 0 {
        return Err(Error::NoSignal);
    }
    // position() returns the first maximiser
    let t_star = totals.iter().position(|&d| d == peak).unwrap();
    let bins = totals.len();
    BinWindow::new(
        t_star.saturating_sub(half_width),
        (t_star + half_width).min(bins - 1),
        bins,
    )
}

/// Divides every value by the map maximum.
pub fn peak_normalize(values: &BTreeMap<usize, f64>) -> Result<BTreeMap<usize, f64>> {
    if let Some((k, v)) = values.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::DegenerateInput(format!(
            "response at scan {k} is {v}, expected a finite nonnegative value"
        )));
    }
    let peak = values.values().copied().fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return Err(Error::degenerate(None, "all responses are zero"));
    }
    Ok(values.iter().map(|(&k, &v)| (k, v / peak)).collect())
}
