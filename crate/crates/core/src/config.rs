//! Sensor, scan-grid and camera-frame descriptions shared by every stage.
//!
//! Scan indices are 0-based. The scan grid is traversed as a row-major snake:
//! even rows run left to right, odd rows right to left, so consecutive scan
//! points are always grid neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel aggregation layouts of the multizone dToF module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "3x3-wide")]
    Wide3x3,
    #[serde(rename = "4x4")]
    Grid4x4,
    #[serde(rename = "3x6")]
    Grid3x6,
    #[serde(rename = "8x8")]
    Grid8x8,
}

impl Layout {
    pub fn pixel_count(self) -> usize {
        match self {
            Layout::Wide3x3 => 9,
            Layout::Grid4x4 => 16,
            Layout::Grid3x6 => 18,
            Layout::Grid8x8 => 64,
        }
    }

    /// (rows, cols) of the zone lattice.
    pub fn zone_shape(self) -> (usize, usize) {
        match self {
            Layout::Wide3x3 => (3, 3),
            Layout::Grid4x4 => (4, 4),
            Layout::Grid3x6 => (3, 6),
            Layout::Grid8x8 => (8, 8),
        }
    }
}

/// Ranging configuration. Recorded as metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangingMode {
    Short,
    Long,
}

pub const DEFAULT_BIN_COUNT: usize = 128;
pub const DEFAULT_MAX_COUNT: u32 = 65_535;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub pixel_count: usize,
    pub bin_count: usize,
    pub layout: Layout,
    pub ranging_mode: RangingMode,
    /// Saturation ceiling of a single histogram bin.
    pub max_count: u32,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self::for_layout(Layout::Wide3x3)
    }
}

impl SensorConfig {
    pub fn for_layout(layout: Layout) -> Self {
        Self {
            pixel_count: layout.pixel_count(),
            bin_count: DEFAULT_BIN_COUNT,
            layout,
            ranging_mode: RangingMode::Short,
            max_count: DEFAULT_MAX_COUNT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixel_count == 0 {
            return Err(Error::Config("pixel_count must be at least 1".into()));
        }
        if self.bin_count == 0 {
            return Err(Error::Config("bin_count must be at least 1".into()));
        }
        if self.max_count == 0 {
            return Err(Error::Config("max_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Traversal order of the scan grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    #[default]
    SnakeRowMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
    #[serde(default)]
    pub order: ScanOrder,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::new(80, 45)
    }
}

impl GridSpec {
    pub const fn new(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            rows,
            order: ScanOrder::SnakeRowMajor,
        }
    }

    /// Number of scan points K.
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.rows == 0 {
            return Err(Error::Config(format!(
                "grid must be at least 1x1, got {}x{}",
                self.cols, self.rows
            )));
        }
        Ok(())
    }

    /// Grid cell `(row, col)` visited at scan index `k`.
    pub fn snake_index_to_cell(&self, k: usize) -> Result<(usize, usize)> {
        if k >= self.len() {
            return Err(Error::Range {
                what: "scan index",
                index: k,
                limit: self.len(),
            });
        }
        let row = k / self.cols;
        let offset = k % self.cols;
        let col = match self.order {
            ScanOrder::SnakeRowMajor if row % 2 == 0 => offset,
            ScanOrder::SnakeRowMajor => self.cols - 1 - offset,
        };
        Ok((row, col))
    }

    /// Scan index at which cell `(row, col)` is visited.
    pub fn snake_cell_to_index(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.rows {
            return Err(Error::Range {
                what: "grid row",
                index: row,
                limit: self.rows,
            });
        }
        if col >= self.cols {
            return Err(Error::Range {
                what: "grid column",
                index: col,
                limit: self.cols,
            });
        }
        let offset = match self.order {
            ScanOrder::SnakeRowMajor if row % 2 == 0 => col,
            ScanOrder::SnakeRowMajor => self.cols - 1 - col,
        };
        Ok(row * self.cols + offset)
    }

    /// Row-major flat offset of a cell, used for dense per-cell arrays.
    #[inline]
    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbFrameSpec {
    pub width: u32,
    pub height: u32,
}

impl Default for RgbFrameSpec {
    fn default() -> Self {
        Self {
            width: 848,
            height: 480,
        }
    }
}

impl RgbFrameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "frame must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Whether `(x, y)` lies inside the frame, with pixel centres at integer
    /// coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && y >= -0.5 && x < self.width as f64 - 0.5 && y < self.height as f64 - 0.5
    }
}
