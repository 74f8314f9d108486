//! Synthetic scan generator.
//!
//! Each LiDAR pixel's histogram is the RGB-plane integral of its spatial
//! sensitivity kernel against the per-location transient, discretised as a
//! midpoint Riemann sum. The transient of a scan point holds a retroreflective
//! disk at the patch depth, a wall return everywhere else, and a flat ambient
//! floor. Photon noise is drawn from a counter-based generator keyed by
//! `(seed, scan, pixel, bin, cube kind)`, so output never depends on the
//! evaluation schedule.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GridSpec, Layout, RgbFrameSpec, SensorConfig};
use crate::error::{Error, Result};
use crate::histogram::{CubeKind, HistogramCube};
use crate::io::{self, DatasetManifest, GroundTruth, Provenance, GROUND_TRUTH_FILE};
use crate::pipeline::FrameSource;

/// Truncated, rotated anisotropic Gaussian over RGB pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub cx: f64,
    pub cy: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation of the `sigma_x` axis, radians, counter-clockwise in image
    /// coordinates.
    pub rotation: f64,
    pub amplitude: f64,
    /// Truncation radius in units of sigma (Mahalanobis distance).
    pub truncation: f64,
}

impl GaussianComponent {
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.sigma_x;
        let v = (-s * dx + c * dy) / self.sigma_y;
        let q = u * u + v * v;
        if q > self.truncation * self.truncation {
            0.0
        } else {
            self.amplitude * (-0.5 * q).exp()
        }
    }

    /// Axis-aligned bounding box of the truncation ellipse.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = (self.truncation * self.sigma_x, self.truncation * self.sigma_y);
        let hx = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
        let hy = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
        (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.sigma_x > 0.0
            && self.sigma_y > 0.0
            && self.amplitude >= 0.0
            && self.truncation > 0.0
            && [self.cx, self.cy, self.rotation, self.amplitude, self.truncation]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid kernel component {self:?}")))
        }
    }
}

/// Ground-truth sensitivity kernels, one list of components per LiDAR pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub frame: RgbFrameSpec,
    pub kernels: Vec<Vec<GaussianComponent>>,
}

impl KernelBank {
    pub fn pixel_count(&self) -> usize {
        self.kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        if self.kernels.is_empty() {
            return Err(Error::Config("kernel bank has no pixels".into()));
        }
        self.kernels.iter().flatten().try_for_each(GaussianComponent::validate)
    }

    /// Kernel value without the frame check.
    #[inline]
    pub(crate) fn eval_unchecked(&self, p: usize, x: f64, y: f64) -> f64 {
        self.kernels[p].iter().map(|g| g.eval(x, y)).sum()
    }
}

/// Sensitivity of pixel `p` at RGB location `u`.
pub fn eval_kernel(bank: &KernelBank, p: usize, u: (f64, f64)) -> Result<f64> {
    if p >= bank.pixel_count() {
        return Err(Error::Range {
            what: "pixel",
            index: p,
            limit: bank.pixel_count(),
        });
    }
    if !bank.frame.contains(u.0, u.1) {
        return Err(Error::Domain(format!(
            "({}, {}) outside the {}x{} frame",
            u.0, u.1, bank.frame.width, bank.frame.height
        )));
    }
    Ok(bank.eval_unchecked(p, u.0, u.1))
}

/// Kernels on the layout's zone lattice, tiling the central 70% of the frame.
///
/// Neighbouring supports overlap by roughly 15% of their area at the 5%
/// level; amplitudes are pairwise distinct.
pub fn default_kernel_bank(layout: Layout, frame: RgbFrameSpec) -> Result<KernelBank> {
    if frame.width < 300 || frame.height < 200 {
        return Err(Error::Config(format!(
            "default kernel bank needs a frame of at least 300x200, got {}x{}",
            frame.width, frame.height
        )));
    }
    let (zr, zc) = layout.zone_shape();
    let (w, h) = (frame.width as f64, frame.height as f64);
    let (cell_w, cell_h) = (0.7 * w / zc as f64, 0.7 * h / zr as f64);
    // 5% contour at 0.68 cell spacing gives ~15% lens overlap between neighbours
    let contour = (2.0 * 20f64.ln()).sqrt();
    let (sx, sy) = (0.68 * cell_w / contour, 0.68 * cell_h / contour);
    let golden = 0.618_033_988_749_894_9_f64;
    let kernels = (0..zr * zc)
        .map(|p| {
            let (r, c) = (p / zc, p % zc);
            let wobble = ((p * 5 + 2) % 7) as f64 / 6.0 - 0.5;
            vec![GaussianComponent {
                cx: 0.15 * w + (c as f64 + 0.5) * cell_w,
                cy: 0.15 * h + (r as f64 + 0.5) * cell_h,
                sigma_x: sx * (1.0 + 0.08 * wobble),
                sigma_y: sy * (1.0 - 0.08 * wobble),
                rotation: 0.2 * wobble,
                amplitude: 0.7 + 0.3 * ((p as f64 + 1.0) * golden).fract(),
                truncation: 3.0,
            }]
        })
        .collect();
    Ok(KernelBank { frame, kernels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub radius: f64,
    pub depth_bin: usize,
    /// Expected photons per unit of kernel mass covered by the patch.
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub wall_bin: usize,
    /// Expected photons per unit of kernel mass seeing the wall.
    pub wall_intensity: f64,
    /// Expected photons per bin per unit of total kernel mass.
    pub ambient_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTap {
    pub offset: i32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub patch: PatchSpec,
    pub background: BackgroundSpec,
    pub pulse: Vec<PulseTap>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            patch: PatchSpec {
                radius: 6.0,
                depth_bin: 40,
                intensity: 60.0,
            },
            background: BackgroundSpec {
                wall_bin: 96,
                wall_intensity: 0.05,
                ambient_floor: 0.002,
            },
            pulse: vec![
                PulseTap { offset: -1, weight: 0.25 },
                PulseTap { offset: 0, weight: 0.5 },
                PulseTap { offset: 1, weight: 0.25 },
            ],
        }
    }
}

impl SceneSpec {
    /// Checks bins against `bins` and keeps the wall return out of the
    /// window of `half_width` bins around the patch depth.
    pub fn validate(&self, bins: usize, half_width: usize) -> Result<()> {
        let PatchSpec {
            radius,
            depth_bin,
            intensity,
        } = self.patch;
        let bg = self.background;
        if depth_bin >= bins || bg.wall_bin >= bins {
            return Err(Error::Config(format!(
                "depth bin {depth_bin} / wall bin {} outside {bins} bins",
                bg.wall_bin
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::Config("patch radius must be positive".into()));
        }
        for v in [intensity, bg.wall_intensity, bg.ambient_floor] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("intensity {v} must be finite and >= 0")));
            }
        }
        if self.pulse.is_empty() || self.pulse.iter().any(|t| !(t.weight >= 0.0)) {
            return Err(Error::Config("pulse needs nonnegative taps".into()));
        }
        let total: f64 = self.pulse.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("pulse weights sum to {total}, expected 1")));
        }
        let spread = self.pulse.iter().map(|t| t.offset.unsigned_abs() as usize).max().unwrap_or(0);
        if depth_bin.abs_diff(bg.wall_bin) <= half_width + spread {
            return Err(Error::Config(format!(
                "wall bin {} falls inside the window around depth bin {depth_bin}",
                bg.wall_bin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    #[default]
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sensor: SensorConfig,
    pub grid: GridSpec,
    pub frame: RgbFrameSpec,
    pub seed: u64,
    /// Quadrature spacing in RGB pixels.
    pub integration_step: f64,
    pub noise: NoiseKind,
    /// Distance kept between the outermost scan positions and the frame edge.
    pub margin_px: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sensor: SensorConfig::default(),
            grid: GridSpec::new(40, 24),
            frame: RgbFrameSpec::default(),
            seed: 1,
            integration_step: 1.0,
            noise: NoiseKind::Poisson,
            margin_px: 20.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.grid.validate()?;
        self.frame.validate()?;
        if !(self.integration_step >= 1.0 && self.integration_step.is_finite()) {
            return Err(Error::Config(format!(
                "integration_step {} must be >= 1 px",
                self.integration_step
            )));
        }
        let limit = 0.5 * (self.frame.width.min(self.frame.height) as f64 - 1.0);
        if !(self.margin_px >= 0.0 && self.margin_px < limit) {
            return Err(Error::Config(format!("margin {} px too large", self.margin_px)));
        }
        Ok(())
    }

    /// RGB position of the patch centre at scan index `k`.
    pub fn patch_center(&self, k: usize) -> Result<(f64, f64)> {
        let (row, col) = self.grid.snake_index_to_cell(k)?;
        let axis = |i: usize, n: usize, extent: u32| {
            let span = extent as f64 - 1.0 - 2.0 * self.margin_px;
            if n == 1 {
                0.5 * (extent as f64 - 1.0)
            } else {
                self.margin_px + i as f64 * span / (n - 1) as f64
            }
        };
        Ok((
            axis(col, self.grid.cols, self.frame.width),
            axis(row, self.grid.rows, self.frame.height),
        ))
    }

    /// Spacing between neighbouring scan positions along x and y, in px.
    pub fn grid_step_px(&self) -> (f64, f64) {
        let step = |n: usize, extent: u32| {
            if n <= 1 {
                0.0
            } else {
                (extent as f64 - 1.0 - 2.0 * self.margin_px) / (n - 1) as f64
            }
        };
        (step(self.grid.cols, self.frame.width), step(self.grid.rows, self.frame.height))
    }
}

/// Pre-noise histogram expectation for one scan point.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCube {
    pub pixels: usize,
    pub bins: usize,
    pub values: Vec<f64>,
    pub scan_index: usize,
    pub kind: CubeKind,
}

impl ExpectedCube {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.bins..(p + 1) * self.bins]
    }
}

/// Midpoint quadrature sample positions along one axis of the frame.
fn sample_axis(extent: u32, step: f64) -> Vec<f64> {
    let hi = extent as f64 - 0.5;
    (0..)
        .map(|i| -0.5 + (i as f64 + 0.5) * step)
        .take_while(|&x| x < hi)
        .collect()
}

/// Quadrature cells of the patch disk: `(x, y, covered area)`.
fn disk_cells(center: (f64, f64), radius: f64, frame: &RgbFrameSpec, step: f64) -> Vec<(f64, f64, f64)> {
    const SUB: usize = 16;
    let half_diag = step * std::f64::consts::FRAC_1_SQRT_2;
    let xs = sample_axis(frame.width, step);
    let ys = sample_axis(frame.height, step);
    let in_range = |v: f64, c: f64| (v - c).abs() <= radius + step;
    let mut out = Vec::new();
    for &y in ys.iter().filter(|&&y| in_range(y, center.1)) {
        for &x in xs.iter().filter(|&&x| in_range(x, center.0)) {
            let d = (x - center.0).hypot(y - center.1);
            let cover = if d + half_diag <= radius {
                1.0
            } else if d - half_diag >= radius {
                0.0
            } else {
                let mut hits = 0usize;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let px = x + step * ((sx as f64 + 0.5) / SUB as f64 - 0.5);
                        let py = y + step * ((sy as f64 + 0.5) / SUB as f64 - 0.5);
                        hits += ((px - center.0).hypot(py - center.1) <= radius) as usize;
                    }
                }
                hits as f64 / (SUB * SUB) as f64
            };
            if cover > 0.0 {
                out.push((x, y, cover * step * step));
            }
        }
    }
    out
}

/// Forward model with per-pixel total kernel masses precomputed.
#[derive(Debug, Clone)]
pub struct ForwardModel<'a> {
    bank: &'a KernelBank,
    scene: &'a SceneSpec,
    cfg: &'a SimConfig,
    total_mass: Vec<f64>,
}

impl<'a> ForwardModel<'a> {
    pub fn new(bank: &'a KernelBank, scene: &'a SceneSpec, cfg: &'a SimConfig) -> Result<Self> {
        cfg.validate()?;
        bank.validate()?;
        scene.validate(cfg.sensor.bin_count, 0)?;
        if bank.frame != cfg.frame {
            return Err(Error::Config("kernel bank frame differs from the simulation frame".into()));
        }
        if bank.pixel_count() != cfg.sensor.pixel_count {
            return Err(Error::Config(format!(
                "kernel bank has {} pixels, sensor has {}",
                bank.pixel_count(),
                cfg.sensor.pixel_count
            )));
        }
        let step = cfg.integration_step;
        let xs = sample_axis(cfg.frame.width, step);
        let ys = sample_axis(cfg.frame.height, step);
        let total_mass = (0..bank.pixel_count())
            .map(|p| {
                let mut sum = 0.0;
                for comp in &bank.kernels[p] {
                    let (x0, y0, x1, y1) = comp.bounds();
                    for &y in ys.iter().filter(|&&y| y >= y0 && y <= y1) {
                        for &x in xs.iter().filter(|&&x| x >= x0 && x <= x1) {
                            sum += comp.eval(x, y);
                        }
                    }
                }
                sum * step * step
            })
            .collect();
        Ok(Self {
            bank,
            scene,
            cfg,
            total_mass,
        })
    }

    /// Kernel mass of every pixel over the whole frame.
    pub fn total_mass(&self) -> &[f64] {
        &self.total_mass
    }

    /// Kernel mass of every pixel under the patch disk at scan `k` (the disk is
    /// clipped to the frame).
    pub fn patch_mass(&self, k: usize) -> Result<Vec<f64>> {
        let center = self.cfg.patch_center(k)?;
        let cells = disk_cells(center, self.scene.patch.radius, &self.cfg.frame, self.cfg.integration_step);
        Ok((0..self.bank.pixel_count())
            .map(|p| {
                cells
                    .iter()
                    .map(|&(x, y, a)| self.bank.eval_unchecked(p, x, y) * a)
                    .sum()
            })
            .collect())
    }

    pub fn render(&self, k: usize, with_patch: bool) -> Result<ExpectedCube> {
        let bins = self.cfg.sensor.bin_count;
        let pixels = self.bank.pixel_count();
        let patch_mass = if with_patch {
            self.patch_mass(k)?
        } else {
            // background scans still need k in range
            self.cfg.grid.snake_index_to_cell(k)?;
            vec![0.0; pixels]
        };
        let scene = self.scene;
        let max = self.cfg.sensor.max_count as f64;
        let mut values = vec![0.0; pixels * bins];
        let deposit = |row: &mut [f64], center: usize, amount: f64| {
            for tap in &scene.pulse {
                let t = center as i64 + tap.offset as i64;
                if (0..bins as i64).contains(&t) {
                    row[t as usize] += amount * tap.weight;
                }
            }
        };
        for p in 0..pixels {
            let row = &mut values[p * bins..(p + 1) * bins];
            let total = self.total_mass[p];
            let ambient = scene.background.ambient_floor * total;
            row.iter_mut().for_each(|v| *v = ambient);
            if with_patch {
                deposit(row, scene.patch.depth_bin, scene.patch.intensity * patch_mass[p]);
            }
            let wall_mass = (total - patch_mass[p]).max(0.0);
            deposit(row, scene.background.wall_bin, scene.background.wall_intensity * wall_mass);
            row.iter_mut().for_each(|v| *v = v.min(max));
        }
        Ok(ExpectedCube {
            pixels,
            bins,
            values,
            scan_index: k,
            kind: if with_patch {
                CubeKind::PatchPresent
            } else {
                CubeKind::Background
            },
        })
    }
}

/// One-off render; builds a [`ForwardModel`] internally.
pub fn render_transient(
    bank: &KernelBank,
    scene: &SceneSpec,
    k: usize,
    cfg: &SimConfig,
    with_patch: bool,
) -> Result<ExpectedCube> {
    ForwardModel::new(bank, scene, cfg)?.render(k, with_patch)
}

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noise_key(seed: u64, k: usize, p: usize, t: usize, kind: CubeKind) -> u64 {
    let tag = match kind {
        CubeKind::PatchPresent => 0x5041_5443,
        CubeKind::Background => 0x4247_4e44,
    };
    let mut h = splitmix64(seed);
    for v in [k as u64, p as u64, t as u64, tag] {
        h = splitmix64(h ^ v);
    }
    h
}

/// Turns expected counts into integer counts.
pub fn apply_noise(
    expected: &ExpectedCube,
    seed: u64,
    noise: NoiseKind,
    max_count: u32,
) -> Result<HistogramCube> {
    let bins = expected.bins;
    let mut counts = Vec::with_capacity(expected.values.len());
    for (i, &lambda) in expected.values.iter().enumerate() {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Precondition(format!(
                "expected count {lambda} at scan {} pixel {} bin {}",
                expected.scan_index,
                i / bins,
                i % bins
            )));
        }
        let draw = match noise {
            NoiseKind::None => lambda.round(),
            NoiseKind::Poisson if lambda == 0.0 => 0.0,
            NoiseKind::Poisson => {
                let key = noise_key(seed, expected.scan_index, i / bins, i % bins, expected.kind);
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                Poisson::new(lambda)
                    .map_err(|e| Error::Precondition(format!("poisson rate {lambda}: {e}")))?
                    .sample(&mut rng)
            }
        };
        counts.push(draw.min(max_count as f64) as u32);
    }
    HistogramCube::new(expected.pixels, bins, counts, expected.scan_index, expected.kind)
}

/// Static scene texture, keyed by seed only so that frames of different scan
/// points differ only around the patch.
fn texture(seed: u64, x: u32, y: u32) -> f64 {
    let h = splitmix64(splitmix64(seed ^ 0x7465_7874) ^ ((y as u64) << 32 | x as u64));
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    0.08 + 0.03 * (u - 0.5)
}

const PATCH_LEVEL: f64 = 0.9;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Camera frame of the patch-removed scene.
pub fn render_background_frame(cfg: &SimConfig) -> RgbImage {
    RgbImage::from_fn(cfg.frame.width, cfg.frame.height, |x, y| {
        let v = to_u8(texture(cfg.seed, x, y));
        Rgb([v, v, v])
    })
}

/// Camera frame at scan `k`: textured dark scene with an anti-aliased bright
/// disk at the patch position.
pub fn render_frame(scene: &SceneSpec, k: usize, cfg: &SimConfig) -> Result<RgbImage> {
    Ok(render_frame_at(scene, cfg.patch_center(k)?, cfg))
}

/// Camera frame with the patch centred at an arbitrary RGB position.
pub fn render_frame_at(scene: &SceneSpec, center: (f64, f64), cfg: &SimConfig) -> RgbImage {
    const SUB: u32 = 8;
    let (cx, cy) = center;
    let r = scene.patch.radius;
    RgbImage::from_fn(cfg.frame.width, cfg.frame.height, |x, y| {
        let base = texture(cfg.seed, x, y);
        let (xf, yf) = (x as f64, y as f64);
        let d = (xf - cx).hypot(yf - cy);
        let cover = if d + 0.71 <= r {
            1.0
        } else if d - 0.71 >= r {
            0.0
        } else {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let px = xf - 0.5 + (sx as f64 + 0.5) / SUB as f64;
                    let py = yf - 0.5 + (sy as f64 + 0.5) / SUB as f64;
                    hits += ((px - cx).hypot(py - cy) <= r) as u32;
                }
            }
            hits as f64 / (SUB * SUB) as f64
        };
        let v = to_u8(base * (1.0 - cover) + PATCH_LEVEL * cover);
        Rgb([v, v, v])
    })
}

/// Patch-present frames rendered on demand.
pub struct RenderedFrames<'a> {
    pub scene: &'a SceneSpec,
    pub cfg: &'a SimConfig,
}

impl FrameSource for RenderedFrames<'_> {
    fn frame(&self, k: usize) -> Result<RgbImage> {
        render_frame(self.scene, k, self.cfg)
    }
}

/// A simulated scan held in memory (frames are rendered on demand).
#[derive(Debug, Clone)]
pub struct SimulatedScan {
    pub patch: Vec<HistogramCube>,
    pub background: Vec<HistogramCube>,
    pub ground_truth: GroundTruth,
}

/// Renders and noises both scans plus the ground-truth samples.
pub fn simulate(bank: &KernelBank, scene: &SceneSpec, cfg: &SimConfig) -> Result<SimulatedScan> {
    let model = ForwardModel::new(bank, scene, cfg)?;
    let max = cfg.sensor.max_count;
    let per_scan: Vec<(HistogramCube, HistogramCube, (f64, f64), Vec<f64>, Vec<f64>)> = (0..cfg.grid.len())
        .into_par_iter()
        .map(|k| {
            let h = apply_noise(&model.render(k, true)?, cfg.seed, cfg.noise, max)?;
            let bg = apply_noise(&model.render(k, false)?, cfg.seed, cfg.noise, max)?;
            let center = cfg.patch_center(k)?;
            let point: Vec<f64> = (0..bank.pixel_count())
                .map(|p| {
                    if cfg.frame.contains(center.0, center.1) {
                        bank.eval_unchecked(p, center.0, center.1)
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok((h, bg, center, point, model.patch_mass(k)?))
        })
        .collect::<Result<_>>()?;

    let pixels = bank.pixel_count();
    let mut gt = GroundTruth {
        grid: cfg.grid,
        positions: Vec::with_capacity(per_scan.len()),
        kernel_value: vec![Vec::with_capacity(per_scan.len()); pixels],
        disk_mass: vec![Vec::with_capacity(per_scan.len()); pixels],
    };
    let mut patch = Vec::with_capacity(per_scan.len());
    let mut background = Vec::with_capacity(per_scan.len());
    for (h, bg, center, point, mass) in per_scan {
        patch.push(h);
        background.push(bg);
        gt.positions.push(center);
        for p in 0..pixels {
            gt.kernel_value[p].push(point[p]);
            gt.disk_mass[p].push(mass[p]);
        }
    }
    Ok(SimulatedScan {
        patch,
        background,
        ground_truth: gt,
    })
}

/// Effective simulation inputs, echoed next to every generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub sim: SimConfig,
    pub scene: SceneSpec,
    pub kernel_bank: KernelBank,
}

/// Simulates a full dataset and writes it in the standard directory layout.
///
/// `threads` sets the worker count (`None` uses the global pool); output
/// bytes do not depend on it.
pub fn simulate_scan(
    bank: &KernelBank,
    scene: &SceneSpec,
    cfg: &SimConfig,
    out_dir: &Path,
    threads: Option<usize>,
) -> Result<DatasetManifest> {
    let run = || -> Result<DatasetManifest> {
        let scan = simulate(bank, scene, cfg)?;
        let provenance = Provenance {
            description: format!(
                "synthetic scan, seed {}, noise {:?}, {}x{} grid",
                cfg.seed, cfg.noise, cfg.grid.cols, cfg.grid.rows
            ),
            ground_truth: Some(GROUND_TRUTH_FILE.into()),
        };
        let manifest = DatasetManifest::standard(cfg.sensor.clone(), cfg.grid, cfg.frame, provenance);
        for sub in ["frames", "hist", "bg_frames", "bg_hist"] {
            io::create_dir(&out_dir.join(sub))?;
        }
        let bg_frame = render_background_frame(cfg);
        (0..cfg.grid.len()).into_par_iter().try_for_each(|k| -> Result<()> {
            let (s, b) = (&manifest.scans[k], &manifest.background[k]);
            io::write_histogram(&out_dir.join(&s.hist_path), &scan.patch[k])?;
            io::write_histogram(&out_dir.join(&b.hist_path), &scan.background[k])?;
            io::write_png(&out_dir.join(&s.frame_path), &render_frame(scene, k, cfg)?)?;
            io::write_png(&out_dir.join(&b.frame_path), &bg_frame)
        })?;
        io::write_ground_truth(&out_dir.join(GROUND_TRUTH_FILE), &scan.ground_truth)?;
        io::write_json(
            &out_dir.join("simulation.json"),
            &SimulationRecord {
                sim: cfg.clone(),
                scene: scene.clone(),
                kernel_bank: bank.clone(),
            },
        )?;
        io::write_json(&out_dir.join(io::MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}
