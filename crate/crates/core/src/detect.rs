//! Retroreflective patch localisation with a gradient-directed circle Hough
//! transform.
//!
//! Pixel centres sit at integer coordinates: pixel `(i, j)` is the point
//! `x = i, y = j`, so a detected centre is directly comparable to the
//! simulator's patch positions.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::RgbFrameSpec;
use crate::error::{Error, Result};

/// Upper bound on candidates returned after suppression.
const MAX_CANDIDATES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image from row-major intensities, clamping them to [0, 1].
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Consistency(format!(
                "gray image {width}x{height} with {} samples",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                data[x * self.height + y] = self.get(x, y);
            }
        }
        Self {
            width: self.height,
            height: self.width,
            data,
        }
    }

    /// Separable box blur with edge-replicated borders.
    pub fn box_blur(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let r = radius as isize;
        let norm = 1.0 / (2 * radius + 1) as f64;
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        // horizontal running sums
        let mut horiz = vec![0.0; w * h];
        for y in 0..h {
            let row = &self.data[y * w..(y + 1) * w];
            let out = &mut horiz[y * w..(y + 1) * w];
            let mut acc: f64 = (-r..=r).map(|i| row[clamp(i, w)]).sum();
            for x in 0..w {
                out[x] = acc * norm;
                let xi = x as isize;
                acc += row[clamp(xi + r + 1, w)] - row[clamp(xi - r, w)];
            }
        }
        // vertical running sums, a whole row at a time
        let mut out = vec![0.0; w * h];
        let mut acc = vec![0.0; w];
        for i in -r..=r {
            let src = &horiz[clamp(i, h) * w..][..w];
            acc.iter_mut().zip(src).for_each(|(a, v)| *a += v);
        }
        for y in 0..h {
            out[y * w..(y + 1) * w]
                .iter_mut()
                .zip(&acc)
                .for_each(|(o, a)| *o = a * norm);
            let yi = y as isize;
            let add = &horiz[clamp(yi + r + 1, h) * w..][..w];
            let sub = &horiz[clamp(yi - r, h) * w..][..w];
            for x in 0..w {
                acc[x] += add[x] - sub[x];
            }
        }
        Self {
            width: w,
            height: h,
            data: out,
        }
    }
}

/// Rec. 601 luma of an 8-bit RGB frame, scaled to [0, 1].
pub fn to_grayscale(frame: &RgbImage) -> Result<GrayImage> {
    let (w, h) = frame.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Consistency("empty frame".into()));
    }
    let data = frame
        .pixels()
        .map(|px| {
            let [r, g, b] = px.0;
            (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
        })
        .collect();
    GrayImage::new(w as usize, h as usize, data)
}

/// Sobel derivatives of a blurred image, scaled so a unit ramp of slope 1
/// per pixel gives a gradient of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    magnitude: Vec<f64>,
}

impl GradientField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn gx(&self, x: usize, y: usize) -> f64 {
        self.gx[y * self.width + x]
    }

    pub fn gy(&self, x: usize, y: usize) -> f64 {
        self.gy[y * self.width + x]
    }

    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        self.magnitude[y * self.width + x]
    }

    /// Gradient angle `atan2(gy, gx)`, with y pointing down the image.
    pub fn direction(&self, x: usize, y: usize) -> f64 {
        self.gy(x, y).atan2(self.gx(x, y))
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude.iter().copied().fold(0.0, f64::max)
    }
}

pub fn gradient_field(img: &GrayImage, blur_radius: usize) -> GradientField {
    let b = img.box_blur(blur_radius);
    let (w, h) = (img.width, img.height);
    // one-pixel edge-replicated border
    let pw = w + 2;
    let mut pad = vec![0.0; pw * (h + 2)];
    for py in 0..h + 2 {
        let y = py.saturating_sub(1).min(h - 1);
        for px in 0..pw {
            let x = px.saturating_sub(1).min(w - 1);
            pad[py * pw + px] = b.data[y * w + x];
        }
    }
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut magnitude = vec![0.0; w * h];
    for y in 0..h {
        let (up, mid, down) = (&pad[y * pw..], &pad[(y + 1) * pw..], &pad[(y + 2) * pw..]);
        for x in 0..w {
            let sx = (up[x + 2] + 2.0 * mid[x + 2] + down[x + 2]) - (up[x] + 2.0 * mid[x] + down[x]);
            let sy = (down[x] + 2.0 * down[x + 1] + down[x + 2]) - (up[x] + 2.0 * up[x + 1] + up[x + 2]);
            let i = y * w + x;
            gx[i] = sx / 8.0;
            gy[i] = sy / 8.0;
            magnitude[i] = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
        }
    }
    GradientField {
        width: w,
        height: h,
        gx,
        gy,
        magnitude,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoughParams {
    pub r_min: u32,
    pub r_max: u32,
    /// Edge pixels need at least this fraction of the strongest gradient.
    pub gradient_threshold: f64,
    pub vote_threshold: u32,
    pub blur_radius: u32,
    /// Absolute gradient floor (intensity per pixel). Frames whose strongest
    /// edge is weaker than this have no edge pixels at all.
    pub min_edge_strength: f64,
}

impl Default for HoughParams {
    fn default() -> Self {
        Self {
            r_min: 3,
            r_max: 15,
            gradient_threshold: 0.25,
            vote_threshold: 8,
            blur_radius: 1,
            min_edge_strength: 0.05,
        }
    }
}

impl HoughParams {
    pub fn validate(&self, frame: &RgbFrameSpec) -> Result<()> {
        if self.r_min < 1 || self.r_min > self.r_max {
            return Err(Error::Config(format!(
                "radius range [{}, {}] invalid",
                self.r_min, self.r_max
            )));
        }
        if 2 * self.r_max >= frame.width.min(frame.height) {
            return Err(Error::Config(format!(
                "r_max {} too large for a {}x{} frame",
                self.r_max, frame.width, frame.height
            )));
        }
        if !(self.gradient_threshold > 0.0 && self.gradient_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "gradient_threshold {} outside (0, 1]",
                self.gradient_threshold
            )));
        }
        if !(self.min_edge_strength >= 0.0) {
            return Err(Error::Config("min_edge_strength must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleCandidate {
    /// Accumulator cell of the peak.
    pub cx: u32,
    pub cy: u32,
    pub r: u32,
    pub votes: u32,
    /// Sub-pixel centre from the vote-weighted 3x3 neighbourhood.
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Gradient-directed circle Hough transform.
///
/// Every edge pixel votes at the two centres reached by stepping `r` pixels
/// along and against its gradient, for each radius in range. Peaks are
/// ranked by (votes desc, radius asc, cy asc, cx asc) and greedily
/// suppressed: a candidate whose centre falls inside an already accepted
/// circle is dropped.
pub fn hough_circles(grad: &GradientField, params: &HoughParams) -> Result<Vec<CircleCandidate>> {
    params.validate(&RgbFrameSpec {
        width: grad.width as u32,
        height: grad.height as u32,
    })?;
    let max_mag = grad.max_magnitude();
    let cut = (params.gradient_threshold * max_mag).max(params.min_edge_strength);
    if max_mag <= 0.0 || max_mag < params.min_edge_strength {
        return Ok(Vec::new());
    }

    let (w, h) = (grad.width as i64, grad.height as i64);
    let mut acc: HashMap<(u32, u32, u32), u32> = HashMap::new();
    for (i, &mag) in grad.magnitude.iter().enumerate() {
        if mag < cut || mag <= 0.0 {
            continue;
        }
        let (x, y) = (i % grad.width, i / grad.width);
        let (gx, gy) = (grad.gx[i], grad.gy[i]);
        {
            let (ux, uy) = (gx / mag, gy / mag);
            for r in params.r_min..=params.r_max {
                for sign in [1.0, -1.0] {
                    let cx = (x as f64 + sign * r as f64 * ux).round() as i64;
                    let cy = (y as f64 + sign * r as f64 * uy).round() as i64;
                    if (0..w).contains(&cx) && (0..h).contains(&cy) {
                        *acc.entry((cx as u32, cy as u32, r)).or_insert(0) += 1;
                    }
                }
            }
        }
    }

    let mut cells: Vec<((u32, u32, u32), u32)> = acc.iter().map(|(&k, &v)| (k, v)).collect();
    cells.sort_unstable_by(|a, b| {
        let ((ax, ay, ar), av) = *a;
        let ((bx, by, br), bv) = *b;
        bv.cmp(&av)
            .then(ar.cmp(&br))
            .then(ay.cmp(&by))
            .then(ax.cmp(&bx))
    });

    let mut out: Vec<CircleCandidate> = Vec::new();
    for ((cx, cy, r), votes) in cells {
        let inside_accepted = out.iter().any(|c| {
            let dx = c.cx as f64 - cx as f64;
            let dy = c.cy as f64 - cy as f64;
            dx.hypot(dy) <= c.r as f64
        });
        if inside_accepted {
            continue;
        }
        out.push(refine(&acc, grad, cx, cy, r, votes));
        if out.len() == MAX_CANDIDATES {
            break;
        }
    }
    Ok(out)
}

/// Edge radius around `(x, y)` from the radial gradient profile inside the
/// annulus `|d - r0| <= 3`. Weighting by `1 / d` cancels the growth of the
/// ring's pixel count with distance, so a symmetric edge profile gives its
/// centre line.
fn profile_radius(grad: &GradientField, x: f64, y: f64, r0: f64) -> Option<f64> {
    const HALF: f64 = 3.0;
    let reach = r0 + HALF;
    let x0 = (x - reach).floor().max(0.0) as usize;
    let y0 = (y - reach).floor().max(0.0) as usize;
    let x1 = ((x + reach).ceil() as usize).min(grad.width - 1);
    let y1 = ((y + reach).ceil() as usize).min(grad.height - 1);
    let (mut num, mut den) = (0.0, 0.0);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let (dx, dy) = (px as f64 - x, py as f64 - y);
            let d = dx.hypot(dy);
            if d < 0.5 || (d - r0).abs() > HALF {
                continue;
            }
            let i = py * grad.width + px;
            let radial = (grad.gx[i] * dx + grad.gy[i] * dy).abs() / d;
            num += radial;
            den += radial / d;
        }
    }
    (den > 0.0).then(|| num / den)
}

fn refine(
    acc: &HashMap<(u32, u32, u32), u32>,
    grad: &GradientField,
    cx: u32,
    cy: u32,
    r: u32,
    votes: u32,
) -> CircleCandidate {
    let get = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 {
            return 0.0;
        }
        acc.get(&(x as u32, y as u32, r)).copied().unwrap_or(0) as f64
    };
    let (cxi, cyi) = (cx as i64, cy as i64);
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let v = get(cxi + dx, cyi + dy);
            sw += v;
            sx += v * dx as f64;
            sy += v * dy as f64;
        }
    }
    let (x, y) = (cx as f64 + sx / sw, cy as f64 + sy / sw);
    // two passes so the annulus ends up centred on the edge itself
    let radius = profile_radius(grad, x, y, r as f64)
        .and_then(|r1| profile_radius(grad, x, y, r1))
        .unwrap_or(r as f64);
    CircleCandidate {
        cx,
        cy,
        r,
        votes,
        x,
        y,
        radius,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedCircle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub votes: u32,
}

/// Patch location for one scan point. `circle` is `None` when nothing
/// passed the vote threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchDetection {
    pub scan_index: usize,
    pub circle: Option<DetectedCircle>,
}

impl PatchDetection {
    pub fn invalid(scan_index: usize) -> Self {
        Self {
            scan_index,
            circle: None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.circle.is_some()
    }

    pub fn center(&self) -> Option<(f64, f64)> {
        self.circle.map(|c| (c.x, c.y))
    }
}

pub fn detect_patch(
    frame: &RgbImage,
    params: &HoughParams,
    expected: &RgbFrameSpec,
    scan_index: usize,
) -> Result<PatchDetection> {
    let (w, h) = frame.dimensions();
    if (w, h) != (expected.width, expected.height) {
        return Err(Error::Consistency(format!(
            "frame for scan {scan_index} is {w}x{h}, expected {}x{}",
            expected.width, expected.height
        )));
    }
    params.validate(expected)?;
    let gray = to_grayscale(frame)?;
    let grad = gradient_field(&gray, params.blur_radius as usize);
    let best = hough_circles(&grad, params)?.into_iter().next();
    let circle = best
        .filter(|c| c.votes >= params.vote_threshold)
        .filter(|c| expected.contains(c.x, c.y))
        .map(|c| DetectedCircle {
            x: c.x,
            y: c.y,
            radius: c.radius.clamp(params.r_min as f64, params.r_max as f64),
            votes: c.votes,
        });
    Ok(PatchDetection { scan_index, circle })
}
