//! Canny edge detection turning a sketch into the edge-image control
//! condition.
//!
//! The pipeline runs entirely in integer arithmetic: a 5x5 Gaussian with
//! fixed-point weights, 3x3 Sobel gradients, non-maximum suppression along
//! the gradient direction quantized to 0/45/90/135 degrees, a double
//! threshold and 8-connected hysteresis. Thresholds are on the Sobel
//! magnitude of the blurred image in 0..255 intensity units. Both the blur
//! and Sobel stages reflect at the border (`dcba|abcd|dcba`).

use std::collections::VecDeque;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryGrid, Canvas, SketchImage};

/// Fixed-point scale of the unnormalized Gaussian weights.
pub const GAUSSIAN_FIXED_POINT: f64 = 1024.0;

#[derive(Debug, Error, PartialEq)]
pub enum EdgeError {
    #[error("low threshold {low} exceeds high threshold {high}")]
    Thresholds { low: u8, high: u8 },
    #[error("sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("input image is empty")]
    EmptyImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub low: u8,
    pub high: u8,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            low: 100,
            high: 200,
            sigma: 1.4,
        }
    }
}

/// Binary edge map; set bits are edge pixels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeImage(BinaryGrid);

impl EdgeImage {
    pub fn empty(canvas: Canvas) -> Self {
        Self(BinaryGrid::new(canvas.width, canvas.height))
    }

    pub fn from_grid(grid: BinaryGrid) -> Self {
        Self(grid)
    }

    pub fn into_grid(self) -> BinaryGrid {
        self.0
    }
}

impl Deref for EdgeImage {
    type Target = BinaryGrid;
    fn deref(&self) -> &BinaryGrid {
        &self.0
    }
}

impl DerefMut for EdgeImage {
    fn deref_mut(&mut self) -> &mut BinaryGrid {
        &mut self.0
    }
}

/// `round(1024 * exp(-i^2 / (2 sigma^2)))` for `i` in `-2..=2`.
pub fn gaussian_weights(sigma: f64) -> [i64; 5] {
    let mut w = [0i64; 5];
    for (slot, i) in w.iter_mut().zip(-2i32..=2) {
        let d = f64::from(i * i);
        *slot = (GAUSSIAN_FIXED_POINT * (-d / (2.0 * sigma * sigma)).exp()).round() as i64;
    }
    w
}

/// Symmetric reflection of an index into `0..n`.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[derive(Clone, Copy)]
enum Direction {
    Horizontal,
    Diagonal45,
    Vertical,
    Diagonal135,
}

/// Quantizes the gradient angle without trigonometry: `tan 22.5 = sqrt2 - 1`
/// and `tan 67.5 = sqrt2 + 1` turn into exact integer comparisons.
#[inline]
fn quantize(gx: i64, gy: i64) -> Direction {
    let ax = i128::from(gx.abs());
    let ay = i128::from(gy.abs());
    if (ay + ax) * (ay + ax) <= 2 * ax * ax {
        Direction::Horizontal
    } else if ay > ax && (ay - ax) * (ay - ax) > 2 * ax * ax {
        Direction::Vertical
    } else if (gx > 0) == (gy > 0) {
        Direction::Diagonal45
    } else {
        Direction::Diagonal135
    }
}

pub fn canny_with(img: &SketchImage, params: CannyParams) -> Result<EdgeImage, EdgeError> {
    canny(img, params.low, params.high, params.sigma)
}

pub fn canny(img: &SketchImage, low: u8, high: u8, sigma: f64) -> Result<EdgeImage, EdgeError> {
    if low > high {
        return Err(EdgeError::Thresholds { low, high });
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(EdgeError::Sigma(sigma));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(EdgeError::EmptyImage);
    }
    let px = img.pixels();
    let kernel = gaussian_weights(sigma);
    let norm: i64 = kernel.iter().sum();

    // Separable blur; the result is scaled by norm^2.
    let mut horiz = vec![0i64; w * h];
    for y in 0..h {
        let row = &px[y * w..(y + 1) * w];
        for x in 0..w {
            horiz[y * w + x] = kernel
                .iter()
                .zip(-2isize..=2)
                .map(|(k, d)| k * i64::from(row[reflect(x as isize + d, w)]))
                .sum();
        }
    }
    let mut blur = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            blur[y * w + x] = kernel
                .iter()
                .zip(-2isize..=2)
                .map(|(k, d)| k * horiz[reflect(y as isize + d, h) * w + x])
                .sum();
        }
    }

    let mut mag = vec![0i128; w * h];
    let mut dirs = vec![Direction::Horizontal; w * h];
    for y in 0..h {
        let rows = [
            reflect(y as isize - 1, h),
            y,
            reflect(y as isize + 1, h),
        ];
        for x in 0..w {
            let left = reflect(x as isize - 1, w);
            let right = reflect(x as isize + 1, w);
            let at = |r: usize, c: usize| blur[r * w + c];
            let mut gx = 0i64;
            for (weight, &r) in [1i64, 2, 1].iter().zip(&rows) {
                gx += weight * (at(r, right) - at(r, left));
            }
            let mut gy = 0i64;
            for (weight, c) in [1i64, 2, 1].iter().zip([left, x, right]) {
                gy += weight * (at(rows[2], c) - at(rows[0], c));
            }
            let (gx128, gy128) = (i128::from(gx), i128::from(gy));
            mag[y * w + x] = gx128 * gx128 + gy128 * gy128;
            dirs[y * w + x] = quantize(gx, gy);
        }
    }

    // Neighbours beyond the border count as zero magnitude. The neighbour
    // earlier in scan order must be strictly smaller so plateaus of equal
    // magnitude keep exactly one pixel.
    let mag_at = |x: isize, y: isize| -> i128 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0i128; w * h];
    for y in 0..h {
        for x in 0..w {
            let m = mag[y * w + x];
            if m == 0 {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let (before, after) = match dirs[y * w + x] {
                Direction::Horizontal => (mag_at(xi - 1, yi), mag_at(xi + 1, yi)),
                Direction::Vertical => (mag_at(xi, yi - 1), mag_at(xi, yi + 1)),
                Direction::Diagonal45 => (mag_at(xi - 1, yi - 1), mag_at(xi + 1, yi + 1)),
                Direction::Diagonal135 => (mag_at(xi + 1, yi - 1), mag_at(xi - 1, yi + 1)),
            };
            if m > before && m >= after {
                thin[y * w + x] = m;
            }
        }
    }

    let scale = i128::from(norm) * i128::from(norm);
    let low_sq = (i128::from(low) * scale).pow(2);
    let high_sq = (i128::from(high) * scale).pow(2);

    let mut out = BinaryGrid::new(w as u32, h as u32);
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > high_sq {
            out.set((i % w) as u32, (i / w) as u32, true);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let (ux, uy) = (nx as u32, ny as u32);
                if !out.get(ux, uy) && thin[ny as usize * w + nx as usize] > low_sq {
                    out.set(ux, uy, true);
                    queue.push_back(ny as usize * w + nx as usize);
                }
            }
        }
    }
    Ok(EdgeImage(out))
}
