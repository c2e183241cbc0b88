//! Sketch rendering, text-box placement and the binary rasters derived from
//! the box (region mask, box-outlined edge condition, empty edge condition).

mod atlas;
mod render;

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edges::EdgeImage;

pub use atlas::{AtlasSource, Glyph, GlyphAtlas, GlyphRect, DEFAULT_FONT_ID};
pub use render::render_sketch;

/// Default output canvas, matching the backbone's native resolution.
pub const DEFAULT_CANVAS: Canvas = Canvas {
    width: 512,
    height: 512,
};

/// Minimum distance between a randomly placed box and the canvas border.
pub const PLACEMENT_MARGIN: u32 = 16;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bounding box {bbox} is invalid on a {canvas} canvas: {reason}")]
    InvalidBBox {
        bbox: BBox,
        canvas: Canvas,
        reason: &'static str,
    },
    #[error("canvas {0} is too small for random placement (minimum 64x64)")]
    CanvasTooSmall(Canvas),
    #[error("unsupported codepoints: {}", format_codepoints(.0))]
    UnsupportedCodepoints(Vec<char>),
    #[error("text {text_w}x{text_h} px does not fit in the padded {inner_w}x{inner_h} px box interior")]
    TextDoesNotFit {
        text_w: u32,
        text_h: u32,
        inner_w: u32,
        inner_h: u32,
    },
    #[error("glyph atlas: {0}")]
    Atlas(String),
    #[error("raster dimensions {got} do not match {expected}")]
    DimensionMismatch { expected: Canvas, got: Canvas },
}

fn format_codepoints(cps: &[char]) -> String {
    cps.iter()
        .map(|c| format!("U+{:04X}", *c as u32))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for Canvas {
    fn default() -> Self {
        DEFAULT_CANVAS
    }
}

impl fmt::Display for Canvas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Axis-aligned integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn area(&self) -> usize {
        self.w as usize * self.h as usize
    }

    /// Checks the box is non-empty and lies inside `canvas`.
    pub fn validate(&self, canvas: Canvas) -> Result<(), RasterError> {
        let reason = if self.w == 0 || self.h == 0 {
            Some("width and height must be positive")
        } else if self.x.checked_add(self.w).is_none_or(|r| r > canvas.width) {
            Some("extends past the right edge")
        } else if self.y.checked_add(self.h).is_none_or(|b| b > canvas.height) {
            Some("extends past the bottom edge")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(RasterError::InvalidBBox {
                bbox: *self,
                canvas,
                reason,
            }),
            None => Ok(()),
        }
    }

    /// Pixels on the one-pixel outline of the box.
    pub fn perimeter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let (x0, y0, x1, y1) = (self.x, self.y, self.right() - 1, self.bottom() - 1);
        (y0..=y1).flat_map(move |y| {
            (x0..=x1).filter_map(move |x| {
                (y == y0 || y == y1 || x == x0 || x == x1).then_some((x, y))
            })
        })
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x, self.y, self.w, self.h)
    }
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, false)
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tightest rectangle enclosing every set bit, `None` when empty.
    pub fn bounding_rect(&self) -> Option<BBox> {
        let mut min = (u32::MAX, u32::MAX);
        let mut max = (0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    min = (min.0.min(x), min.1.min(y));
                    max = (max.0.max(x), max.1.max(y));
                }
            }
        }
        any.then(|| BBox::new(min.0, min.1, max.0 - min.0 + 1, max.1 - min.1 + 1))
    }

    /// 255 for set bits, 0 otherwise.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Bits become set where the byte is at least `threshold`.
    pub fn from_gray_bytes(width: u32, height: u32, bytes: &[u8], threshold: u8) -> Option<Self> {
        Self::from_bits(width, height, bytes.iter().map(|&v| v >= threshold).collect())
    }
}

/// Grayscale raster of rendered text: 0 is ink, 255 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SketchImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl SketchImage {
    pub const INK: u8 = 0;
    pub const PAPER: u8 = 255;

    pub fn blank(canvas: Canvas) -> Self {
        Self {
            width: canvas.width,
            height: canvas.height,
            pixels: vec![Self::PAPER; canvas.area()],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == Self::INK).count()
    }

    /// Binary ink mask (set where the pixel is darker than mid-gray).
    pub fn ink_mask(&self) -> BinaryGrid {
        BinaryGrid {
            width: self.width,
            height: self.height,
            bits: self.pixels.iter().map(|&p| p < 128).collect(),
        }
    }
}

/// Filled text-region rectangle.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RegionMask(BinaryGrid);

impl RegionMask {
    pub fn from_grid(grid: BinaryGrid) -> Self {
        Self(grid)
    }

    pub fn empty(canvas: Canvas) -> Self {
        Self(BinaryGrid::new(canvas.width, canvas.height))
    }

    pub fn into_grid(self) -> BinaryGrid {
        self.0
    }
}

impl Deref for RegionMask {
    type Target = BinaryGrid;
    fn deref(&self) -> &BinaryGrid {
        &self.0
    }
}

impl DerefMut for RegionMask {
    fn deref_mut(&mut self) -> &mut BinaryGrid {
        &mut self.0
    }
}

/// Returns `user_bbox` when given (after validation), otherwise draws a
/// seeded random box: 16 px margin on every side, height in `[h/8, h/3]`,
/// width `clamp(height * text_len * 0.6, height, w - 32)`.
pub fn place_bbox(
    text_len: usize,
    canvas: Canvas,
    seed: u64,
    user_bbox: Option<BBox>,
) -> Result<BBox, RasterError> {
    if let Some(bbox) = user_bbox {
        bbox.validate(canvas)?;
        return Ok(bbox);
    }
    if canvas.width < 64 || canvas.height < 64 {
        return Err(RasterError::CanvasTooSmall(canvas));
    }
    let usable_w = canvas.width - 2 * PLACEMENT_MARGIN;
    let usable_h = canvas.height - 2 * PLACEMENT_MARGIN;
    // Narrow canvases cap the height so the width clamp stays well-formed.
    let h_max = (canvas.height / 3).min(usable_w).min(usable_h);
    let h_min = (canvas.height / 8).min(h_max).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(h_min..=h_max);
    let wanted = (h as f64 * text_len as f64 * 0.6).round() as u32;
    let w = wanted.clamp(h, usable_w);
    let x = rng.random_range(PLACEMENT_MARGIN..=canvas.width - PLACEMENT_MARGIN - w);
    let y = rng.random_range(PLACEMENT_MARGIN..=canvas.height - PLACEMENT_MARGIN - h);
    Ok(BBox::new(x, y, w, h))
}

pub fn make_region_mask(bbox: BBox, canvas: Canvas) -> Result<RegionMask, RasterError> {
    bbox.validate(canvas)?;
    let mut grid = BinaryGrid::new(canvas.width, canvas.height);
    for y in bbox.y..bbox.bottom() {
        for x in bbox.x..bbox.right() {
            grid.set(x, y, true);
        }
    }
    Ok(RegionMask(grid))
}

/// Positive image-level prompt: the edge image with the one-pixel outline of
/// `bbox` switched on.
pub fn make_pip_edge(edge: &EdgeImage, bbox: BBox) -> Result<EdgeImage, RasterError> {
    bbox.validate(edge.canvas())?;
    let mut out = edge.clone();
    for (x, y) in bbox.perimeter() {
        out.set(x, y, true);
    }
    Ok(out)
}

/// Negative image-level prompt: the edge map of an all-white sketch, which
/// carries no edges at all.
pub fn make_nip_edge(canvas: Canvas) -> EdgeImage {
    EdgeImage::empty(canvas)
}
