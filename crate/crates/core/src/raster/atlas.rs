use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BinaryGrid, RasterError};

/// Identifier of the built-in 8x8 font.
pub const DEFAULT_FONT_ID: &str = "embedded";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtlasSource {
    Embedded,
    Loaded(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Glyph {
    pub bitmap: BinaryGrid,
    pub advance: u32,
}

/// Pixel rectangle of one glyph inside an atlas image, as stored in the
/// atlas manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlyphRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub advance: u32,
}

/// Manifest layout: `{"line_height": 32, "0041": {"x":..,"y":..,"w":..,"h":..,"advance":..}, ...}`
/// with codepoints as hex strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct AtlasManifest {
    line_height: u32,
    #[serde(flatten)]
    glyphs: BTreeMap<String, GlyphRect>,
}

#[derive(Debug, Clone)]
pub struct GlyphAtlas {
    glyphs: BTreeMap<char, Glyph>,
    line_height: u32,
    source: AtlasSource,
}

impl GlyphAtlas {
    /// Monochrome 8x8 font covering printable ASCII (U+0020..=U+007E).
    pub fn embedded() -> Self {
        let glyphs = (0x20u8..=0x7e)
            .map(|code| {
                let rows = font8x8::legacy::BASIC_LEGACY[code as usize];
                let mut bitmap = BinaryGrid::new(8, 8);
                for (y, row) in rows.iter().enumerate() {
                    for x in 0..8 {
                        // least significant bit is the leftmost pixel
                        if row & (1 << x) != 0 {
                            bitmap.set(x, y as u32, true);
                        }
                    }
                }
                (char::from(code), Glyph { bitmap, advance: 8 })
            })
            .collect();
        Self {
            glyphs,
            line_height: 8,
            source: AtlasSource::Embedded,
        }
    }

    /// Builds an atlas from explicit glyphs, enforcing the atlas invariants.
    pub fn from_glyphs(
        glyphs: BTreeMap<char, Glyph>,
        line_height: u32,
        source: AtlasSource,
    ) -> Result<Self, RasterError> {
        if line_height == 0 {
            return Err(RasterError::Atlas("line_height must be positive".into()));
        }
        for (c, g) in &glyphs {
            if g.advance == 0 {
                return Err(RasterError::Atlas(format!(
                    "glyph U+{:04X} has zero advance",
                    *c as u32
                )));
            }
            if g.bitmap.height() > line_height {
                return Err(RasterError::Atlas(format!(
                    "glyph U+{:04X} is {} px tall, above line height {line_height}",
                    *c as u32,
                    g.bitmap.height()
                )));
            }
        }
        Ok(Self {
            glyphs,
            line_height,
            source,
        })
    }

    /// Cuts glyphs out of a grayscale atlas image (dark pixels are ink)
    /// according to a JSON manifest.
    pub fn from_image_and_manifest(
        width: u32,
        height: u32,
        pixels: &[u8],
        manifest_json: &str,
        name: &str,
    ) -> Result<Self, RasterError> {
        let manifest: AtlasManifest = serde_json::from_str(manifest_json)
            .map_err(|e| RasterError::Atlas(format!("manifest: {e}")))?;
        if pixels.len() != width as usize * height as usize {
            return Err(RasterError::Atlas("atlas image size mismatch".into()));
        }
        let mut glyphs = BTreeMap::new();
        for (key, rect) in &manifest.glyphs {
            let code = u32::from_str_radix(key.trim_start_matches("U+"), 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| RasterError::Atlas(format!("bad codepoint key {key:?}")))?;
            if rect.x + rect.w > width || rect.y + rect.h > height {
                return Err(RasterError::Atlas(format!(
                    "glyph {key} rectangle lies outside the {width}x{height} atlas"
                )));
            }
            let mut bitmap = BinaryGrid::new(rect.w, rect.h);
            for y in 0..rect.h {
                for x in 0..rect.w {
                    let p = pixels[((rect.y + y) * width + rect.x + x) as usize];
                    bitmap.set(x, y, p < 128);
                }
            }
            glyphs.insert(
                code,
                Glyph {
                    bitmap,
                    advance: rect.advance,
                },
            );
        }
        Self::from_glyphs(
            glyphs,
            manifest.line_height,
            AtlasSource::Loaded(name.to_string()),
        )
    }

    pub fn load(image_path: &Path, manifest_path: &Path) -> Result<Self, RasterError> {
        let img = crate::io::read_gray(image_path)
            .map_err(|e| RasterError::Atlas(format!("{}: {e}", image_path.display())))?;
        let manifest = std::fs::read_to_string(manifest_path)
            .map_err(|e| RasterError::Atlas(format!("{}: {e}", manifest_path.display())))?;
        Self::from_image_and_manifest(
            img.width(),
            img.height(),
            img.as_raw(),
            &manifest,
            &image_path.display().to_string(),
        )
    }

    pub fn glyph(&self, c: char) -> Option<&Glyph> {
        self.glyphs.get(&c)
    }

    pub fn line_height(&self) -> u32 {
        self.line_height
    }

    pub fn source(&self) -> &AtlasSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    /// Codepoints of `text` the atlas cannot render, in first-seen order.
    pub fn missing(&self, text: &str) -> Vec<char> {
        let mut out = Vec::new();
        for c in text.chars() {
            if !self.glyphs.contains_key(&c) && !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }
}
