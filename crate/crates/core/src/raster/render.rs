use super::{BBox, Canvas, GlyphAtlas, RasterError, SketchImage};

/// Renders `text` in black on a white canvas, scaled by the largest integer
/// factor that fits the box minus a 10% inner padding on each side, and
/// centered in the box. Empty text yields an all-white sketch.
pub fn render_sketch(
    text: &str,
    atlas: &GlyphAtlas,
    bbox: BBox,
    canvas: Canvas,
) -> Result<SketchImage, RasterError> {
    bbox.validate(canvas)?;
    let missing = atlas.missing(text);
    if !missing.is_empty() {
        return Err(RasterError::UnsupportedCodepoints(missing));
    }
    let mut sketch = SketchImage::blank(canvas);
    if text.is_empty() {
        return Ok(sketch);
    }

    // Layout at unit scale: each glyph sits top-aligned at its pen position.
    let mut placed = Vec::new();
    let mut pen = 0u32;
    let mut extent = 0u32;
    for c in text.chars() {
        let glyph = atlas.glyph(c).expect("checked above");
        placed.push((pen, glyph));
        extent = extent.max(pen + glyph.bitmap.width());
        pen += glyph.advance;
    }
    let text_w = extent.max(pen);
    let text_h = atlas.line_height();

    let pad_x = bbox.w / 10;
    let pad_y = bbox.h / 10;
    let inner_w = bbox.w - 2 * pad_x;
    let inner_h = bbox.h - 2 * pad_y;
    let scale = (inner_w / text_w).min(inner_h / text_h);
    if scale == 0 {
        return Err(RasterError::TextDoesNotFit {
            text_w,
            text_h,
            inner_w,
            inner_h,
        });
    }

    let origin_x = bbox.x + pad_x + (inner_w - text_w * scale) / 2;
    let origin_y = bbox.y + pad_y + (inner_h - text_h * scale) / 2;
    for (pen_x, glyph) in placed {
        let bm = &glyph.bitmap;
        for gy in 0..bm.height() {
            for gx in 0..bm.width() {
                if !bm.get(gx, gy) {
                    continue;
                }
                let x0 = origin_x + (pen_x + gx) * scale;
                let y0 = origin_y + gy * scale;
                for y in y0..y0 + scale {
                    for x in x0..x0 + scale {
                        sketch.set(x, y, SketchImage::INK);
                    }
                }
            }
        }
    }
    Ok(sketch)
}

#[cfg(test)]
mod tests {
    use super::*;

    const C512: Canvas = Canvas::new(512, 512);

    #[test]
    fn empty_text_is_white() {
        let s = render_sketch("", &GlyphAtlas::embedded(), BBox::new(3, 4, 50, 60), C512).unwrap();
        assert!(s.pixels().iter().all(|&p| p == 255));
        assert_eq!(s.canvas(), C512);
    }

    #[test]
    fn ab_ink_count_matches_font_table() {
        let atlas = GlyphAtlas::embedded();
        let bbox = BBox::new(100, 100, 160, 80);
        let s = render_sketch("AB", &atlas, bbox, C512).unwrap();
        // bits counted straight from the 8x8 table rows
        let bits = |rows: [u8; 8]| rows.iter().map(|r| r.count_ones() as usize).sum::<usize>();
        let a = bits(font8x8::legacy::BASIC_LEGACY[b'A' as usize]);
        let b = bits(font8x8::legacy::BASIC_LEGACY[b'B' as usize]);
        // padded interior 128x64 over a 16x8 layout
        let scale = (128 / 16).min(64 / 8);
        assert_eq!(s.ink_count(), (a + b) * scale * scale);
        for y in 0..512 {
            for x in 0..512 {
                let p = s.get(x, y);
                assert!(p == 0 || p == 255);
                if p == 0 {
                    assert!(bbox.contains(x, y));
                }
            }
        }
    }

    #[test]
    fn missing_glyphs_listed() {
        let err = render_sketch("Gänse", &GlyphAtlas::embedded(), BBox::new(0, 0, 400, 100), C512)
            .unwrap_err();
        match err {
            RasterError::UnsupportedCodepoints(cps) => assert_eq!(cps, vec!['ä']),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn too_small_box_is_an_error() {
        let err =
            render_sketch("HELLO", &GlyphAtlas::embedded(), BBox::new(0, 0, 20, 20), C512).unwrap_err();
        assert!(matches!(err, RasterError::TextDoesNotFit { .. }));
    }

    #[test]
    fn glyphs_are_centered() {
        let bbox = BBox::new(10, 10, 100, 40);
        let s = render_sketch("I", &GlyphAtlas::embedded(), bbox, C512).unwrap();
        let ink = s.ink_mask().bounding_rect().unwrap();
        let left = ink.x - bbox.x;
        let right = bbox.right() - ink.right();
        // 'I' sits off-center in its 8px cell: up to two scaled pixels of slack
        assert!(left.abs_diff(right) <= 2 * 4, "{ink} in {bbox}");
    }
}
