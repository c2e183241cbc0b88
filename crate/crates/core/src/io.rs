//! PNG/PGM reading and writing for sketches, edge maps, masks and outputs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::edges::EdgeImage;
use crate::raster::{BinaryGrid, SketchImage};

pub type ImageResult<T> = Result<T, image::ImageError>;

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "pnm" | "ppm")
    )
}

pub fn read_gray(path: &Path) -> ImageResult<GrayImage> {
    Ok(image::open(path)?.into_luma8())
}

pub fn read_rgb(path: &Path) -> ImageResult<RgbImage> {
    Ok(image::open(path)?.into_rgb8())
}

/// Writes an 8-bit grayscale raster; `.pgm` selects binary PGM, anything
/// else is written as PNG.
pub fn write_gray(path: &Path, width: u32, height: u32, pixels: &[u8]) -> ImageResult<()> {
    if is_pnm(path) {
        let out = BufWriter::new(File::create(path)?);
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(pixels, width, height, ExtendedColorType::L8)
    } else {
        image::save_buffer_with_format(
            path,
            pixels,
            width,
            height,
            ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
    }
}

pub fn write_rgb(path: &Path, width: u32, height: u32, pixels: &[u8]) -> ImageResult<()> {
    if is_pnm(path) {
        let out = BufWriter::new(File::create(path)?);
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(pixels, width, height, ExtendedColorType::Rgb8)
    } else {
        image::save_buffer_with_format(
            path,
            pixels,
            width,
            height,
            ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
    }
}

pub fn read_sketch(path: &Path) -> ImageResult<SketchImage> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    Ok(SketchImage::from_pixels(w, h, img.into_raw()).expect("decoder returns w*h pixels"))
}

pub fn write_sketch(path: &Path, sketch: &SketchImage) -> ImageResult<()> {
    write_gray(path, sketch.width(), sketch.height(), sketch.pixels())
}

/// Binary rasters are stored as 0/255 grayscale.
pub fn write_grid(path: &Path, grid: &BinaryGrid) -> ImageResult<()> {
    write_gray(path, grid.width(), grid.height(), &grid.to_gray_bytes())
}

pub fn read_edge(path: &Path) -> ImageResult<EdgeImage> {
    let img = read_gray(path)?;
    let (w, h) = img.dimensions();
    let grid = BinaryGrid::from_gray_bytes(w, h, img.as_raw(), 128).expect("w*h pixels");
    Ok(EdgeImage::from_grid(grid))
}
