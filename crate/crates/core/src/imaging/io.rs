//! PNG and binary PPM/PGM reading and writing; the format follows the file
//! extension.

use std::path::Path;

use image::{ExtendedColorType, ImageFormat};

use super::{BinaryMask, GrayImage, ImagingError, RgbImage};

fn format_for(path: &Path) -> ImageFormat {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") | Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, ImagingError> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn read_gray(path: &Path) -> Result<GrayImage, ImagingError> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    GrayImage::new(w as usize, h as usize, img.into_raw())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), ImagingError> {
    image::save_buffer_with_format(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        ExtendedColorType::Rgb8,
        format_for(path),
    )?;
    Ok(())
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<(), ImagingError> {
    image::save_buffer_with_format(
        path,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        ExtendedColorType::L8,
        format_for(path),
    )?;
    Ok(())
}

/// PNG with fast compression and no filtering, for high-rate output.
pub fn write_png_fast(path: &Path, img: &RgbImage) -> Result<(), ImagingError> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PngEncoder::new_with_quality(file, CompressionType::Fast, FilterType::NoFilter).write_image(
        img.data(),
        img.width() as u32,
        img.height() as u32,
        ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Masks are stored as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), ImagingError> {
    write_gray(path, &mask.to_gray())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, ImagingError> {
    Ok(BinaryMask::from_gray(&read_gray(path)?))
}
