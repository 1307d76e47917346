use super::{GrayImage, RgbImage};

/// BT.601 luma, rounded to nearest.
///
/// Evaluated in integer arithmetic so the result is exactly
/// `round(0.299 R + 0.587 G + 0.114 B)` with halves rounded up.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    GrayImage::new(img.width(), img.height(), data).expect("dimensions carried over")
}

#[inline]
fn luma(r: u8, g: u8, b: u8) -> u8 {
    // Exact rational arithmetic: weights are 299/1000, 587/1000, 114/1000.
    let num = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    // round half up; ties cannot straddle 255 because the weights sum to 1.
    ((num + 500) / 1000).min(255) as u8
}
