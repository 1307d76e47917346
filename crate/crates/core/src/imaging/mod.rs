//! Frame preprocessing: grayscale conversion, Otsu thresholding, contour
//! extraction and automatic cropping of the endoscope's field of view.

mod contour;
mod crop;
mod gray;
pub mod io;
mod otsu;
mod resize;

pub use contour::{find_contours, label_components, Contour};
pub use crop::{auto_crop, binarize, Rect};
pub use gray::to_grayscale;
pub use otsu::{otsu_threshold, Otsu};
pub use resize::{letterbox, letterbox_mask, resize_bilinear_rgb, resize_nearest, resize_nearest_mask, Letterbox};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image dimensions {width}x{height} for {len} bytes ({channels} channel(s))")]
    InvalidDimensions {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
    #[error("mask values must be 0 or 1, found {0}")]
    InvalidMaskValue(u8),
    #[error("uncroppable frame: no foreground contour found")]
    Uncroppable,
    #[error("rect {0:?} does not fit inside a {1}x{2} image")]
    RectOutOfBounds(Rect, usize, usize),
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

fn check_dims(width: usize, height: usize, channels: usize, len: usize) -> Result<(), ImagingError> {
    if width == 0 || height == 0 || width.checked_mul(height).and_then(|p| p.checked_mul(channels)) != Some(len) {
        return Err(ImagingError::InvalidDimensions {
            width,
            height,
            channels,
            len,
        });
    }
    Ok(())
}

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        check_dims(width, height, 3, data.len())?;
        Ok(Self { width, height, data })
    }

    /// A `width x height` image filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies out the sub-image covered by `rect`.
    pub fn crop(&self, rect: Rect) -> Result<RgbImage, ImagingError> {
        if !rect.fits(self.width, self.height) {
            return Err(ImagingError::RectOutOfBounds(rect, self.width, self.height));
        }
        let mut data = Vec::with_capacity(rect.w * rect.h * 3);
        for y in rect.y0..rect.y0 + rect.h {
            let start = (y * self.width + rect.x0) * 3;
            data.extend_from_slice(&self.data[start..start + rect.w * 3]);
        }
        Ok(RgbImage {
            width: rect.w,
            height: rect.h,
            data,
        })
    }
}

/// Row-major 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        check_dims(width, height, 1, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Per-pixel binary labels, `1` = stone / foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        check_dims(width, height, 1, data.len())?;
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(ImagingError::InvalidMaskValue(bad));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "mask must be non-empty");
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    /// Builds a mask from a predicate over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = u8::from(f(x, y));
            }
        }
        m
    }

    /// Interprets on-disk 0/255 grayscale; any nonzero value is foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| u8::from(v != 0)).collect(),
        }
    }

    /// 0/255 grayscale rendering used for disk storage.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn crop(&self, rect: Rect) -> Result<BinaryMask, ImagingError> {
        if !rect.fits(self.width, self.height) {
            return Err(ImagingError::RectOutOfBounds(rect, self.width, self.height));
        }
        let mut data = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y0..rect.y0 + rect.h {
            let start = y * self.width + rect.x0;
            data.extend_from_slice(&self.data[start..start + rect.w]);
        }
        Ok(BinaryMask {
            width: rect.w,
            height: rect.h,
            data,
        })
    }

    /// Pixelwise OR of two equally sized masks.
    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        }
    }
}
