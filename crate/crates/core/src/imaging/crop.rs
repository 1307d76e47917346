use serde::{Deserialize, Serialize};

use super::{find_contours, otsu_threshold, to_grayscale, BinaryMask, GrayImage, ImagingError, RgbImage};

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn full(width: usize, height: usize) -> Self {
        Rect {
            x0: 0,
            y0: 0,
            w: width,
            h: height,
        }
    }

    /// True when the rect is non-empty and lies inside a `width x height` image.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }
}

/// Foreground where intensity is strictly above `threshold`.
pub fn binarize(img: &GrayImage, threshold: u8) -> BinaryMask {
    BinaryMask::new(
        img.width(),
        img.height(),
        img.data().iter().map(|&v| u8::from(v > threshold)).collect(),
    )
    .expect("dimensions carried over")
}

/// Crops a frame to the bounding box of its largest bright region.
///
/// grayscale -> Otsu -> binarize -> contours -> largest shoelace area ->
/// tight bounds. Equal areas keep the component found first in raster order.
pub fn auto_crop(img: &RgbImage) -> Result<(RgbImage, Rect), ImagingError> {
    let gray = to_grayscale(img);
    let otsu = otsu_threshold(&gray);
    let mask = binarize(&gray, otsu.threshold);
    let contours = find_contours(&mask);
    let mut best: Option<&super::Contour> = None;
    for c in &contours {
        if best.is_none_or(|b| c.area > b.area) {
            best = Some(c);
        }
    }
    let rect = best.ok_or(ImagingError::Uncroppable)?.bounds;
    Ok((img.crop(rect)?, rect))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paint(w: usize, h: usize, on: impl Fn(usize, usize) -> bool) -> RgbImage {
        let mut img = RgbImage::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                if on(x, y) {
                    img.put(x, y, [255, 255, 255]);
                }
            }
        }
        img
    }

    #[test]
    fn centered_square() {
        let img = paint(64, 48, |x, y| (22..42).contains(&x) && (14..34).contains(&y));
        let (crop, rect) = auto_crop(&img).unwrap();
        assert_eq!(rect, Rect { x0: 22, y0: 14, w: 20, h: 20 });
        assert_eq!((crop.width(), crop.height()), (20, 20));
        assert!(crop.data().iter().all(|&v| v == 255));
    }

    #[test]
    fn black_frame_is_uncroppable() {
        let img = RgbImage::filled(16, 16, [0, 0, 0]);
        assert!(matches!(auto_crop(&img), Err(ImagingError::Uncroppable)));
    }

    #[test]
    fn circle_bounds_match_component_bounds() {
        let (cx, cy, r) = (40.0f64, 30.0f64, 12.0f64);
        let inside = |x: usize, y: usize| {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            dx * dx + dy * dy <= r * r
        };
        let img = paint(80, 60, inside);
        let (xs, ys): (Vec<usize>, Vec<usize>) = (0..80)
            .flat_map(|x| (0..60).map(move |y| (x, y)))
            .filter(|&(x, y)| inside(x, y))
            .unzip();
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        let (_, rect) = auto_crop(&img).unwrap();
        assert_eq!(rect, Rect { x0, y0, w: x1 - x0 + 1, h: y1 - y0 + 1 });
        assert_eq!(rect.w, 24);
    }

    #[test]
    fn largest_region_wins() {
        let img = paint(50, 50, |x, y| {
            ((2..6).contains(&x) && (2..6).contains(&y)) || ((20..45).contains(&x) && (10..40).contains(&y))
        });
        let (_, rect) = auto_crop(&img).unwrap();
        assert_eq!(rect, Rect { x0: 20, y0: 10, w: 25, h: 30 });
    }

    #[test]
    fn crop_is_idempotent_when_foreground_fills_border() {
        let img = paint(40, 40, |x, y| (5..30).contains(&x) && (8..20).contains(&y));
        let (crop, _) = auto_crop(&img).unwrap();
        let (_, again) = auto_crop(&crop).unwrap();
        assert_eq!(again, Rect::full(crop.width(), crop.height()));
    }
}
