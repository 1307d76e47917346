use super::{BinaryMask, RgbImage};

/// Placement of a resized image inside a fixed-size canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Letterbox {
    pub offset_x: usize,
    pub offset_y: usize,
    pub inner_w: usize,
    pub inner_h: usize,
}

impl Letterbox {
    /// Largest aspect-preserving placement of a `w x h` image centered in an
    /// `out_w x out_h` canvas.
    pub fn fit(w: usize, h: usize, out_w: usize, out_h: usize) -> Self {
        let scale = (out_w as f64 / w as f64).min(out_h as f64 / h as f64);
        let inner_w = ((w as f64 * scale).round() as usize).clamp(1, out_w);
        let inner_h = ((h as f64 * scale).round() as usize).clamp(1, out_h);
        Letterbox {
            offset_x: (out_w - inner_w) / 2,
            offset_y: (out_h - inner_h) / 2,
            inner_w,
            inner_h,
        }
    }

    /// Extracts the inner region of a canvas-sized buffer and resizes it
    /// (nearest neighbor) back to `w x h`.
    pub fn invert_nearest<T: Copy>(&self, canvas: &[T], canvas_w: usize, w: usize, h: usize) -> Vec<T> {
        let mut inner = Vec::with_capacity(self.inner_w * self.inner_h);
        for y in 0..self.inner_h {
            let row = (y + self.offset_y) * canvas_w + self.offset_x;
            inner.extend_from_slice(&canvas[row..row + self.inner_w]);
        }
        resize_nearest(&inner, self.inner_w, self.inner_h, w, h)
    }
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear_rgb(img: &RgbImage, out_w: usize, out_h: usize) -> RgbImage {
    assert!(out_w > 0 && out_h > 0);
    let (sw, sh) = (img.width(), img.height());
    if (sw, sh) == (out_w, out_h) {
        return img.clone();
    }
    let sx = sw as f32 / out_w as f32;
    let sy = sh as f32 / out_h as f32;
    let src = img.data();
    let mut out = vec![0u8; out_w * out_h * 3];
    let xs: Vec<(usize, usize, f32)> = (0..out_w).map(|x| taps(x, sx, sw)).collect();
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, sh);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p = |xx: usize, yy: usize| src[(yy * sw + xx) * 3 + c] as f32;
                let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
                let bot = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
                let v = top + (bot - top) * fy;
                out[(y * out_w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbImage::new(out_w, out_h, out).expect("sized above")
}

#[inline]
fn taps(dst: usize, scale: f32, src_len: usize) -> (usize, usize, f32) {
    let s = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f32)
}

/// Aspect-preserving bilinear resize into an `out_w x out_h` black canvas,
/// centered.
pub fn letterbox(img: &RgbImage, out_w: usize, out_h: usize) -> (RgbImage, Letterbox) {
    let geom = Letterbox::fit(img.width(), img.height(), out_w, out_h);
    let (inner_w, inner_h) = (geom.inner_w, geom.inner_h);
    let inner = resize_bilinear_rgb(img, inner_w, inner_h);
    if (inner_w, inner_h) == (out_w, out_h) {
        return (inner, geom);
    }
    let mut canvas = RgbImage::filled(out_w, out_h, [0, 0, 0]);
    for y in 0..inner_h {
        let dst = ((y + geom.offset_y) * out_w + geom.offset_x) * 3;
        let src = y * inner_w * 3;
        canvas.data_mut()[dst..dst + inner_w * 3].copy_from_slice(&inner.data()[src..src + inner_w * 3]);
    }
    (canvas, geom)
}

/// Nearest-neighbor resize of any row-major single-channel buffer.
pub fn resize_nearest<T: Copy>(src: &[T], sw: usize, sh: usize, out_w: usize, out_h: usize) -> Vec<T> {
    assert_eq!(src.len(), sw * sh);
    let xs: Vec<usize> = (0..out_w).map(|x| ((x * sw * 2 + sw) / (out_w * 2)).min(sw - 1)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let sy = ((y * sh * 2 + sh) / (out_h * 2)).min(sh - 1);
        out.extend(xs.iter().map(|&sx| src[sy * sw + sx]));
    }
    out
}

pub fn resize_nearest_mask(mask: &BinaryMask, out_w: usize, out_h: usize) -> BinaryMask {
    let data = resize_nearest(mask.data(), mask.width(), mask.height(), out_w, out_h);
    BinaryMask::new(out_w, out_h, data).expect("values copied from a valid mask")
}

/// The mask counterpart of [`letterbox`]: nearest-neighbor resize into the
/// same placement, background elsewhere.
pub fn letterbox_mask(mask: &BinaryMask, out_w: usize, out_h: usize) -> (BinaryMask, Letterbox) {
    let geom = Letterbox::fit(mask.width(), mask.height(), out_w, out_h);
    let inner = resize_nearest(mask.data(), mask.width(), mask.height(), geom.inner_w, geom.inner_h);
    let mut data = vec![0u8; out_w * out_h];
    for y in 0..geom.inner_h {
        let dst = (y + geom.offset_y) * out_w + geom.offset_x;
        data[dst..dst + geom.inner_w].copy_from_slice(&inner[y * geom.inner_w..(y + 1) * geom.inner_w]);
    }
    (BinaryMask::new(out_w, out_h, data).expect("values copied from a valid mask"), geom)
}
