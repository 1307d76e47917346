//! Side-by-side panels, the heat-map palette and raw probability export.

use std::io::{Read, Write};

use super::VideoError;
use crate::imaging::{BinaryMask, RgbImage};
use crate::metrics::ProbabilityMap;

pub const SEPARATOR_WIDTH: usize = 2;
pub const SEPARATOR_COLOR: [u8; 3] = [255, 255, 255];
pub const PMAP_MAGIC: [u8; 4] = *b"PMAP";

/// Linear blue-to-red palette: `(floor(255p), 0, 255 - ceil(255p))`.
pub fn heat_color(p: f32) -> [u8; 3] {
    let s = p.clamp(0.0, 1.0) * 255.0;
    [s.floor() as u8, 0, 255 - s.ceil() as u8]
}

pub fn heat_map(prob: &ProbabilityMap) -> RgbImage {
    let data = prob.data().iter().flat_map(|&p| heat_color(p)).collect();
    RgbImage::new(prob.width(), prob.height(), data).expect("three bytes per pixel")
}

/// White stone on black.
pub fn mask_image(mask: &BinaryMask) -> RgbImage {
    let data = mask.data().iter().flat_map(|&b| [b * 255; 3]).collect();
    RgbImage::new(mask.width(), mask.height(), data).expect("three bytes per pixel")
}

/// A composed output frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelFrame {
    pub image: RgbImage,
    /// 4 with ground truth, 3 without.
    pub panels: usize,
}

/// input | ground truth (optional) | predicted mask | heat map, separated
/// by white 2-pixel bars.
pub fn compose_panel(
    input: &RgbImage,
    gt: Option<&RgbImage>,
    pred: &RgbImage,
    heat: &RgbImage,
) -> Result<PanelFrame, VideoError> {
    let parts: Vec<&RgbImage> = std::iter::once(input).chain(gt).chain([pred, heat]).collect();
    let (w, h) = (input.width(), input.height());
    if let Some(bad) = parts.iter().find(|p| (p.width(), p.height()) != (w, h)) {
        return Err(VideoError::PanelSize {
            expected: (w, h),
            got: (bad.width(), bad.height()),
        });
    }
    let total_w = parts.len() * w + (parts.len() - 1) * SEPARATOR_WIDTH;
    let mut data = Vec::with_capacity(total_w * h * 3);
    let sep: Vec<u8> = SEPARATOR_COLOR.repeat(SEPARATOR_WIDTH);
    for y in 0..h {
        for (k, p) in parts.iter().enumerate() {
            if k > 0 {
                data.extend_from_slice(&sep);
            }
            data.extend_from_slice(&p.data()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok(PanelFrame {
        image: RgbImage::new(total_w, h, data)?,
        panels: parts.len(),
    })
}

/// `PMAP | u32 width | u32 height | f32 x (width * height)`, little endian.
pub fn write_pmap(w: &mut impl Write, prob: &ProbabilityMap) -> Result<(), VideoError> {
    w.write_all(&PMAP_MAGIC)?;
    w.write_all(&(prob.width() as u32).to_le_bytes())?;
    w.write_all(&(prob.height() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(prob.data().len() * 4);
    for v in prob.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pmap(r: &mut impl Read) -> Result<ProbabilityMap, VideoError> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if head[..4] != PMAP_MAGIC {
        return Err(VideoError::Pipe(format!("bad PMAP magic {:?}", &head[..4])));
    }
    let w = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let mut buf = vec![0u8; w * h * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(ProbabilityMap::new(w, h, data)?)
}
