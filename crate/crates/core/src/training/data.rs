//! In-memory training sets: frames auto-cropped to the field of view and
//! letterboxed to the network input, with masks transformed identically.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::annotations::{DatasetIndex, IndexEntry, Split};
use crate::imaging::{auto_crop, io, letterbox, letterbox_mask, BinaryMask, Letterbox, Rect, RgbImage};
use crate::nnet::Tensor;
use crate::par;
use crate::synthdata::SynthFrame;

/// Network-ready view of one frame.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    /// `3 x h x w`, channel-major, scaled to [0, 1].
    pub input: Vec<f32>,
    /// Crop applied to the source frame.
    pub crop: Rect,
    /// Placement of the crop inside the network input.
    pub placement: Letterbox,
}

/// Auto-crops `img` (falling back to the whole frame when nothing is
/// croppable) and letterboxes the crop to `w x h`.
pub fn preprocess_frame(img: &RgbImage, w: usize, h: usize) -> Preprocessed {
    let (cropped, crop) = match auto_crop(img) {
        Ok(c) => c,
        Err(_) => (img.clone(), Rect::full(img.width(), img.height())),
    };
    let (boxed, placement) = letterbox(&cropped, w, h);
    Preprocessed {
        input: to_planar(&boxed),
        crop,
        placement,
    }
}

fn to_planar(img: &RgbImage) -> Vec<f32> {
    let n = img.width() * img.height();
    let mut out = vec![0.0f32; 3 * n];
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * n + i] = px[c] as f32 / 255.0;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub input: Vec<f32>,
    /// Ground truth in network coordinates.
    pub mask: BinaryMask,
}

/// Preprocessed frame/mask pairs at a fixed network resolution.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_pairs(pairs: &[(RgbImage, BinaryMask)], w: usize, h: usize) -> Result<Self, TrainError> {
        for (img, m) in pairs {
            if (img.width(), img.height()) != (m.width(), m.height()) {
                return Err(TrainError::Data(format!(
                    "frame is {}x{} but its mask is {}x{}",
                    img.width(),
                    img.height(),
                    m.width(),
                    m.height()
                )));
            }
        }
        let samples = par::map_slice(pairs, |(img, m)| {
            let p = preprocess_frame(img, w, h);
            let cropped = m.crop(p.crop).expect("crop computed from a frame of the same size");
            Sample {
                input: p.input,
                mask: letterbox_mask(&cropped, w, h).0,
            }
        });
        Ok(Dataset {
            width: w,
            height: h,
            samples,
        })
    }

    pub fn from_synth<'a>(frames: impl IntoIterator<Item = &'a SynthFrame>, w: usize, h: usize) -> Result<Self, TrainError> {
        let pairs: Vec<(RgbImage, BinaryMask)> = frames.into_iter().map(|f| (f.frame.clone(), f.mask.clone())).collect();
        Self::from_pairs(&pairs, w, h)
    }

    /// Loads the frames of `split` listed in `index`, resolving paths against `root`.
    pub fn load(index: &DatasetIndex, root: &Path, split: Split, w: usize, h: usize) -> Result<Self, TrainError> {
        let entries: Vec<&IndexEntry> = index.split(split).collect();
        let pairs = par::map_slice(&entries, |e| -> Result<_, TrainError> {
            Ok((io::read_rgb(&root.join(&e.frame_path))?, io::read_mask(&root.join(&e.mask_path))?))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        Self::from_pairs(&pairs, w, h)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the listed samples into `(n, 3, h, w)` inputs and `(n, 1, h, w)` targets.
    pub fn batch(&self, ids: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let (h, w) = (self.height, self.width);
        let mut x = Vec::with_capacity(ids.len() * 3 * h * w);
        let mut y = Vec::with_capacity(ids.len() * h * w);
        for &i in ids {
            let s = &self.samples[i];
            x.extend_from_slice(&s.input);
            y.extend(s.mask.data().iter().map(|&b| b as f32));
        }
        (Tensor::new(vec![ids.len(), 3, h, w], x), Tensor::new(vec![ids.len(), 1, h, w], y))
    }
}

/// Shuffles `0..n` with a ChaCha stream seeded by `seed ^ epoch` and cuts it
/// into batches of `batch_size`; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>, TrainError> {
    if n == 0 {
        return Err(TrainError::Data("cannot batch an empty split".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// [`make_batches`] over the entries of one split of an index.
pub fn make_index_batches<'a>(
    index: &'a DatasetIndex,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<&'a IndexEntry>>, TrainError> {
    let entries: Vec<&IndexEntry> = index.split(split).collect();
    Ok(make_batches(entries.len(), batch_size, seed, epoch)?
        .into_iter()
        .map(|b| b.into_iter().map(|i| entries[i]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SceneSpec};

    #[test]
    fn batch_sizes_and_partition() {
        let b = make_batches(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, 4, 3, 0).unwrap());
        assert_ne!(b, make_batches(10, 4, 3, 1).unwrap());
        assert!(make_batches(0, 4, 3, 0).is_err());
    }

    #[test]
    fn masks_follow_the_frame_transform() {
        let ds = generate_dataset(&SceneSpec { seed: 4, image_size: 80, ..SceneSpec::default() }, 2, 2).unwrap();
        let data = Dataset::from_synth(&ds.frames, 32, 32).unwrap();
        assert_eq!(data.len(), 4);
        for (s, f) in data.samples.iter().zip(&ds.frames) {
            assert_eq!((s.mask.width(), s.mask.height()), (32, 32));
            assert!(s.mask.count_ones() > 0);
            // stones are the brightest objects in the clean frames
            let n = 32 * 32;
            let lum = |i: usize| s.input[i] + s.input[n + i];
            let on: f32 = (0..n).filter(|&i| s.mask.data()[i] == 1).map(lum).sum::<f32>() / s.mask.count_ones() as f32;
            let off: f32 = (0..n).filter(|&i| s.mask.data()[i] == 0).map(lum).sum::<f32>() / (n - s.mask.count_ones()) as f32;
            assert!(on > off + 0.3, "{on} vs {off} in {}", f.video_id);
        }
    }

    #[test]
    fn uncroppable_frames_use_the_whole_image() {
        let black = RgbImage::filled(16, 8, [0, 0, 0]);
        let p = preprocess_frame(&black, 8, 8);
        assert_eq!(p.crop, Rect::full(16, 8));
        assert_eq!(p.placement.inner_h, 4);
    }
}
