//! Streaming annotation: preprocess, infer and compose each frame in input
//! order, either on one thread or as a three-stage pipeline joined by
//! bounded queues.

use std::time::Instant;

use crossbeam_channel::bounded;
use serde::{Deserialize, Serialize};

use super::panel::{compose_panel, heat_map, mask_image, PanelFrame};
use super::source::{FrameSource, TimedFrame};
use super::VideoError;
use crate::imaging::{BinaryMask, Letterbox, Rect};
use crate::metrics::ProbabilityMap;
use crate::nnet::{Model, Tensor};
use crate::synthdata::{generate_dataset, SceneSpec};
use crate::training::{preprocess_frame, Preprocessed};

/// Capacity of each inter-stage queue.
pub const PIPELINE_DEPTH: usize = 4;

/// Anything that maps a `3 x h x w` planar input in [0, 1] to `h x w`
/// probabilities.
pub trait Segmenter: Sync {
    /// `(width, height)` of the network input.
    fn input_size(&self) -> (usize, usize);
    fn predict(&self, input: &[f32]) -> Result<Vec<f32>, VideoError>;
}

impl Segmenter for Model<f32> {
    fn input_size(&self) -> (usize, usize) {
        (self.config.input_width, self.config.input_height)
    }

    fn predict(&self, input: &[f32]) -> Result<Vec<f32>, VideoError> {
        let (w, h) = self.input_size();
        let x = Tensor::new(vec![1, 3, h, w], input.to_vec());
        Ok(self.forward(&x)?.into_data())
    }
}

/// Stand-in model whose probability is the mean channel intensity; isolates
/// the cost of everything except inference.
#[derive(Clone, Copy, Debug)]
pub struct IdentitySegmenter {
    pub width: usize,
    pub height: usize,
}

impl Segmenter for IdentitySegmenter {
    fn input_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn predict(&self, input: &[f32]) -> Result<Vec<f32>, VideoError> {
        let n = self.width * self.height;
        Ok((0..n).map(|i| (input[i] + input[n + i] + input[2 * n + i]) / 3.0).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Sequential,
    Pipelined,
}

pub type MaskSource = Box<dyn Iterator<Item = Result<BinaryMask, VideoError>> + Send>;

/// One annotated output frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub index: usize,
    pub timestamp_ms: u64,
    pub panel: PanelFrame,
    /// Probabilities at the input frame's resolution (zero outside the crop).
    pub prob: ProbabilityMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        LatencyStats {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            median_ms: if s.len() % 2 == 1 {
                s[s.len() / 2]
            } else {
                (s[s.len() / 2 - 1] + s[s.len() / 2]) / 2.0
            },
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub decode: LatencyStats,
    pub preprocess: LatencyStats,
    pub inference: LatencyStats,
    pub compose: LatencyStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub mode: StreamMode,
    /// Frames annotated successfully.
    pub frames: usize,
    pub errors: Vec<FrameError>,
    pub wall_s: f64,
    pub mean_fps: f64,
    /// Per-frame time from decode start to hand-off to the sink.
    pub latency: LatencyStats,
    pub stages: StageTimes,
    /// Span of the input timestamps.
    pub media_duration_s: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct Timing {
    start: Instant,
    decode: f64,
    preprocess: f64,
    inference: f64,
    compose: f64,
}

struct Prepared {
    index: usize,
    frame: TimedFrame,
    gt: Option<BinaryMask>,
    pre: Preprocessed,
    timing: Timing,
}

struct Inferred {
    prepared: Prepared,
    probs: Vec<f32>,
}

type Staged<T> = Result<T, FrameError>;

fn frame_error(index: usize, e: impl std::fmt::Display) -> FrameError {
    FrameError {
        index,
        message: e.to_string(),
    }
}

/// Pulls frame `index` (and its mask) and preprocesses it.
struct Reader {
    src: FrameSource,
    gt: Option<MaskSource>,
    size: Option<(usize, usize)>,
    model_size: (usize, usize),
    index: usize,
    first_ts: Option<u64>,
    last_ts: u64,
}

impl Reader {
    fn next(&mut self) -> Option<Staged<Prepared>> {
        let start = Instant::now();
        let item = self.src.next()?;
        let gt = self.gt.as_mut().map(|g| g.next());
        let index = self.index;
        self.index += 1;
        let decode = ms_since(start);
        Some(self.prepare(index, item, gt, start, decode))
    }

    fn prepare(
        &mut self,
        index: usize,
        item: Result<TimedFrame, VideoError>,
        gt: Option<Option<Result<BinaryMask, VideoError>>>,
        start: Instant,
        decode: f64,
    ) -> Staged<Prepared> {
        let frame = item.map_err(|e| frame_error(index, e))?;
        let dims = (frame.image.width(), frame.image.height());
        let size = *self.size.get_or_insert(dims);
        if dims != size {
            return Err(frame_error(
                index,
                format!("frame is {}x{}, stream started at {}x{}", dims.0, dims.1, size.0, size.1),
            ));
        }
        self.first_ts.get_or_insert(frame.timestamp_ms);
        self.last_ts = frame.timestamp_ms;
        let gt = match gt {
            None => None,
            Some(None) => return Err(frame_error(index, "ground truth ended before the video")),
            Some(Some(m)) => {
                let m = m.map_err(|e| frame_error(index, e))?;
                if (m.width(), m.height()) != dims {
                    return Err(frame_error(
                        index,
                        format!("mask is {}x{}, frame is {}x{}", m.width(), m.height(), dims.0, dims.1),
                    ));
                }
                Some(m)
            }
        };
        let t = Instant::now();
        let pre = preprocess_frame(&frame.image, self.model_size.0, self.model_size.1);
        Ok(Prepared {
            index,
            frame,
            gt,
            pre,
            timing: Timing {
                start,
                decode,
                preprocess: ms_since(t),
                inference: 0.0,
                compose: 0.0,
            },
        })
    }
}

fn infer<M: Segmenter + ?Sized>(model: &M, p: Staged<Prepared>) -> Staged<Inferred> {
    let mut prepared = p?;
    let t = Instant::now();
    let probs = model.predict(&prepared.pre.input).map_err(|e| frame_error(prepared.index, e))?;
    prepared.timing.inference = ms_since(t);
    Ok(Inferred { prepared, probs })
}

/// Maps network-resolution probabilities back onto the full frame.
fn to_frame_coords(probs: &[f32], model_w: usize, placement: &Letterbox, crop: Rect, w: usize, h: usize) -> ProbabilityMap {
    let inner = placement.invert_nearest(probs, model_w, crop.w, crop.h);
    let mut data = vec![0.0f32; w * h];
    for y in 0..crop.h {
        let dst = (crop.y0 + y) * w + crop.x0;
        data[dst..dst + crop.w].copy_from_slice(&inner[y * crop.w..(y + 1) * crop.w]);
    }
    ProbabilityMap::new(w, h, data).expect("probabilities from the model lie in (0, 1)")
}

fn compose(model_w: usize, item: Staged<Inferred>) -> Staged<(AnnotatedFrame, Timing)> {
    let Inferred { prepared, probs } = item?;
    let t = Instant::now();
    let img = &prepared.frame.image;
    let prob = to_frame_coords(&probs, model_w, &prepared.pre.placement, prepared.pre.crop, img.width(), img.height());
    let gt = prepared.gt.as_ref().map(mask_image);
    let panel = compose_panel(img, gt.as_ref(), &mask_image(&prob.predict_mask()), &heat_map(&prob))
        .map_err(|e| frame_error(prepared.index, e))?;
    let mut timing = prepared.timing;
    timing.compose = ms_since(t);
    Ok((
        AnnotatedFrame {
            index: prepared.index,
            timestamp_ms: prepared.frame.timestamp_ms,
            panel,
            prob,
        },
        timing,
    ))
}

#[derive(Default)]
struct Tally {
    errors: Vec<FrameError>,
    latency: Vec<f64>,
    decode: Vec<f64>,
    preprocess: Vec<f64>,
    inference: Vec<f64>,
    compose: Vec<f64>,
}

impl Tally {
    fn finish(
        &mut self,
        item: Staged<(AnnotatedFrame, Timing)>,
        sink: &mut dyn FnMut(AnnotatedFrame) -> Result<(), VideoError>,
    ) -> Result<(), VideoError> {
        match item {
            Ok((frame, t)) => {
                sink(frame)?;
                self.latency.push(ms_since(t.start));
                self.decode.push(t.decode);
                self.preprocess.push(t.preprocess);
                self.inference.push(t.inference);
                self.compose.push(t.compose);
            }
            Err(e) => self.errors.push(e),
        }
        Ok(())
    }
}

/// Annotates every frame of `src` in order and hands panels to `sink`.
///
/// Frames that cannot be processed (decode failures, size changes, mask
/// mismatches) are reported in `FpsReport::errors` and skipped; the stream
/// continues. Both modes run identical per-frame code, so their panels are
/// bitwise equal.
pub fn annotate_stream<M: Segmenter + ?Sized>(
    model: &M,
    src: FrameSource,
    gt: Option<MaskSource>,
    mode: StreamMode,
    sink: &mut dyn FnMut(AnnotatedFrame) -> Result<(), VideoError>,
) -> Result<FpsReport, VideoError> {
    let model_size = model.input_size();
    let mut reader = Reader {
        src,
        gt,
        size: None,
        model_size,
        index: 0,
        first_ts: None,
        last_ts: 0,
    };
    let mut tally = Tally::default();
    let start = Instant::now();
    match mode {
        StreamMode::Sequential => {
            while let Some(p) = reader.next() {
                tally.finish(compose(model_size.0, infer(model, p)), sink)?;
            }
        }
        StreamMode::Pipelined => {
            let (tx_pre, rx_pre) = bounded::<Staged<Prepared>>(PIPELINE_DEPTH);
            let (tx_inf, rx_inf) = bounded::<Staged<Inferred>>(PIPELINE_DEPTH);
            let reader_ref = &mut reader;
            std::thread::scope(|s| -> Result<(), VideoError> {
                s.spawn(move || {
                    while let Some(p) = reader_ref.next() {
                        if tx_pre.send(p).is_err() {
                            break;
                        }
                    }
                });
                s.spawn(move || {
                    for p in rx_pre {
                        if tx_inf.send(infer(model, p)).is_err() {
                            break;
                        }
                    }
                });
                for item in rx_inf {
                    tally.finish(compose(model_size.0, item), sink)?;
                }
                Ok(())
            })?;
        }
    }
    let wall_s = start.elapsed().as_secs_f64();
    let frames = tally.latency.len();
    Ok(FpsReport {
        mode,
        frames,
        errors: tally.errors,
        wall_s,
        mean_fps: if wall_s > 0.0 { frames as f64 / wall_s } else { 0.0 },
        latency: LatencyStats::from_samples(&tally.latency),
        stages: StageTimes {
            decode: LatencyStats::from_samples(&tally.decode),
            preprocess: LatencyStats::from_samples(&tally.preprocess),
            inference: LatencyStats::from_samples(&tally.inference),
            compose: LatencyStats::from_samples(&tally.compose),
        },
        media_duration_s: reader.first_ts.map_or(0.0, |t0| (reader.last_ts - t0) as f64 / 1e3),
    })
}

/// Synthetic video of `n_frames` square frames at 20 fps, with stones
/// scaled to the frame size.
pub fn synthetic_video(frame_size: usize, n_frames: usize, seed: u64) -> Result<Vec<TimedFrame>, VideoError> {
    let scale = frame_size as f64 / 64.0;
    let spec = SceneSpec {
        seed,
        image_size: frame_size,
        stone_radius: (5.0 * scale, 11.0 * scale),
        drift: scale,
        ..SceneSpec::default()
    };
    let ds = generate_dataset(&spec, 1, n_frames)?;
    Ok(ds
        .frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| TimedFrame {
            timestamp_ms: i as u64 * 50,
            image: f.frame,
        })
        .collect())
}

/// Streams `n_frames` synthetic `frame_size` frames through `model`,
/// discarding the panels.
pub fn bench_throughput<M: Segmenter + ?Sized>(
    model: &M,
    frame_size: usize,
    n_frames: usize,
    mode: StreamMode,
) -> Result<FpsReport, VideoError> {
    if n_frames < 30 {
        return Err(VideoError::Config(format!("benchmark needs at least 30 frames, got {n_frames}")));
    }
    let frames = synthetic_video(frame_size, n_frames, 0x5eed)?;
    annotate_stream(model, FrameSource::from_frames(frames), None, mode, &mut |_| Ok(()))
}
