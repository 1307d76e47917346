//! Frame sources: numbered PNG directories, raw length-prefixed pipes, and
//! in-memory lists, plus nearest-tick resampling.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::VideoError;
use crate::imaging::{io, RgbImage};

pub const FRAME_MAGIC: [u8; 4] = *b"FRM0";
pub const DEFAULT_TARGET_FPS: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TimedFrame {
    pub timestamp_ms: u64,
    pub image: RgbImage,
}

/// `index.json` of a frame directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDirIndex {
    pub fps_nominal: f64,
    pub timestamps_ms: Vec<u64>,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

type FrameIter = Box<dyn Iterator<Item = Result<TimedFrame, VideoError>> + Send>;

/// Ordered, lazily decoded frames. Timestamps must not decrease and every
/// frame must share the first frame's size; violations surface as errors
/// from the iterator.
pub struct FrameSource {
    inner: FrameIter,
    last_ts: Option<u64>,
}

impl FrameSource {
    pub fn new(inner: impl Iterator<Item = Result<TimedFrame, VideoError>> + Send + 'static) -> Self {
        FrameSource {
            inner: Box::new(inner),
            last_ts: None,
        }
    }

    pub fn from_frames(frames: Vec<TimedFrame>) -> Self {
        Self::new(frames.into_iter().map(Ok))
    }

    /// Reads `frame_%06d.png` files listed by `index.json` in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, VideoError> {
        let index: FrameDirIndex = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let dir: PathBuf = dir.to_path_buf();
        Ok(Self::new(index.timestamps_ms.into_iter().enumerate().map(move |(i, ts)| {
            Ok(TimedFrame {
                timestamp_ms: ts,
                image: io::read_rgb(&dir.join(frame_file_name(i)))?,
            })
        })))
    }

    /// Reads `FRM0 | u32 width | u32 height | u64 timestamp_ms | RGB bytes`
    /// records until end of stream.
    pub fn from_pipe(reader: impl Read + Send + 'static) -> Self {
        let mut r = BufReader::new(reader);
        let mut done = false;
        Self::new(std::iter::from_fn(move || {
            if done {
                return None;
            }
            let item = read_pipe_frame(&mut r);
            if !matches!(item, Ok(Some(_))) {
                done = true;
            }
            item.transpose()
        }))
    }

    /// Drains the source into memory.
    pub fn collect_frames(self) -> Result<Vec<TimedFrame>, VideoError> {
        self.collect()
    }

    /// Nearest-tick resampling to `target_fps`; see [`resample_indices`].
    pub fn resample(self, target_fps: f64) -> Result<FrameSource, VideoError> {
        if !(target_fps > 0.0 && target_fps.is_finite()) {
            return Err(VideoError::Config(format!("target fps must be positive, got {target_fps}")));
        }
        Ok(FrameSource::new(Resampler {
            inner: self.peekable(),
            prev: None,
            origin: 0,
            tick: 0,
            period_ms: 1000.0 / target_fps,
            failed: false,
        }))
    }
}

impl Iterator for FrameSource {
    type Item = Result<TimedFrame, VideoError>;

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.inner.next()?;
        Some(item.and_then(|f| {
            if let Some(prev) = self.last_ts {
                if f.timestamp_ms < prev {
                    return Err(VideoError::Timestamps(format!(
                        "timestamp {} ms follows {} ms",
                        f.timestamp_ms, prev
                    )));
                }
            }
            self.last_ts = Some(f.timestamp_ms);
            Ok(f)
        }))
    }
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<bool, VideoError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => return Err(VideoError::Pipe(format!("stream ended inside a {}-byte field", buf.len()))),
            n => filled += n,
        }
    }
    Ok(true)
}

fn read_pipe_frame(r: &mut impl Read) -> Result<Option<TimedFrame>, VideoError> {
    let mut head = [0u8; 20];
    if !read_exact_or_eof(r, &mut head)? {
        return Ok(None);
    }
    if head[..4] != FRAME_MAGIC {
        return Err(VideoError::Pipe(format!("bad frame magic {:?}", &head[..4])));
    }
    let w = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let ts = u64::from_le_bytes(head[12..20].try_into().expect("8 bytes"));
    let mut data = vec![0u8; w * h * 3];
    if !read_exact_or_eof(r, &mut data)? && !data.is_empty() {
        return Err(VideoError::Pipe("stream ended before frame pixels".into()));
    }
    Ok(Some(TimedFrame {
        timestamp_ms: ts,
        image: RgbImage::new(w, h, data)?,
    }))
}

pub fn write_pipe_frame(w: &mut impl Write, frame: &TimedFrame) -> Result<(), VideoError> {
    w.write_all(&FRAME_MAGIC)?;
    w.write_all(&(frame.image.width() as u32).to_le_bytes())?;
    w.write_all(&(frame.image.height() as u32).to_le_bytes())?;
    w.write_all(&frame.timestamp_ms.to_le_bytes())?;
    w.write_all(frame.image.data())?;
    Ok(())
}

/// Writes frames as a directory source readable by [`FrameSource::from_dir`].
pub fn write_frame_dir(dir: &Path, frames: &[TimedFrame], fps_nominal: f64) -> Result<(), VideoError> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        io::write_rgb(&dir.join(frame_file_name(i)), &f.image)?;
    }
    let index = FrameDirIndex {
        fps_nominal,
        timestamps_ms: frames.iter().map(|f| f.timestamp_ms).collect(),
    };
    let mut out = BufWriter::new(std::fs::File::create(dir.join("index.json"))?);
    serde_json::to_writer_pretty(&mut out, &index)?;
    out.flush()?;
    Ok(())
}

/// For each tick of a `1000 / target_fps` ms grid starting at the first
/// timestamp and ending at the last, the index of the frame whose timestamp
/// is nearest (earlier frame on ties).
pub fn resample_indices(timestamps: &[u64], target_fps: f64) -> Result<Vec<usize>, VideoError> {
    if timestamps.is_empty() {
        return Err(VideoError::Empty);
    }
    if timestamps.windows(2).any(|w| w[1] < w[0]) {
        return Err(VideoError::Timestamps("timestamps decrease".into()));
    }
    if !(target_fps > 0.0 && target_fps.is_finite()) {
        return Err(VideoError::Config(format!("target fps must be positive, got {target_fps}")));
    }
    let period = 1000.0 / target_fps;
    let (t0, last) = (timestamps[0], timestamps[timestamps.len() - 1]);
    let mut out = Vec::new();
    let mut j = 0;
    for k in 0u64.. {
        let tick = t0 as f64 + k as f64 * period;
        if tick > last as f64 {
            break;
        }
        while j + 1 < timestamps.len() && timestamps[j + 1] as f64 <= tick {
            j += 1;
        }
        let pick = if j + 1 < timestamps.len() && (timestamps[j + 1] as f64 - tick) < (tick - timestamps[j] as f64) {
            j + 1
        } else {
            j
        };
        out.push(pick);
    }
    Ok(out)
}

/// Resamples an in-memory frame list.
pub fn resample_frames(frames: &[TimedFrame], target_fps: f64) -> Result<Vec<TimedFrame>, VideoError> {
    let ts: Vec<u64> = frames.iter().map(|f| f.timestamp_ms).collect();
    Ok(resample_indices(&ts, target_fps)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

/// Streaming form of [`resample_indices`], holding at most two frames.
struct Resampler {
    inner: std::iter::Peekable<FrameSource>,
    prev: Option<TimedFrame>,
    origin: u64,
    tick: u64,
    period_ms: f64,
    failed: bool,
}

impl Iterator for Resampler {
    type Item = Result<TimedFrame, VideoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if self.prev.is_none() {
            match self.inner.next()? {
                Ok(f) => {
                    self.origin = f.timestamp_ms;
                    self.prev = Some(f);
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        let tick = self.origin as f64 + self.tick as f64 * self.period_ms;
        loop {
            match self.inner.peek() {
                Some(Ok(n)) if n.timestamp_ms as f64 <= tick => {
                    self.prev = self.inner.next().and_then(Result::ok);
                }
                Some(Err(_)) => {
                    self.failed = true;
                    return self.inner.next();
                }
                _ => break,
            }
        }
        let prev = self.prev.as_ref().expect("set above");
        let chosen = match self.inner.peek() {
            Some(Ok(n)) if (n.timestamp_ms as f64 - tick) < (tick - prev.timestamp_ms as f64) => n.clone(),
            Some(Ok(_)) => prev.clone(),
            _ if tick <= prev.timestamp_ms as f64 => prev.clone(),
            _ => return None,
        };
        self.tick += 1;
        Some(Ok(chosen))
    }
}
