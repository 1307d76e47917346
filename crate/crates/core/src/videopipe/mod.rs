//! Real-time video annotation: frame sources and resampling, streaming
//! inference, side-by-side panels and throughput measurement.

mod output;
mod panel;
mod source;
mod stream;

pub use output::{mask_dir_source, panel_file_name, pmap_file_name, PanelWriter};
pub use panel::{
    compose_panel, heat_color, heat_map, mask_image, read_pmap, write_pmap, PanelFrame, PMAP_MAGIC, SEPARATOR_COLOR,
    SEPARATOR_WIDTH,
};
pub use source::{
    frame_file_name, resample_frames, resample_indices, write_frame_dir, write_pipe_frame, FrameDirIndex, FrameSource,
    TimedFrame, DEFAULT_TARGET_FPS, FRAME_MAGIC,
};
pub use stream::{
    annotate_stream, bench_throughput, synthetic_video, AnnotatedFrame, FpsReport, FrameError, IdentitySegmenter,
    LatencyStats, MaskSource, Segmenter, StageTimes, StreamMode, PIPELINE_DEPTH,
};

use thiserror::Error;

use crate::imaging::ImagingError;
use crate::metrics::MetricsError;
use crate::nnet::NnetError;
use crate::synthdata::SynthError;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("frame source is empty")]
    Empty,
    #[error("timestamps: {0}")]
    Timestamps(String),
    #[error("raw stream: {0}")]
    Pipe(String),
    #[error("panel sizes differ: expected {expected:?}, got {got:?}")]
    PanelSize { expected: (usize, usize), got: (usize, usize) },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
