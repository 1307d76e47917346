//! Kidney-stone segmentation pipeline for endoscopic video.
//!
//! * [`imaging`]: grayscale, Otsu, contours, field-of-view auto-crop
//! * [`annotations`]: polygon documents, rasterized ground truth, video-level splits
//! * [`metrics`]: Dice, IoU, accuracy, PSNR, ROC/AUC, BCE
//! * [`nnet`]: encoder-decoder networks (U-Net, nested U-Net++, dense blocks) with exact gradients
//! * [`training`]: training loop, JSONL experiment log, grid search, hold-out evaluation
//! * [`synthdata`]: deterministic synthetic endoscope frames with exact masks
//! * [`videopipe`]: resampling, streaming annotation, side-by-side panels, throughput

pub mod annotations;
pub mod imaging;
pub mod metrics;
pub mod nnet;
pub mod par;
pub mod synthdata;
pub mod training;
pub mod videopipe;

pub use imaging::{BinaryMask, GrayImage, Rect, RgbImage};
pub use metrics::ProbabilityMap;
