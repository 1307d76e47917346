//! Synthetic endoscope-like video frames with exact ground truth.
//!
//! A scene is a textured reddish field inside a circular field of view on a
//! black border, with bright irregular stones. Each video pans a drifting
//! camera over one fixed scene. Masks come from rasterizing the same
//! polygons the stones are painted from, so they are exact by construction.

use std::f64::consts::TAU;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{frame_paths, rasterize_polygons, AnnotationDoc, DatasetIndex, IndexEntry, Polygon, Split};
use crate::imaging::{io, BinaryMask, ImagingError, RgbImage};
use crate::par;

/// Stone outline vertex count.
const STONE_VERTICES: usize = 28;
/// Relative amplitude of the radial perturbation.
const RADIAL_JITTER: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("unknown challenge `{0}` (expected motion_blur, debris, foreign_object or saline_flash)")]
    UnknownChallenge(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Challenge {
    MotionBlur,
    Debris,
    ForeignObject,
    SalineFlash,
}

impl Challenge {
    pub const ALL: [Challenge; 4] = [
        Challenge::MotionBlur,
        Challenge::Debris,
        Challenge::ForeignObject,
        Challenge::SalineFlash,
    ];

    /// Parses a comma-separated list such as `blur,debris`. `all` selects
    /// every challenge; an empty string selects none.
    pub fn parse_list(s: &str) -> Result<Vec<Challenge>, SynthError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Self::ALL);
            } else {
                out.push(part.parse()?);
            }
        }
        out.sort_by_key(|c| *c as u8);
        out.dedup();
        Ok(out)
    }
}

impl FromStr for Challenge {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "motion_blur" | "blur" => Challenge::MotionBlur,
            "debris" => Challenge::Debris,
            "foreign_object" | "foreign" | "object" => Challenge::ForeignObject,
            "saline_flash" | "saline" | "flash" => Challenge::SalineFlash,
            other => return Err(SynthError::UnknownChallenge(other.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// Frames are square, `image_size` pixels on a side.
    pub image_size: usize,
    /// Inclusive range of stones per scene.
    pub stone_count: (usize, usize),
    /// Range of mean stone radius in pixels.
    pub stone_radius: (f64, f64),
    /// Background texture strength in [0, 1].
    pub texture_amplitude: f64,
    /// Field-of-view radius as a fraction of half the image size.
    pub fov_radius_fraction: f64,
    pub challenges: Vec<Challenge>,
    /// Probability that each enabled challenge affects a given frame.
    pub challenge_rate: f64,
    /// Upper bound on per-axis camera displacement between consecutive frames, pixels.
    pub drift: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            image_size: 64,
            stone_count: (1, 3),
            stone_radius: (5.0, 11.0),
            texture_amplitude: 0.5,
            fov_radius_fraction: 0.9,
            challenges: Vec::new(),
            challenge_rate: 1.0,
            drift: 1.0,
        }
    }
}

impl SceneSpec {
    fn fov_radius(&self) -> f64 {
        self.fov_radius_fraction * self.image_size as f64 / 2.0
    }

    /// Largest distance from a stone's center to its outline.
    fn max_extent(&self) -> f64 {
        self.stone_radius.1 * (1.0 + RADIAL_JITTER)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.stone_count.0 > self.stone_count.1 {
            return bad(format!("stone_count range {:?} is reversed", self.stone_count));
        }
        let (r0, r1) = self.stone_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("stone_radius range ({r0}, {r1}) must be positive and ordered"));
        }
        if !(self.fov_radius_fraction > 0.0 && self.fov_radius_fraction <= 1.0) {
            return bad(format!("fov_radius_fraction {} must be in (0, 1]", self.fov_radius_fraction));
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) {
            return bad(format!("texture_amplitude {} must be in [0, 1]", self.texture_amplitude));
        }
        if !(0.0..=1.0).contains(&self.challenge_rate) {
            return bad(format!("challenge_rate {} must be in [0, 1]", self.challenge_rate));
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad(format!("drift {} must be finite and non-negative", self.drift));
        }
        if self.stone_count.1 > 0 && self.max_extent() >= self.fov_radius() {
            return bad(format!(
                "stones up to {:.1} px from their center do not fit a field of view of radius {:.1} px",
                self.max_extent(),
                self.fov_radius()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stone {
    center: (f64, f64),
    /// Outline relative to the center.
    outline: Vec<(f64, f64)>,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    weight: f64,
}

#[derive(Clone, Debug)]
struct Scene {
    stones: Vec<Stone>,
    tissue: [f64; 3],
    texture: Vec<Grating>,
    pan_amplitude: f64,
    pan_omega: f64,
    pan_phase: (f64, f64),
}

/// One generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub video_id: String,
    pub frame_index: usize,
    pub frame: RgbImage,
    pub mask: BinaryMask,
    /// Stone outlines in image coordinates, as annotated.
    pub annotation: AnnotationDoc,
    /// Camera offset applied to the scene for this frame.
    pub camera: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub frames: Vec<SynthFrame>,
    /// Every entry is in the train split; use `annotations::split_dataset` to hold videos out.
    pub index: DatasetIndex,
}

pub fn video_id(v: usize) -> String {
    format!("vid{v:03}")
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_id(video: usize, frame: Option<usize>) -> u64 {
    ((video as u64) << 32) | frame.map_or(0, |f| f as u64 + 1)
}

fn stone_outline(rng: &mut ChaCha8Rng, radius: f64) -> Vec<(f64, f64)> {
    // radius * (1 + jitter * noise(theta)), noise a normalized sum of low harmonics
    let harmonics: Vec<(f64, f64)> = (2..=4).map(|_| (rng.random::<f64>(), rng.random_range(0.0..TAU))).collect();
    let total: f64 = harmonics.iter().map(|h| h.0).sum::<f64>().max(1e-9);
    let rot = rng.random_range(0.0..TAU);
    (0..STONE_VERTICES)
        .map(|k| {
            let theta = rot + TAU * k as f64 / STONE_VERTICES as f64;
            let noise: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(i, &(a, ph))| a * ((i + 2) as f64 * theta + ph).sin())
                .sum::<f64>()
                / total;
            let r = radius * (1.0 + RADIAL_JITTER * noise);
            (r * theta.cos(), r * theta.sin())
        })
        .collect()
}

fn build_scene(spec: &SceneSpec, video: usize) -> Scene {
    let mut rng = rng_for(spec.seed, stream_id(video, None));
    let half = spec.image_size as f64 / 2.0;
    let fov = spec.fov_radius();
    let n = rng.random_range(spec.stone_count.0..=spec.stone_count.1);
    let texture = (0..4)
        .map(|i| {
            let freq = rng.random_range(0.04..0.25) * (i + 1) as f64 * 64.0 / spec.image_size as f64;
            let dir = rng.random_range(0.0..TAU);
            Grating {
                kx: freq * dir.cos(),
                ky: freq * dir.sin(),
                phase: rng.random_range(0.0..TAU),
                weight: rng.random_range(0.5..1.0),
            }
        })
        .collect();
    let tissue = [
        rng.random_range(150.0..185.0),
        rng.random_range(75.0..100.0),
        rng.random_range(65.0..90.0),
    ];
    let mut stones = Vec::with_capacity(n);
    for _ in 0..n {
        let radius = if spec.stone_radius.0 == spec.stone_radius.1 {
            spec.stone_radius.0
        } else {
            rng.random_range(spec.stone_radius.0..spec.stone_radius.1)
        };
        let outline = stone_outline(&mut rng, radius);
        let extent = outline.iter().map(|p| p.0.hypot(p.1)).fold(0.0, f64::max);
        // keep the whole stone inside the field of view, leaving room to pan
        let room = (fov - extent - 1.0).max(0.0) * 0.8;
        let rho = room * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..TAU);
        let g = rng.random_range(215.0..245.0);
        stones.push(Stone {
            center: (half + rho * phi.cos(), half + rho * phi.sin()),
            outline,
            color: [g + rng.random_range(0.0..10.0), g - rng.random_range(0.0..20.0), g - rng.random_range(30.0..80.0)],
        });
    }
    let slack = stones
        .iter()
        .map(|s| {
            let ext = s.outline.iter().map(|p| p.0.hypot(p.1)).fold(0.0, f64::max);
            fov - 1.0 - ext - (s.center.0 - half).hypot(s.center.1 - half)
        })
        .fold(fov * 0.2, f64::min)
        .max(0.0);
    let pan_amplitude = slack / std::f64::consts::SQRT_2;
    let pan_omega = if pan_amplitude > 0.0 {
        (spec.drift / pan_amplitude).min(0.3) * rng.random_range(0.5..1.0)
    } else {
        0.0
    };
    Scene {
        stones,
        tissue,
        texture,
        pan_amplitude,
        pan_omega,
        pan_phase: (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)),
    }
}

impl Scene {
    fn camera(&self, frame: usize) -> (f64, f64) {
        let t = self.pan_omega * frame as f64;
        (
            self.pan_amplitude * (t + self.pan_phase.0).sin(),
            self.pan_amplitude * (t + self.pan_phase.1).sin(),
        )
    }
}

fn hash_noise(x: usize, y: usize, salt: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ salt;
    h ^= h >> 31;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn render(spec: &SceneSpec, scene: &Scene, video: usize, frame: usize) -> SynthFrame {
    let size = spec.image_size;
    let half = size as f64 / 2.0;
    let fov = spec.fov_radius();
    let cam = scene.camera(frame);
    let salt = stream_id(video, Some(frame)) ^ spec.seed;
    let amp = spec.texture_amplitude * 40.0;
    let wsum: f64 = scene.texture.iter().map(|g| g.weight).sum();

    let polygons: Vec<Polygon> = scene
        .stones
        .iter()
        .map(|s| Polygon {
            label: "stone".into(),
            vertices: s
                .outline
                .iter()
                .map(|&(dx, dy)| (s.center.0 + cam.0 + dx, s.center.1 + cam.1 + dy))
                .collect(),
        })
        .collect();
    let stone_masks: Vec<BinaryMask> = polygons
        .iter()
        .map(|p| {
            rasterize_polygons(&AnnotationDoc {
                image_name: String::new(),
                image_width: size,
                image_height: size,
                polygons: vec![p.clone()],
            })
        })
        .collect();

    let mut data = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - half).hypot(py - half) > fov {
                continue;
            }
            // texture is anchored to the scene, so it pans with the camera
            let (wx, wy) = (px - cam.0, py - cam.1);
            let tex: f64 = scene
                .texture
                .iter()
                .map(|g| g.weight * (g.kx * wx + g.ky * wy + g.phase).sin())
                .sum::<f64>()
                / wsum;
            // vignetting toward the rim
            let vignette = 1.0 - 0.35 * ((px - half).hypot(py - half) / fov).powi(2);
            let grain = hash_noise(x, y, salt) * 10.0;
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = (scene.tissue[c] + amp * tex) * vignette + grain;
            }
            for (s, m) in scene.stones.iter().zip(&stone_masks).rev() {
                if m.get(x, y) {
                    let (cx, cy) = (s.center.0 + cam.0, s.center.1 + cam.1);
                    let d = (px - cx).hypot(py - cy);
                    let r = s.outline.iter().map(|p| p.0.hypot(p.1)).fold(1.0, f64::max);
                    let shade = 1.0 - 0.2 * (d / r).min(1.0).powi(2);
                    for c in 0..3 {
                        rgb[c] = s.color[c] * shade + grain * 1.5 + amp * 0.3 * tex;
                    }
                    break;
                }
            }
            let o = (y * size + x) * 3;
            for c in 0..3 {
                data[o + c] = to_u8(rgb[c]);
            }
        }
    }
    let mut img = RgbImage::new(size, size, data).expect("sized buffer");
    let mask = stone_masks
        .iter()
        .fold(BinaryMask::zeros(size, size), |acc, m| acc.union(m));

    let mut rng = rng_for(spec.seed, stream_id(video, Some(frame)));
    for &ch in &spec.challenges {
        // one draw per enabled challenge keeps the stream aligned whatever the rate
        let hit = rng.random::<f64>() < spec.challenge_rate;
        let mut sub = rng_for(rng.random(), 0);
        if !hit {
            continue;
        }
        match ch {
            Challenge::MotionBlur => motion_blur(&mut img, &mut sub),
            Challenge::Debris => debris(&mut img, &mut sub, fov),
            Challenge::ForeignObject => foreign_object(&mut img, &mut sub, fov),
            Challenge::SalineFlash => saline_flash(&mut img, &mut sub),
        }
    }
    let (frame_name, _) = frame_paths(&video_id(video), frame);
    SynthFrame {
        video_id: video_id(video),
        frame_index: frame,
        frame: img,
        mask,
        annotation: AnnotationDoc {
            image_name: frame_name,
            image_width: size,
            image_height: size,
            polygons,
        },
        camera: cam,
    }
}

/// Box blur along a random direction, 3 to 7 taps long.
fn motion_blur(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let len = rng.random_range(3..=7usize);
    let angle = rng.random_range(0.0..TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (w, h) = (img.width(), img.height());
    let src = img.clone();
    let offsets: Vec<(isize, isize)> = (0..len)
        .map(|k| {
            let t = k as f64 - (len - 1) as f64 / 2.0;
            ((t * dx).round() as isize, (t * dy).round() as isize)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for &(ox, oy) in &offsets {
                let sx = (x as isize + ox).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + oy).clamp(0, h as isize - 1) as usize;
                let p = src.get(sx, sy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
            let n = len as u32;
            img.put(x, y, [0, 1, 2].map(|c| ((acc[c] + n / 2) / n) as u8));
        }
    }
}

fn random_point_in_fov(rng: &mut ChaCha8Rng, size: usize, fov: f64) -> (f64, f64) {
    let half = size as f64 / 2.0;
    let rho = fov * 0.95 * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..TAU);
    (half + rho * phi.cos(), half + rho * phi.sin())
}

/// Small bright fragments that are not labeled as stone.
fn debris(img: &mut RgbImage, rng: &mut ChaCha8Rng, fov: f64) {
    let size = img.width();
    let scale = size as f64 / 64.0;
    let count = rng.random_range(4..=10usize);
    for _ in 0..count {
        let (cx, cy) = random_point_in_fov(rng, size, fov);
        let r = rng.random_range(0.6..1.4) * scale;
        let g = rng.random_range(170.0..230.0);
        let reach = r.ceil() as isize + 1;
        for y in (cy as isize - reach)..=(cy as isize + reach) {
            for x in (cx as isize - reach)..=(cx as isize + reach) {
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    continue;
                }
                let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                if d <= r {
                    img.put(x as usize, y as usize, [to_u8(g), to_u8(g * 0.95), to_u8(g * 0.75)]);
                }
            }
        }
    }
}

/// A straight, thin, pale instrument (laser fiber or basket wire) entering
/// from the rim of the field of view.
fn foreign_object(img: &mut RgbImage, rng: &mut ChaCha8Rng, fov: f64) {
    let size = img.width();
    let half = size as f64 / 2.0;
    let phi = rng.random_range(0.0..TAU);
    let start = (half + fov * phi.cos(), half + fov * phi.sin());
    let reach = fov * rng.random_range(0.6..1.2);
    let dir = phi + std::f64::consts::PI + rng.random_range(-0.5..0.5);
    let end = (start.0 + reach * dir.cos(), start.1 + reach * dir.sin());
    let width = (size as f64 / 64.0).max(1.0) * rng.random_range(0.7..1.3);
    let (vx, vy) = (end.0 - start.0, end.1 - start.1);
    let len2 = vx * vx + vy * vy;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if (px - half).hypot(py - half) > fov {
                continue;
            }
            let t = (((px - start.0) * vx + (py - start.1) * vy) / len2).clamp(0.0, 1.0);
            let d = (px - start.0 - t * vx).hypot(py - start.1 - t * vy);
            if d <= width {
                img.put(x, y, [200, 210, 225]);
            }
        }
    }
}

/// Global brightening and desaturation from a saline flush.
fn saline_flash(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    let gain = rng.random_range(1.15..1.4);
    let lift = rng.random_range(15.0..35.0);
    for p in img.data_mut().iter_mut() {
        if *p > 0 {
            *p = to_u8(*p as f64 * gain + lift);
        }
    }
}

/// Generates `n_videos` videos of `frames_per_video` frames each.
pub fn generate_dataset(spec: &SceneSpec, n_videos: usize, frames_per_video: usize) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let scenes: Vec<Scene> = par::map_indexed(n_videos, |v| build_scene(spec, v));
    let frames = par::map_indexed(n_videos * frames_per_video, |k| {
        let (v, f) = (k / frames_per_video.max(1), k % frames_per_video.max(1));
        render(spec, &scenes[v], v, f)
    });
    let entries = frames
        .iter()
        .map(|f| {
            let (frame_path, mask_path) = frame_paths(&f.video_id, f.frame_index);
            IndexEntry {
                video_id: f.video_id.clone(),
                frame_path,
                mask_path,
                split: Split::Train,
            }
        })
        .collect();
    Ok(SynthDataset {
        frames,
        index: DatasetIndex {
            entries,
            seed: spec.seed,
        },
    })
}

impl SynthDataset {
    /// `(video_id, frame count)` per video, in order.
    pub fn videos(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for f in &self.frames {
            match out.last_mut() {
                Some((id, n)) if *id == f.video_id => *n += 1,
                _ => out.push((f.video_id.clone(), 1)),
            }
        }
        out
    }

    /// Writes frames and masks as PNG under `dir`, plus `index.json` and
    /// `annotations.json`. Each video directory also gets its own
    /// `index.json` listing frame timestamps at 20 fps.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        for f in &self.frames {
            let (fp, mp) = frame_paths(&f.video_id, f.frame_index);
            let fp = dir.join(fp);
            if let Some(parent) = fp.parent() {
                std::fs::create_dir_all(parent)?;
            }
            io::write_rgb(&fp, &f.frame)?;
            io::write_mask(&dir.join(mp), &f.mask)?;
        }
        std::fs::create_dir_all(dir)?;
        // each video directory doubles as a 20 fps frame-directory source
        for (vid, n) in self.videos() {
            let ts: Vec<u64> = (0..n as u64).map(|i| i * 50).collect();
            let doc = serde_json::json!({ "fps_nominal": 20.0, "timestamps_ms": ts });
            std::fs::write(dir.join(vid).join("index.json"), serde_json::to_string_pretty(&doc)?)?;
        }
        self.index.save(&dir.join("index.json")).map_err(|e| match e {
            crate::annotations::AnnotationError::Io(e) => SynthError::Io(e),
            other => SynthError::Spec(other.to_string()),
        })?;
        let docs: Vec<AnnotationDoc> = self.frames.iter().map(|f| f.annotation.clone()).collect();
        std::fs::write(dir.join("annotations.json"), crate::annotations::annotations_to_json(&docs))?;
        Ok(())
    }
}
