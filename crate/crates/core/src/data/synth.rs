use std::f32::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, resize_crop, AugmentConfig, CropBox};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SHAPES: [ShapeKind; 4] = [
    ShapeKind::Square,
    ShapeKind::Circle,
    ShapeKind::Triangle,
    ShapeKind::Cross,
];
pub const MOTIONS: [Motion; 4] = [
    Motion::LeftRight,
    Motion::UpDown,
    Motion::Diagonal,
    Motion::Circular,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl ShapeKind {
    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= 0.5 * (dy + r),
            ShapeKind::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    LeftRight,
    UpDown,
    Diagonal,
    Circular,
}

impl Motion {
    fn offset(self, amplitude: f32, angle: f32) -> (f32, f32) {
        let s = amplitude * angle.sin();
        match self {
            Motion::LeftRight => (s, 0.0),
            Motion::UpDown => (0.0, s),
            Motion::Diagonal => (s * std::f32::consts::FRAC_1_SQRT_2, s * std::f32::consts::FRAC_1_SQRT_2),
            Motion::Circular => (amplitude * angle.cos(), s),
        }
    }
}

/// Corpus layout: `n_classes = n_shapes · n_motions`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub n_videos: usize,
    pub n_shapes: usize,
    pub n_motions: usize,
    pub frames: usize,
    pub size: usize,
}

impl DatasetSpec {
    /// Factors `k` into shapes × motions, preferring more motions.
    pub fn new(n_videos: usize, k: usize) -> Result<Self> {
        if k == 0 || n_videos == 0 {
            return Err(Error::config("n_videos and n_classes must be positive"));
        }
        let (n_shapes, n_motions) = (1..=MOTIONS.len())
            .rev()
            .filter(|&m| k.is_multiple_of(m) && k / m <= SHAPES.len())
            .map(|m| (k / m, m))
            .next()
            .ok_or_else(|| {
                Error::config(format!(
                    "{k} classes cannot be split into at most {} shapes × {} motions",
                    SHAPES.len(),
                    MOTIONS.len()
                ))
            })?;
        if !n_videos.is_multiple_of(k) {
            return Err(Error::config(format!(
                "n_videos {n_videos} is not divisible by n_classes {k}"
            )));
        }
        Ok(Self {
            n_videos,
            n_shapes,
            n_motions,
            frames: 16,
            size: 24,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_shapes * self.n_motions
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    /// `1×T×H×W`, values in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub class_id: u32,
    pub video_id: u64,
    pub shape: ShapeKind,
    pub motion: Motion,
    /// Angular speed in radians per frame.
    pub speed: f32,
    pub phase: f32,
    pub center: (f32, f32),
}

fn video_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

const BACKGROUND: f32 = 0.05;
const FOREGROUND: f32 = 0.9;

/// Renders video `index`; classes cycle so any multiple of `K` is balanced.
pub fn generate_video(seed: u64, index: usize, spec: &DatasetSpec) -> SyntheticVideo {
    let k = spec.n_classes();
    let class_id = index % k;
    let (shape_idx, motion_idx) = (class_id / spec.n_motions, class_id % spec.n_motions);
    let (shape, motion) = (SHAPES[shape_idx], MOTIONS[motion_idx]);

    let mut rng = video_rng(seed, index);
    let size = spec.size as f32;
    let radius = rng.random_range(3.0f32..4.5);
    let amplitude = rng.random_range(4.0f32..6.5);
    let speed = rng.random_range(0.8f32..1.4);
    let phase = rng.random_range(0.0f32..2.0 * PI);
    let center = (
        size / 2.0 + rng.random_range(-1.5f32..1.5),
        size / 2.0 + rng.random_range(-1.5f32..1.5),
    );

    let (t_total, s) = (spec.frames, spec.size);
    let mut data = vec![0.0f32; t_total * s * s];
    // Fixed contrast: random per-video intensity is an instance cue that swamps class structure.
    let (background, foreground) = (BACKGROUND, FOREGROUND);
    const SUB: [f32; 2] = [0.25, 0.75];
    for t in 0..t_total {
        let (ox, oy) = motion.offset(amplitude, phase + speed * t as f32);
        let (cx, cy) = (center.0 + ox, center.1 + oy);
        for y in 0..s {
            for x in 0..s {
                let mut hits = 0;
                for sy in SUB {
                    for sx in SUB {
                        let dx = x as f32 + sx - cx;
                        let dy = y as f32 + sy - cy;
                        if shape.contains(dx, dy, radius) {
                            hits += 1;
                        }
                    }
                }
                let cover = hits as f32 / 4.0;
                data[(t * s + y) * s + x] = background + (foreground - background) * cover;
            }
        }
    }
    SyntheticVideo {
        frames: Tensor::new(&[1, t_total, s, s], data).expect("consistent dims"),
        class_id: class_id as u32,
        video_id: index as u64,
        shape,
        motion,
        speed,
        phase,
        center,
    }
}

pub fn generate_dataset(seed: u64, n_videos: usize, k: usize) -> Result<Vec<SyntheticVideo>> {
    let spec = DatasetSpec::new(n_videos, k)?;
    Ok((0..n_videos).map(|i| generate_video(seed, i, &spec)).collect())
}

/// Pixel statistics of the synthetic corpus used to center model inputs.
pub const INPUT_MEAN: f32 = 0.10;
pub const INPUT_STD: f32 = 0.20;

/// Temporal sampling and augmentation settings for training clips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    pub clip_len: usize,
    pub temporal_stride: usize,
    pub out_size: usize,
    pub augment: AugmentConfig,
    /// Applied last as `(x - mean) / std`, after augmentation.
    pub input_mean: f32,
    pub input_std: f32,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            clip_len: 4,
            temporal_stride: 1,
            out_size: 16,
            augment: AugmentConfig::default(),
            input_mean: INPUT_MEAN,
            input_std: INPUT_STD,
        }
    }
}

impl ClipConfig {
    /// Number of source frames a clip spans.
    pub fn span(&self) -> usize {
        (self.clip_len - 1) * self.temporal_stride + 1
    }

    fn normalize<T: Scalar>(&self, clip: Tensor<f32>) -> Tensor<T> {
        let (m, inv) = (self.input_mean, 1.0 / self.input_std);
        clip.map(|x| (x - m) * inv).cast()
    }
}

/// Two independently sampled and augmented views of one video.
///
/// Carries the video id but never the class label.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPair<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub video_id: u64,
}

fn temporal_window(frames: &Tensor<f32>, start: usize, cfg: &ClipConfig) -> Tensor<f32> {
    let [_, _, h, w] = [
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    ];
    let plane = h * w;
    let mut data = Vec::with_capacity(cfg.clip_len * plane);
    for i in 0..cfg.clip_len {
        let t = start + i * cfg.temporal_stride;
        data.extend_from_slice(&frames.data()[t * plane..(t + 1) * plane]);
    }
    Tensor::new(&[1, cfg.clip_len, h, w], data).expect("consistent dims")
}

/// Draws a start offset uniformly from every valid window position.
pub fn sample_start<R: Rng + ?Sized>(t_total: usize, cfg: &ClipConfig, rng: &mut R) -> usize {
    rng.random_range(0..=t_total - cfg.span())
}

pub fn sample_clip_pair<T: Scalar, R: Rng + ?Sized>(
    video: &SyntheticVideo,
    cfg: &ClipConfig,
    rng: &mut R,
) -> Result<ClipPair<T>> {
    let t_total = video.frames.shape()[1];
    if t_total < cfg.span() {
        return Err(Error::config(format!(
            "clip spans {} frames but video has {t_total}",
            cfg.span()
        )));
    }
    let s1 = sample_start(t_total, cfg, rng);
    let s2 = sample_start(t_total, cfg, rng);
    let x1 = augment(&temporal_window(&video.frames, s1, cfg), cfg.out_size, &cfg.augment, rng);
    let x2 = augment(&temporal_window(&video.frames, s2, cfg), cfg.out_size, &cfg.augment, rng);
    Ok(ClipPair {
        x1: cfg.normalize(x1),
        x2: cfg.normalize(x2),
        video_id: video.video_id,
    })
}

/// Deterministic evaluation view: centered temporal window, full frame
/// resized to the model input.
pub fn center_view<T: Scalar>(video: &SyntheticVideo, cfg: &ClipConfig) -> Result<Tensor<T>> {
    let t_total = video.frames.shape()[1];
    if t_total < cfg.span() {
        return Err(Error::config("clip longer than video"));
    }
    let start = (t_total - cfg.span()) / 2;
    let window = temporal_window(&video.frames, start, cfg);
    let full = CropBox::full(video.frames.shape()[2], video.frames.shape()[3]);
    Ok(cfg.normalize(resize_crop(&window, &full, cfg.out_size)))
}
