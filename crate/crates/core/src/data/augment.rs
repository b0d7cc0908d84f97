// Clip-consistent spatial and photometric augmentation. Every parameter is
// drawn once per clip and applied identically to all frames.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source frame.
    pub crop_scale: (f32, f32),
    pub crop_ratio: (f32, f32),
    pub flip_p: f32,
    pub jitter_strength: f32,
    pub jitter_p: f32,
    pub blur_sigma: (f32, f32),
    pub blur_p: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.2,
            jitter_strength: 0.4,
            jitter_p: 0.8,
            blur_sigma: (0.1, 1.0),
            blur_p: 0.5,
        }
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub top: f32,
    pub left: f32,
    pub height: f32,
    pub width: f32,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            top: 0.0,
            left: 0.0,
            height: h as f32,
            width: w as f32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub crop: CropBox,
    pub flip: bool,
    /// `(brightness, contrast)` multipliers.
    pub jitter: Option<(f32, f32)>,
    pub blur_sigma: Option<f32>,
}

impl AugmentParams {
    /// Identity photometrics with a full-frame crop.
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            crop: CropBox::full(h, w),
            flip: false,
            jitter: None,
            blur_sigma: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> Self {
        let crop = sample_crop(h, w, cfg, rng);
        let flip = rng.random::<f32>() < cfg.flip_p;
        let jitter = if rng.random::<f32>() < cfg.jitter_p {
            let s = cfg.jitter_strength;
            let b = rng.random_range(1.0 - s..=1.0 + s);
            let c = rng.random_range(1.0 - s..=1.0 + s);
            Some((b, c))
        } else {
            None
        };
        let blur_sigma = if rng.random::<f32>() < cfg.blur_p {
            Some(rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1))
        } else {
            None
        };
        Self {
            crop,
            flip,
            jitter,
            blur_sigma,
        }
    }

    /// Applies crop-resize, flip, jitter, (grayscale no-op), blur, clamp.
    pub fn apply(&self, clip: &Tensor<f32>, out: usize) -> Tensor<f32> {
        let mut x = resize_crop(clip, &self.crop, out);
        if self.flip {
            x = hflip(&x);
        }
        if let Some((b, c)) = self.jitter {
            jitter(&mut x, b, c);
        }
        // Grayscale conversion is a no-op on single-channel clips.
        if let Some(sigma) = self.blur_sigma {
            x = gaussian_blur(&x, sigma);
        }
        for v in x.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        x
    }
}

fn sample_crop<R: Rng + ?Sized>(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> CropBox {
    let area = (h * w) as f32;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w as f32 && ch <= h as f32 {
            let top = rng.random_range(0.0..=h as f32 - ch);
            let left = rng.random_range(0.0..=w as f32 - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    CropBox::full(h, w)
}

/// Bilinear resample of `crop` to `out×out`, per frame, edge-clamped.
pub fn resize_crop(clip: &Tensor<f32>, crop: &CropBox, out: usize) -> Tensor<f32> {
    let (c, t, h, w) = (clip.shape()[0], clip.shape()[1], clip.shape()[2], clip.shape()[3]);
    let sy = crop.height / out as f32;
    let sx = crop.width / out as f32;
    let src = clip.data();
    let mut data = Vec::with_capacity(c * t * out * out);
    for plane in src.chunks(h * w) {
        for i in 0..out {
            let y = (crop.top + (i as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = y - y0 as f32;
            for j in 0..out {
                let x = (crop.left + (j as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = x - x0 as f32;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, t, out, out], data).expect("consistent dims")
}

pub fn hflip(clip: &Tensor<f32>) -> Tensor<f32> {
    let w = clip.shape()[3];
    let data = clip
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(clip.shape(), data).expect("same shape")
}

fn jitter(x: &mut Tensor<f32>, brightness: f32, contrast: f32) {
    for v in x.data_mut() {
        *v *= brightness;
    }
    let mean = x.data().iter().sum::<f32>() / x.numel() as f32;
    for v in x.data_mut() {
        *v = (*v - mean) * contrast + mean;
    }
}

fn gaussian_blur(x: &Tensor<f32>, sigma: f32) -> Tensor<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / norm).collect();
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut out = x.clone();
    let mut tmp = vec![0.0f32; h * w];
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in weights.iter().enumerate() {
                    let cc = (c as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[r * w + cc];
                }
                tmp[r * w + c] = acc;
            }
        }
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &wt) in weights.iter().enumerate() {
                    let rr = (r as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[rr * w + c];
                }
                dst[r * w + c] = acc;
            }
        }
    }
    out
}

/// Samples clip-level parameters and applies them.
pub fn augment<R: Rng + ?Sized>(
    clip: &Tensor<f32>,
    out: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Tensor<f32> {
    let params = AugmentParams::sample(clip.shape()[2], clip.shape()[3], cfg, rng);
    params.apply(clip, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..4 * 24 * 24).map(|_| rng.random::<f32>()).collect();
        Tensor::new(&[1, 4, 24, 24], data).unwrap()
    }

    #[test]
    fn all_skip_path_is_plain_resample() {
        let clip = random_clip(0);
        let never = AugmentConfig {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            blur_p: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(&clip, 16, &never, &mut ChaCha8Rng::seed_from_u64(1));
        let plain = resize_crop(&clip, &CropBox::full(24, 24), 16);
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_resample_same_size() {
        let clip = random_clip(2);
        let out = AugmentParams::identity(24, 24).apply(&clip, 24);
        for (a, b) in out.data().iter().zip(clip.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn double_flip_is_crop_only() {
        let clip = random_clip(3);
        let crop = CropBox {
            top: 2.5,
            left: 1.0,
            height: 19.0,
            width: 20.0,
        };
        let cropped = resize_crop(&clip, &crop, 16);
        let twice = hflip(&hflip(&cropped));
        for (a, b) in twice.data().iter().zip(cropped.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let clip = random_clip(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let harsh = AugmentConfig {
            jitter_strength: 0.9,
            jitter_p: 1.0,
            ..AugmentConfig::default()
        };
        for _ in 0..50 {
            let out = augment(&clip, 16, &harsh, &mut rng);
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn params_are_shared_across_frames() {
        // A clip whose frames are identical stays frame-identical after augmentation.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frame: Vec<f32> = (0..24 * 24).map(|_| rng.random::<f32>()).collect();
        let clip = Tensor::new(&[1, 4, 24, 24], frame.repeat(4)).unwrap();
        let out = augment(&clip, 16, &AugmentConfig::default(), &mut rng);
        let planes: Vec<&[f32]> = out.data().chunks(256).collect();
        for p in &planes[1..] {
            assert_eq!(*p, planes[0]);
        }
    }
}
