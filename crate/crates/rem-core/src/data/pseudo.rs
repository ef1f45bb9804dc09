use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{MaskSequence, ReferralSample, VideoClip};

/// Bounds for the per-frame affine jitter used to expand images into pseudo
/// videos. Jitter accumulates across frames to simulate coherent motion.
#[derive(Debug, Clone)]
pub struct AugParams {
    /// Max per-frame translation as a fraction of width/height.
    pub max_translate_frac: f32,
    /// Per-frame scale jitter range, multiplicative.
    pub scale_range: (f32, f32),
    /// Max per-frame rotation in degrees.
    pub max_rotate_deg: f32,
}

impl Default for AugParams {
    fn default() -> Self {
        Self {
            max_translate_frac: 0.05,
            scale_range: (0.95, 1.05),
            max_rotate_deg: 5.0,
        }
    }
}

impl AugParams {
    /// No-op augmentation: every generated frame is a copy of the input.
    pub fn identity() -> Self {
        Self {
            max_translate_frac: 0.0,
            scale_range: (1.0, 1.0),
            max_rotate_deg: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.scale_range.0 <= 0.0 || self.scale_range.1 < self.scale_range.0 {
            return Err(Error::Param(format!(
                "degenerate scale range {:?}",
                self.scale_range
            )));
        }
        if self.max_translate_frac < 0.0 || self.max_rotate_deg < 0.0 {
            return Err(Error::Param(
                "augmentation magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    tx: f32,
    ty: f32,
    scale: f32,
    theta: f32,
}

impl Affine {
    const IDENTITY: Affine = Affine {
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
        theta: 0.0,
    };

    fn is_identity(&self) -> bool {
        self.tx == 0.0 && self.ty == 0.0 && self.scale == 1.0 && self.theta == 0.0
    }

    /// Maps an output pixel back to its source location (inverse transform;
    /// the forward transform rotates/scales about the image center then
    /// translates).
    fn source_of(&self, x: f32, y: f32, cx: f32, cy: f32) -> (f32, f32) {
        let (dx, dy) = (x - cx - self.tx, y - cy - self.ty);
        let (sin, cos) = (-self.theta).sin_cos();
        let inv_s = 1.0 / self.scale;
        (
            cx + inv_s * (cos * dx - sin * dy),
            cy + inv_s * (sin * dx + cos * dy),
        )
    }
}

fn warp_frame(frame: &Array3<f32>, t: &Affine) -> Array3<f32> {
    if t.is_identity() {
        return frame.clone();
    }
    let (c, h, w) = frame.dim();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source_of(x as f32, y as f32, cx, cy);
            if sx < -0.0 || sy < -0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                continue; // zero padding outside the source
            }
            let x0 = sx.floor().clamp(0.0, (w - 1) as f32) as usize;
            let y0 = sy.floor().clamp(0.0, (h - 1) as f32) as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            for ch in 0..c {
                let v00 = frame[[ch, y0, x0]];
                let v01 = frame[[ch, y0, x1]];
                let v10 = frame[[ch, y1, x0]];
                let v11 = frame[[ch, y1, x1]];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[[ch, y, x]] = top + (bot - top) * fy;
            }
        }
    }
    out
}

fn warp_mask(mask: &Array2<u8>, t: &Affine) -> Array2<u8> {
    if t.is_identity() {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.source_of(x as f32, y as f32, cx, cy);
            let (rx, ry) = (sx.round(), sy.round());
            if rx < 0.0 || ry < 0.0 || rx > (w - 1) as f32 || ry > (h - 1) as f32 {
                continue;
            }
            out[[y, x]] = mask[[ry as usize, rx as usize]];
        }
    }
    out
}

/// Expands a single image/mask pair into a `num_frames` pseudo video by
/// applying the same cumulative affine jitter to image and mask. Frame 0 is
/// the unaugmented input. Deterministic given `seed`.
pub fn image_to_pseudo_video(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    expressions: Vec<String>,
    concept: Option<String>,
    num_frames: usize,
    aug: &AugParams,
    seed: u64,
) -> Result<ReferralSample> {
    aug.validate()?;
    if num_frames == 0 {
        return Err(Error::Param("num_frames must be >= 1".into()));
    }
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} dims differ",
            (h, w),
            mask.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(num_frames);
    let mut masks = Vec::with_capacity(num_frames);
    let mut t = Affine::IDENTITY;
    for k in 0..num_frames {
        if k > 0 {
            let mt = aug.max_translate_frac;
            t.tx += rng.random_range(-mt..=mt) * w as f32;
            t.ty += rng.random_range(-mt..=mt) * h as f32;
            t.scale *= rng.random_range(aug.scale_range.0..=aug.scale_range.1);
            t.theta += rng
                .random_range(-aug.max_rotate_deg..=aug.max_rotate_deg)
                .to_radians();
        }
        frames.push(warp_frame(image, &t).mapv(|v| v.clamp(0.0, 1.0)));
        masks.push(warp_mask(mask, &t));
    }
    let clip = VideoClip::new(frames, 24.0, "pseudo")?;
    let gt = MaskSequence::new(masks)?;
    ReferralSample::new(clip, expressions, gt, concept)
}

/// Picks a contiguous `window`-frame training window uniformly at random.
/// Clips shorter than the window are filled cyclically from frame 0.
pub fn sample_training_window(
    sample: &ReferralSample,
    window: usize,
    seed: u64,
) -> Result<ReferralSample> {
    if window == 0 {
        return Err(Error::Param("window must be >= 1".into()));
    }
    let len = sample.clip.len();
    let indices: Vec<usize> = if len >= window {
        let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=len - window);
        (start..start + window).collect()
    } else {
        (0..window).map(|i| i % len).collect()
    };
    let frames = indices
        .iter()
        .map(|&i| sample.clip.frames[i].clone())
        .collect();
    let masks = indices.iter().map(|&i| sample.gt.masks[i].clone()).collect();
    let clip = VideoClip::new(frames, sample.clip.fps, sample.clip.clip_id.clone())?;
    let gt = MaskSequence::new(masks)?;
    ReferralSample::new(clip, sample.expressions.clone(), gt, sample.concept.clone())
}

/// Bilinear resize with half-pixel-center sampling. Identity when the size
/// is unchanged.
pub fn resize_frame_bilinear(frame: &Array3<f32>, size: (usize, usize)) -> Array3<f32> {
    let (c, h, w) = frame.dim();
    let (nh, nw) = size;
    if (nh, nw) == (h, w) {
        return frame.clone();
    }
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    let mut out = Array3::zeros((c, nh, nw));
    for y in 0..nh {
        for x in 0..nw {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let y0 = fy.floor() as usize;
            let x0 = fx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
            for ch in 0..c {
                let top = frame[[ch, y0, x0]] * (1.0 - dx) + frame[[ch, y0, x1]] * dx;
                let bot = frame[[ch, y1, x0]] * (1.0 - dx) + frame[[ch, y1, x1]] * dx;
                out[[ch, y, x]] = top * (1.0 - dy) + bot * dy;
            }
        }
    }
    out
}

/// Nearest-neighbor resize; keeps masks strictly binary.
pub fn resize_mask_nearest(mask: &Array2<u8>, size: (usize, usize)) -> Array2<u8> {
    let (h, w) = mask.dim();
    let (nh, nw) = size;
    if (nh, nw) == (h, w) {
        return mask.clone();
    }
    let sy = h as f32 / nh as f32;
    let sx = w as f32 / nw as f32;
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        let fy = (((y as f32 + 0.5) * sy).floor() as usize).min(h - 1);
        let fx = (((x as f32 + 0.5) * sx).floor() as usize).min(w - 1);
        mask[[fy, fx]]
    })
}

/// Resizes frames (bilinear) and masks (nearest-neighbor) to `size`, which
/// must be divisible by the autoencoder downsample factor.
pub fn resize_sample(
    sample: &ReferralSample,
    size: (usize, usize),
    downsample_factor: usize,
) -> Result<ReferralSample> {
    let (h, w) = size;
    if downsample_factor == 0 || h % downsample_factor != 0 || w % downsample_factor != 0 {
        return Err(Error::Param(format!(
            "target size {size:?} not divisible by downsample factor {downsample_factor}"
        )));
    }
    let frames = sample
        .clip
        .frames
        .iter()
        .map(|f| resize_frame_bilinear(f, size))
        .collect();
    let masks = sample
        .gt
        .masks
        .iter()
        .map(|m| resize_mask_nearest(m, size))
        .collect();
    let clip = VideoClip::new(frames, sample.clip.fps, sample.clip.clip_id.clone())?;
    let gt = MaskSequence::new(masks)?;
    ReferralSample::new(clip, sample.expressions.clone(), gt, sample.concept.clone())
}
