//! The mask <-> latent codec: broadcast a binary mask to three channels,
//! push it through the frozen autoencoder, and binarize decoded latents.

use candle_core::DType;
use ndarray::{Array2, Array3};

use crate::data::{MaskSequence, VideoClip};
use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::vae::{encode_video, Autoencoder};

/// Broadcasts each single-channel binary mask into three identical channels:
/// foreground 1.0, background 0.0.
pub fn mask_to_rgb(masks: &MaskSequence) -> Result<VideoClip> {
    if masks.is_empty() {
        return Err(Error::Param("empty mask sequence".into()));
    }
    let frames = masks
        .masks
        .iter()
        .map(|m| {
            let (h, w) = m.dim();
            Array3::from_shape_fn((3, h, w), |(_, y, x)| m[[y, x]] as f32)
        })
        .collect();
    VideoClip::new(frames, 24.0, "mask")
}

/// Encodes a mask sequence into the latent space: `E(broadcast(m))`, the
/// same path video frames take.
pub fn encode_mask(ae: &Autoencoder, masks: &MaskSequence) -> Result<LatentTensor> {
    encode_video(ae, &mask_to_rgb(masks)?)
}

/// Decodes predicted latents to binary masks: decode, map back to `[0, 1]`,
/// average the three channels per pixel, binarize at `threshold`.
pub fn latents_to_mask(
    ae: &Autoencoder,
    pred: &LatentTensor,
    threshold: f64,
) -> Result<MaskSequence> {
    pred.check_finite()?;
    let probs = latents_to_probs(ae, pred)?;
    threshold_probs(&probs, threshold)
}

/// The pre-threshold path of [`latents_to_mask`]: per-frame foreground
/// probability maps in `[0, 1]`. Exposed so long-clip chunking can average
/// across windows before binarizing.
pub fn latents_to_probs(ae: &Autoencoder, pred: &LatentTensor) -> Result<Vec<Array2<f32>>> {
    pred.check_finite()?;
    let decoded = ae.decode_t(pred.tensor())?; // (F, 3, H, W) in about [-1, 1]
    let decoded01 = decoded.affine(0.5, 0.5)?.clamp(0.0, 1.0)?;
    let mean = decoded01.mean(1)?; // channel average: (F, H, W)
    let (f, h, w) = mean.dims3()?;
    let flat: Vec<f32> = mean.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let mut out = Vec::with_capacity(f);
    for k in 0..f {
        out.push(Array2::from_shape_fn((h, w), |(y, x)| {
            flat[k * h * w + y * w + x]
        }));
    }
    Ok(out)
}

pub fn threshold_probs(probs: &[Array2<f32>], threshold: f64) -> Result<MaskSequence> {
    let masks = probs
        .iter()
        .map(|p| p.mapv(|v| u8::from(v as f64 >= threshold)))
        .collect();
    MaskSequence::new(masks)
}
