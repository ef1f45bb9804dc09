//! Inference: expression-conditioned video segmentation with sliding
//! windows over long clips, plus overlay rendering.

use std::path::Path;

use ndarray::Array2;

use crate::codec::{latents_to_probs, threshold_probs};
use crate::data::{resize_frame_bilinear, resize_mask_nearest, MaskSequence, VideoClip};
use crate::error::{Error, Result};
use crate::text::TextEncoder;
use crate::unet::{CnnHead, DenoiserNet};
use crate::vae::{encode_video, Autoencoder};

/// How predicted latents / features become pixel-space masks: the frozen
/// autoencoder decoder (the default path) or the jointly-trained CNN head
/// (the ablation path).
pub enum MaskDecoder {
    Vae,
    Cnn(CnnHead),
}

impl MaskDecoder {
    pub fn name(&self) -> &'static str {
        match self {
            MaskDecoder::Vae => "vae",
            MaskDecoder::Cnn(_) => "cnn",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferParams {
    pub window: usize,
    pub overlap: usize,
    pub threshold: f64,
}

impl Default for InferParams {
    fn default() -> Self {
        Self {
            window: 8,
            overlap: 4,
            threshold: 0.5,
        }
    }
}

impl InferParams {
    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Param("window must be >= 1".into()));
        }
        if self.overlap >= self.window {
            return Err(Error::Param(format!(
                "overlap {} must be smaller than window {}",
                self.overlap, self.window
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Param(format!(
                "threshold {} not in [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Start offsets of sliding windows covering `0..len`; the final window is
/// shifted left so every frame is covered without reading past the end.
pub(crate) fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        if s + window >= len {
            starts.push(len - window);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts
}

/// Per-frame foreground probabilities for one window of frames.
fn window_probs(
    net: &DenoiserNet,
    ae: &Autoencoder,
    embedding: &crate::text::TextEmbedding,
    decoder: &MaskDecoder,
    clip: &VideoClip,
) -> Result<Vec<Array2<f32>>> {
    let z = encode_video(ae, clip)?;
    match decoder {
        MaskDecoder::Vae => {
            let pred = net.denoise(&z, embedding, 0)?;
            latents_to_probs(ae, &pred)
        }
        MaskDecoder::Cnn(head) => {
            let (_, features) = net.forward_features(&z, embedding, 0)?;
            let logits = head.forward(&features)?;
            let probs = candle_nn::ops::sigmoid(&logits)?;
            let (f, _, h, w) = probs.dims4()?;
            let flat: Vec<f32> = probs
                .to_dtype(candle_core::DType::F32)?
                .flatten_all()?
                .to_vec1()?;
            Ok((0..f)
                .map(|k| Array2::from_shape_fn((h, w), |(y, x)| flat[k * h * w + y * w + x]))
                .collect())
        }
    }
}

fn round_to_multiple(v: usize, f: usize) -> usize {
    (((v as f64 / f as f64).round() as usize).max(1)) * f
}

/// Segments a clip with one expression: encode, predict mask latents at the
/// clean timestep, decode, binarize. Clips longer than the window are
/// chunked with overlap; overlapping per-pixel probabilities are averaged
/// before the single thresholding pass.
pub fn segment_video(
    net: &DenoiserNet,
    ae: &Autoencoder,
    text: &TextEncoder,
    decoder: &MaskDecoder,
    clip: &VideoClip,
    expression: &str,
    params: &InferParams,
) -> Result<MaskSequence> {
    params.validate()?;
    if clip.is_empty() {
        return Err(Error::Param("cannot segment an empty clip".into()));
    }
    let embedding = text.encode(expression)?;

    // work at the nearest resolution both the autoencoder (downsample
    // factor) and the U-Net (one halving per extra level) can ingest
    let f = ae.config.downsample_factor << (net.config.channel_mults.len() - 1);
    let (h, w) = (clip.height(), clip.width());
    let (wh, ww) = (round_to_multiple(h, f), round_to_multiple(w, f));
    let work: VideoClip = if (wh, ww) == (h, w) {
        clip.clone()
    } else {
        VideoClip::new(
            clip.frames
                .iter()
                .map(|fr| resize_frame_bilinear(fr, (wh, ww)))
                .collect(),
            clip.fps,
            clip.clip_id.clone(),
        )?
    };

    let len = work.len();
    if len > params.window {
        // handled by chunking; longer-than-trained windows per chunk are fine
    } else if len < params.window {
        eprintln!(
            "warning: clip '{}' has {len} frames, shorter than window {}; running one short window",
            clip.clip_id, params.window
        );
    }
    let stride = params.window - params.overlap;
    let starts = window_starts(len, params.window, stride);

    let mut sums = vec![Array2::<f32>::zeros((wh, ww)); len];
    let mut counts = vec![0u32; len];
    for &s in &starts {
        let end = (s + params.window).min(len);
        let chunk = VideoClip::new(
            work.frames[s..end].to_vec(),
            work.fps,
            format!("{}#{s}", work.clip_id),
        )?;
        let probs = window_probs(net, ae, &embedding, decoder, &chunk)?;
        for (i, p) in probs.iter().enumerate() {
            sums[s + i] = &sums[s + i] + p;
            counts[s + i] += 1;
        }
    }
    let probs: Vec<Array2<f32>> = sums
        .into_iter()
        .zip(counts.iter())
        .map(|(sum, &c)| sum / c.max(1) as f32)
        .collect();
    let masks = threshold_probs(&probs, params.threshold)?;

    if (wh, ww) == (h, w) {
        Ok(masks)
    } else {
        MaskSequence::new(
            masks
                .masks
                .iter()
                .map(|m| resize_mask_nearest(m, (h, w)))
                .collect(),
        )
    }
}

/// Writes per-frame PNGs blending the predicted mask into the frame:
/// foreground pixels become `0.5 * frame + 0.5 * color`.
pub fn render_overlay(
    clip: &VideoClip,
    masks: &MaskSequence,
    color: (u8, u8, u8),
    out_dir: &Path,
) -> Result<()> {
    if clip.len() != masks.len() {
        return Err(Error::Shape(format!(
            "overlay: {} frames vs {} masks",
            clip.len(),
            masks.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (h, w) = (clip.height(), clip.width());
    if (masks.height(), masks.width()) != (h, w) {
        return Err(Error::Shape("overlay: mask/frame size mismatch".into()));
    }
    let color = [color.0 as f32, color.1 as f32, color.2 as f32];
    for (i, (frame, mask)) in clip.frames.iter().zip(masks.masks.iter()).enumerate() {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = frame[[c, y, x]] * 255.0;
                    let v = if mask[[y, x]] != 0 {
                        0.5 * v + 0.5 * color[c]
                    } else {
                        v
                    };
                    px[c] = v.round().clamp(0.0, 255.0) as u8;
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = out_dir.join(format!("{i:04}.png"));
        img.save(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
    }
    Ok(())
}
