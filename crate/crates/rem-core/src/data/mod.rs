//! Domain types and dataset handling: manifest ingestion, pseudo-video
//! synthesis from image samples, training-window sampling and the synthetic
//! moving-shapes generator.

mod manifest;
mod pseudo;
mod synth;

pub use manifest::{load_frame, load_manifest, load_mask, load_sample, DatasetManifest, Modality, SampleRecord};
pub use pseudo::{
    image_to_pseudo_video, resize_frame_bilinear, resize_mask_nearest, resize_sample,
    sample_training_window, AugParams,
};
pub use synth::{synth_dataset, Motion, ShapeKind, SynthObject, SynthSpec};

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// A sequence of RGB frames. Each frame is `(3, H, W)` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Vec<Array3<f32>>,
    pub fps: f32,
    pub clip_id: String,
}

impl VideoClip {
    pub fn new(frames: Vec<Array3<f32>>, fps: f32, clip_id: impl Into<String>) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames.is_empty() {
            return Err(Error::Param(format!("clip '{clip_id}' has no frames")));
        }
        let dim = frames[0].dim();
        if dim.0 != 3 {
            return Err(Error::Shape(format!(
                "clip '{clip_id}': frames must have 3 channels, got {}",
                dim.0
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::Shape(format!(
                    "clip '{clip_id}': frame {i} has dims {:?}, expected {:?}",
                    f.dim(),
                    dim
                )));
            }
            if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Domain(format!(
                    "clip '{clip_id}': frame {i} has pixel values outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            frames,
            fps,
            clip_id,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].dim().1
    }

    pub fn width(&self) -> usize {
        self.frames[0].dim().2
    }
}

/// Per-frame binary masks `(H, W)` with values in `{0, 1}`, aligned 1:1 with a clip.
#[derive(Debug, Clone)]
pub struct MaskSequence {
    pub masks: Vec<Array2<u8>>,
}

impl MaskSequence {
    pub fn new(masks: Vec<Array2<u8>>) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            if m.iter().any(|&v| v > 1) {
                return Err(Error::Domain(format!("mask {i} is not binary")));
            }
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn height(&self) -> usize {
        self.masks[0].dim().0
    }

    pub fn width(&self) -> usize {
        self.masks[0].dim().1
    }
}

/// A (clip, referral expressions, ground-truth masks) triple; the unit of
/// training and evaluation.
#[derive(Debug, Clone)]
pub struct ReferralSample {
    pub clip: VideoClip,
    pub expressions: Vec<String>,
    pub gt: MaskSequence,
    pub concept: Option<String>,
}

impl ReferralSample {
    pub fn new(
        clip: VideoClip,
        expressions: Vec<String>,
        gt: MaskSequence,
        concept: Option<String>,
    ) -> Result<Self> {
        if expressions.is_empty() {
            return Err(Error::Param(format!(
                "sample '{}' has no referral expressions",
                clip.clip_id
            )));
        }
        if gt.len() != clip.len() {
            return Err(Error::Shape(format!(
                "sample '{}': {} masks for {} frames",
                clip.clip_id,
                gt.len(),
                clip.len()
            )));
        }
        if !gt.masks.is_empty() && (gt.height(), gt.width()) != (clip.height(), clip.width()) {
            return Err(Error::Shape(format!(
                "sample '{}': mask dims {:?} do not match frame dims {:?}",
                clip.clip_id,
                (gt.height(), gt.width()),
                (clip.height(), clip.width())
            )));
        }
        Ok(Self {
            clip,
            expressions,
            gt,
            concept,
        })
    }
}
