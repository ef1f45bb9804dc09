use std::path::{Path, PathBuf};

use image::GenericImageView;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{MaskSequence, ReferralSample, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Image,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub clip_id: String,
    pub frames: Vec<String>,
    pub masks: Vec<String>,
    pub expressions: Vec<String>,
    pub concept: Option<String>,
    pub split: String,
}

/// A dataset split: a root directory plus the sample records of one JSON
/// manifest. All file paths in records are relative to `root`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub modality: Modality,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn record(&self, clip_id: &str) -> Result<&SampleRecord> {
        self.samples
            .iter()
            .find(|s| s.clip_id == clip_id)
            .ok_or_else(|| Error::UnknownClip {
                clip_id: clip_id.to_string(),
            })
    }

    /// Writes the manifest with `root` stored as `"."` so the dataset
    /// directory stays relocatable; `load_manifest` resolves it against the
    /// manifest's own location.
    pub fn save(&self, path: &Path) -> Result<()> {
        let portable = DatasetManifest {
            root: PathBuf::from("."),
            ..self.clone()
        };
        let text = serde_json::to_string_pretty(&portable)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Loads and validates a JSON manifest. Every referenced frame and mask file
/// must exist; video samples must have equal-length frame and mask lists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| parse_error(path, &text, e))?;
    if manifest.root.is_relative() {
        let base = path.parent().unwrap_or(Path::new("."));
        manifest.root = base.join(&manifest.root);
    }
    for rec in &manifest.samples {
        validate_record(&manifest, rec)?;
    }
    Ok(manifest)
}

fn parse_error(path: &Path, text: &str, source: serde_json::Error) -> Error {
    // serde_json reports 1-based line/column; convert to a byte offset.
    let (line, col) = (source.line(), source.column());
    let offset = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + col.saturating_sub(1);
    Error::ManifestParse {
        path: path.to_path_buf(),
        offset,
        source,
    }
}

fn validate_record(manifest: &DatasetManifest, rec: &SampleRecord) -> Result<()> {
    if rec.frames.is_empty() {
        return Err(Error::BadSample {
            clip_id: rec.clip_id.clone(),
            reason: "empty frame list".into(),
        });
    }
    if rec.expressions.is_empty() {
        return Err(Error::BadSample {
            clip_id: rec.clip_id.clone(),
            reason: "empty expression list".into(),
        });
    }
    if manifest.modality == Modality::Video && rec.frames.len() != rec.masks.len() {
        return Err(Error::BadSample {
            clip_id: rec.clip_id.clone(),
            reason: format!(
                "{} frames but {} masks",
                rec.frames.len(),
                rec.masks.len()
            ),
        });
    }
    for rel in rec.frames.iter().chain(rec.masks.iter()) {
        let p = manifest.root.join(rel);
        if !p.is_file() {
            return Err(Error::MissingFile {
                clip_id: rec.clip_id.clone(),
                path: p,
            });
        }
    }
    Ok(())
}

/// Loads one sample by clip id: frames decoded to `[0,1]` RGB, 8-bit masks
/// binarized at the midpoint (`> 127` is foreground).
pub fn load_sample(manifest: &DatasetManifest, clip_id: &str) -> Result<ReferralSample> {
    let rec = manifest.record(clip_id)?;
    let mut frames = Vec::with_capacity(rec.frames.len());
    for rel in &rec.frames {
        frames.push(load_frame(&manifest.root.join(rel))?);
    }
    let mut masks = Vec::with_capacity(rec.masks.len());
    for rel in &rec.masks {
        masks.push(load_mask(&manifest.root.join(rel))?);
    }
    let clip = VideoClip::new(frames, 24.0, rec.clip_id.clone())?;
    let gt = MaskSequence::new(masks)?;
    ReferralSample::new(clip, rec.expressions.clone(), gt, rec.concept.clone()).map_err(|e| {
        match e {
            Error::Shape(reason) => Error::BadSample {
                clip_id: clip_id.to_string(),
                reason,
            },
            other => other,
        }
    })
}

pub fn load_frame(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut arr = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[[c, y as usize, x as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(arr)
}

pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (w, h) = img.dimensions();
    let gray = img.to_luma8();
    let mut arr = Array2::zeros((h as usize, w as usize));
    for (x, y, px) in gray.enumerate_pixels() {
        arr[[y as usize, x as usize]] = u8::from(px.0[0] > 127);
    }
    Ok(arr)
}
