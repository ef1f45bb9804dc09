use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DatasetManifest, Modality, SampleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }

    /// Circumscribed radius for overlap checks.
    fn radius(&self, size: f32) -> f32 {
        match self {
            ShapeKind::Square => size / 2.0 * std::f32::consts::SQRT_2,
            ShapeKind::Circle => size / 2.0,
        }
    }

    fn contains(&self, px: f32, py: f32, cx: f32, cy: f32, size: f32) -> bool {
        match self {
            ShapeKind::Square => (px - cx).abs() <= size / 2.0 && (py - cy).abs() <= size / 2.0,
            ShapeKind::Circle => {
                let r = size / 2.0;
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Static,
    Right,
    Left,
    Up,
    Down,
}

impl Motion {
    fn direction(&self) -> (f32, f32) {
        match self {
            Motion::Static => (0.0, 0.0),
            Motion::Right => (1.0, 0.0),
            Motion::Left => (-1.0, 0.0),
            Motion::Up => (0.0, -1.0),
            Motion::Down => (0.0, 1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Motion::Static => "static",
            Motion::Right => "right",
            Motion::Left => "left",
            Motion::Up => "up",
            Motion::Down => "down",
        }
    }
}

/// One rendered object: a colored shape with a linear (bouncing) motion.
#[derive(Debug, Clone)]
pub struct SynthObject {
    pub shape: ShapeKind,
    pub color_name: String,
    pub color: [f32; 3],
    pub size: f32,
    pub motion: Motion,
    pub speed: f32,
    cx: f32,
    cy: f32,
    vx: f32,
    vy: f32,
}

/// Parameters of the synthetic moving-shapes generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub frames_per_clip: usize,
    /// (height, width)
    pub resolution: (usize, usize),
    pub shapes: Vec<ShapeKind>,
    /// (name, rgb in [0,1])
    pub colors: Vec<(String, [f32; 3])>,
    pub motions: Vec<Motion>,
    pub objects_per_clip: usize,
    pub size_range: (f32, f32),
    /// When set, only these (color name, shape) combinations are generated.
    pub combos: Option<Vec<(String, ShapeKind)>>,
    pub split: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clips: 8,
            frames_per_clip: 8,
            resolution: (64, 64),
            shapes: vec![ShapeKind::Square, ShapeKind::Circle],
            colors: vec![
                ("red".into(), [1.0, 0.15, 0.1]),
                ("green".into(), [0.1, 0.9, 0.2]),
                ("blue".into(), [0.15, 0.3, 1.0]),
                ("yellow".into(), [1.0, 0.9, 0.1]),
            ],
            motions: vec![Motion::Static, Motion::Right, Motion::Left, Motion::Down],
            objects_per_clip: 1,
            size_range: (10.0, 16.0),
            combos: None,
            split: "train".into(),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() || self.motions.is_empty() {
            return Err(Error::Param(
                "synth spec needs at least one shape, color and motion".into(),
            ));
        }
        if self.frames_per_clip == 0 || self.objects_per_clip == 0 {
            return Err(Error::Param(
                "frames_per_clip and objects_per_clip must be >= 1".into(),
            ));
        }
        if self.size_range.0 <= 0.0 || self.size_range.1 < self.size_range.0 {
            return Err(Error::Param(format!(
                "degenerate size range {:?}",
                self.size_range
            )));
        }
        Ok(())
    }

    fn combo_list(&self) -> Vec<(String, [f32; 3], ShapeKind)> {
        match &self.combos {
            Some(list) => list
                .iter()
                .filter_map(|(name, shape)| {
                    self.colors
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(n, rgb)| (n.clone(), *rgb, *shape))
                })
                .collect(),
            None => self
                .colors
                .iter()
                .flat_map(|(n, rgb)| self.shapes.iter().map(|s| (n.clone(), *rgb, *s)))
                .collect(),
        }
    }
}

fn expressions_for(obj: &SynthObject) -> Vec<String> {
    let base = format!("the {} {}", obj.color_name, obj.shape.name());
    let mut out = vec![base.clone(), format!("{} {}", obj.color_name, obj.shape.name())];
    if obj.motion != Motion::Static {
        out.push(format!("{base} moving {}", obj.motion.name()));
    }
    out
}

fn place_objects(
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SynthObject>> {
    let (h, w) = spec.resolution;
    let combos = spec.combo_list();
    if combos.len() < spec.objects_per_clip {
        return Err(Error::Param(format!(
            "need {} distinct color/shape combos, have {}",
            spec.objects_per_clip,
            combos.len()
        )));
    }
    'attempt: for _ in 0..200 {
        // distinct combos per clip so expressions are unambiguous
        let mut picked: Vec<usize> = Vec::new();
        while picked.len() < spec.objects_per_clip {
            let i = rng.random_range(0..combos.len());
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        let mut objs: Vec<SynthObject> = Vec::new();
        for &i in &picked {
            let (name, rgb, shape) = combos[i].clone();
            let size = rng.random_range(spec.size_range.0..=spec.size_range.1);
            let motion = spec.motions[rng.random_range(0..spec.motions.len())];
            let speed = if motion == Motion::Static {
                0.0
            } else {
                rng.random_range(0.5..=1.5)
            };
            let r = shape.radius(size);
            let lo_x = r + 1.0;
            let hi_x = w as f32 - r - 1.0;
            let lo_y = r + 1.0;
            let hi_y = h as f32 - r - 1.0;
            if hi_x <= lo_x || hi_y <= lo_y {
                return Err(Error::Param("shapes too large for resolution".into()));
            }
            let (dx, dy) = motion.direction();
            objs.push(SynthObject {
                shape,
                color_name: name,
                color: rgb,
                size,
                motion,
                speed,
                cx: rng.random_range(lo_x..hi_x),
                cy: rng.random_range(lo_y..hi_y),
                vx: dx * speed,
                vy: dy * speed,
            });
        }
        // reject layouts where any two objects come close during the clip
        let mut sims = objs.clone();
        for _ in 0..spec.frames_per_clip {
            for a in 0..sims.len() {
                for b in a + 1..sims.len() {
                    let d = ((sims[a].cx - sims[b].cx).powi(2)
                        + (sims[a].cy - sims[b].cy).powi(2))
                    .sqrt();
                    if d < sims[a].shape.radius(sims[a].size)
                        + sims[b].shape.radius(sims[b].size)
                        + 2.0
                    {
                        continue 'attempt;
                    }
                }
            }
            for o in sims.iter_mut() {
                step_object(o, (h, w));
            }
        }
        return Ok(objs);
    }
    Err(Error::Param(
        "could not place non-overlapping objects; reduce sizes or object count".into(),
    ))
}

fn step_object(o: &mut SynthObject, res: (usize, usize)) {
    let (h, w) = res;
    let r = o.shape.radius(o.size).min(o.size / 2.0 + 1.0);
    o.cx += o.vx;
    o.cy += o.vy;
    let (lo_x, hi_x) = (r + 1.0, w as f32 - r - 1.0);
    let (lo_y, hi_y) = (r + 1.0, h as f32 - r - 1.0);
    if o.cx < lo_x || o.cx > hi_x {
        o.vx = -o.vx;
        o.cx = o.cx.clamp(lo_x, hi_x);
    }
    if o.cy < lo_y || o.cy > hi_y {
        o.vy = -o.vy;
        o.cy = o.cy.clamp(lo_y, hi_y);
    }
}

fn rasterize(obj: &SynthObject, res: (usize, usize)) -> Array2<u8> {
    let (h, w) = res;
    Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(obj.shape.contains(
            x as f32 + 0.5,
            y as f32 + 0.5,
            obj.cx,
            obj.cy,
            obj.size,
        ))
    })
}

fn save_frame(path: &Path, frame: &Array3<f32>) -> Result<()> {
    let (_, h, w) = frame.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            (frame[[0, y as usize, x as usize]] * 255.0).round() as u8,
            (frame[[1, y as usize, x as usize]] * 255.0).round() as u8,
            (frame[[2, y as usize, x as usize]] * 255.0).round() as u8,
        ])
    });
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]] * 255])
    });
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

/// Generates a synthetic referral dataset of moving colored shapes with
/// exact analytic silhouette masks and template expressions, writing frames,
/// masks and `manifest.json` under `out_dir`. Deterministic given `seed`.
///
/// Clips with several objects yield one manifest sample per object; the
/// samples share frame files but have their own masks and expressions.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let (h, w) = spec.resolution;
    for clip_idx in 0..spec.n_clips {
        let clip_id = format!("clip_{clip_idx:04}");
        let frames_dir = out_dir.join(&clip_id).join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
        let mut objects = place_objects(spec, &mut rng)?;

        let mut frame_files = Vec::new();
        let mut mask_files: Vec<Vec<String>> = vec![Vec::new(); objects.len()];
        for k in 0..spec.frames_per_clip {
            let mut frame = Array3::zeros((3, h, w));
            for (oi, obj) in objects.iter().enumerate() {
                let mask = rasterize(obj, (h, w));
                for y in 0..h {
                    for x in 0..w {
                        if mask[[y, x]] == 1 {
                            for c in 0..3 {
                                frame[[c, y, x]] = obj.color[c];
                            }
                        }
                    }
                }
                let mdir = out_dir.join(&clip_id).join(format!("masks_{oi}"));
                std::fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
                let mrel = format!("{clip_id}/masks_{oi}/{k:04}.png");
                save_mask(&out_dir.join(&mrel), &mask)?;
                mask_files[oi].push(mrel);
            }
            let frel = format!("{clip_id}/frames/{k:04}.png");
            save_frame(&out_dir.join(&frel), &frame)?;
            frame_files.push(frel);
            for obj in objects.iter_mut() {
                step_object(obj, (h, w));
            }
        }
        for (oi, obj) in objects.iter().enumerate() {
            samples.push(SampleRecord {
                clip_id: if objects.len() == 1 {
                    clip_id.clone()
                } else {
                    format!("{clip_id}_obj{oi}")
                },
                frames: frame_files.clone(),
                masks: mask_files[oi].clone(),
                expressions: expressions_for(obj),
                concept: Some(format!("{} {}", obj.color_name, obj.shape.name())),
                split: spec.split.clone(),
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        modality: if spec.frames_per_clip == 1 {
            Modality::Image
        } else {
            Modality::Video
        },
        samples,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, load_sample};

    #[test]
    fn static_centered_square_has_exact_area() {
        let obj = SynthObject {
            shape: ShapeKind::Square,
            color_name: "red".into(),
            color: [1.0, 0.0, 0.0],
            size: 10.0,
            motion: Motion::Static,
            speed: 0.0,
            cx: 32.0,
            cy: 32.0,
            vx: 0.0,
            vy: 0.0,
        };
        let mask = rasterize(&obj, (64, 64));
        assert_eq!(mask.iter().map(|&v| v as usize).sum::<usize>(), 100);
    }

    #[test]
    fn circle_area_within_rasterization_bounds() {
        let r = 8.0f64;
        let obj = SynthObject {
            shape: ShapeKind::Circle,
            color_name: "blue".into(),
            color: [0.0, 0.0, 1.0],
            size: 2.0 * r as f32,
            motion: Motion::Static,
            speed: 0.0,
            cx: 32.0,
            cy: 32.0,
            vx: 0.0,
            vy: 0.0,
        };
        let count = rasterize(&obj, (64, 64))
            .iter()
            .map(|&v| v as usize)
            .sum::<usize>() as f64;
        let lo = std::f64::consts::PI * (r - 1.0).powi(2);
        let hi = std::f64::consts::PI * (r + 1.0).powi(2);
        assert!(count > lo && count < hi, "count {count} outside [{lo}, {hi}]");
    }

    #[test]
    fn generation_is_deterministic_byte_for_byte() {
        let spec = SynthSpec {
            n_clips: 2,
            ..SynthSpec::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_dataset(&spec, d1.path(), 7).unwrap();
        synth_dataset(&spec, d2.path(), 7).unwrap();
        let walk = |root: &Path| {
            let mut files: Vec<_> = walk_files(root);
            files.sort();
            files
        };
        fn walk_files(root: &Path) -> Vec<std::path::PathBuf> {
            let mut out = Vec::new();
            for e in std::fs::read_dir(root).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    out.extend(walk_files(&p));
                } else {
                    out.push(p);
                }
            }
            out
        }
        let (f1, f2) = (walk(d1.path()), walk(d2.path()));
        assert_eq!(f1.len(), f2.len());
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(
                a.strip_prefix(d1.path()).unwrap(),
                b.strip_prefix(d2.path()).unwrap()
            );
            if a.extension().map(|e| e == "png").unwrap_or(false) {
                assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
            }
        }
    }

    #[test]
    fn manifest_loads_back_and_two_object_clips_split() {
        let spec = SynthSpec {
            n_clips: 2,
            objects_per_clip: 2,
            combos: Some(vec![
                ("red".into(), ShapeKind::Square),
                ("blue".into(), ShapeKind::Circle),
            ]),
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(&spec, dir.path(), 3).unwrap();
        let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.len(), 4); // 2 clips x 2 objects
        let s = load_sample(&m, &m.samples[0].clip_id).unwrap();
        assert_eq!(s.clip.len(), 8);
        assert!(!s.expressions.is_empty());
        // masks of the two objects in one clip are disjoint
        let a = load_sample(&m, &m.samples[0].clip_id).unwrap();
        let b = load_sample(&m, &m.samples[1].clip_id).unwrap();
        for k in 0..8 {
            let overlap = a.gt.masks[k]
                .iter()
                .zip(b.gt.masks[k].iter())
                .filter(|(&x, &y)| x == 1 && y == 1)
                .count();
            assert_eq!(overlap, 0);
        }
    }

    #[test]
    fn zero_clips_is_a_valid_empty_dataset() {
        let spec = SynthSpec {
            n_clips: 0,
            ..SynthSpec::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&spec, dir.path(), 0).unwrap();
        assert!(m.is_empty());
        assert!(load_manifest(&dir.path().join("manifest.json")).unwrap().is_empty());
    }
}
