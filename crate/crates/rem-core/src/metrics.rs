//! Region similarity (J), boundary accuracy (F), multi-expression averaging
//! and dataset-level evaluation reports.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{load_sample, DatasetManifest, ReferralSample};
use crate::error::{Error, Result};
use crate::infer::{segment_video, InferParams, MaskDecoder};
use crate::text::TextEncoder;
use crate::unet::DenoiserNet;
use crate::vae::Autoencoder;

fn check_pair(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Intersection over union. Both masks empty scores 1, exactly one empty
/// scores 0.
pub fn region_similarity(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += usize::from(p == 1 && g == 1);
        union += usize::from(p == 1 || g == 1);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Default boundary-match radius: 0.8% of the image diagonal, rounded up.
pub fn default_boundary_tolerance(h: usize, w: usize) -> f64 {
    (0.008 * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// 8-connected inner boundary: foreground pixels touching background or the
/// image border.
pub fn boundary_pixels(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 1 {
                continue;
            }
            let mut edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if !edge {
                'n: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dy, dx) == (0, 0) {
                            continue;
                        }
                        let (ny, nx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                        if mask[[ny, nx]] == 0 {
                            edge = true;
                            break 'n;
                        }
                    }
                }
            }
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance map to a point set (two-pass 1D lower
/// envelope transform).
fn squared_distance_map(points: &[(usize, usize)], h: usize, w: usize) -> Array2<f64> {
    const INF: f64 = 1e18;
    let mut grid = Array2::from_elem((h, w), INF);
    for &(y, x) in points {
        grid[[y, x]] = 0.0;
    }
    // columns
    let mut tmp = Array2::from_elem((h, w), INF);
    let mut f = vec![0.0f64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[[y, x]];
        }
        let d = dt_1d(&f[..h]);
        for y in 0..h {
            tmp[[y, x]] = d[y];
        }
    }
    // rows
    let mut out = Array2::from_elem((h, w), INF);
    for y in 0..h {
        for x in 0..w {
            f[x] = tmp[[y, x]];
        }
        let d = dt_1d(&f[..w]);
        for x in 0..w {
            out[[y, x]] = d[x];
        }
    }
    out
}

// Felzenszwalb & Huttenlocher 1D squared distance transform.
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let s = ((f[q] + (q * q) as f64) - (f[v[k]] + (v[k] * v[k]) as f64))
                / (2.0 * q as f64 - 2.0 * v[k] as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        d[q] = dq * dq + f[v[k]];
    }
    d
}

/// DAVIS-style boundary F-measure: precision/recall of boundary pixels under
/// a pixel tolerance, combined by harmonic mean. Both boundaries empty
/// scores 1, exactly one empty scores 0.
pub fn contour_accuracy(pred: &Array2<u8>, gt: &Array2<u8>, tol: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if tol < 0.0 {
        return Err(Error::Param("boundary tolerance must be >= 0".into()));
    }
    let (h, w) = pred.dim();
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tol2 = tol * tol;
    let dist_to_gt = squared_distance_map(&bg, h, w);
    let dist_to_pred = squared_distance_map(&bp, h, w);
    let hits_p = bp.iter().filter(|&&(y, x)| dist_to_gt[[y, x]] <= tol2).count();
    let hits_g = bg.iter().filter(|&&(y, x)| dist_to_pred[[y, x]] <= tol2).count();
    let precision = hits_p as f64 / bp.len() as f64;
    let recall = hits_g as f64 / bg.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Auto-generated referral expression for a bare class name: `"the <class>"`
/// lowercased, guarding against a duplicated leading article.
pub fn auto_expression(class_name: &str) -> Result<String> {
    let name = class_name.trim().to_lowercase();
    if name.is_empty() {
        return Err(Error::Param("empty class name".into()));
    }
    let bare = name.strip_prefix("the ").unwrap_or(&name);
    Ok(format!("the {bare}"))
}

/// Mean that is exactly invariant to input order (values are sorted before
/// summation).
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExpressionRecord {
    pub expression: String,
    pub per_frame_j: Vec<f64>,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleReport {
    pub clip_id: String,
    pub concept: Option<String>,
    pub expressions: Vec<ExpressionRecord>,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConceptRow {
    pub concept: String,
    #[serde(rename = "J")]
    pub j: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    pub n_samples: usize,
    pub n_failed: usize,
    pub decoder: String,
    pub per_concept: Vec<ConceptRow>,
    pub per_sample: Vec<SampleReport>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub window: usize,
    pub overlap: usize,
    pub threshold: f64,
    pub dataset_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: 8,
            overlap: 4,
            threshold: 0.5,
            dataset_name: "dataset".into(),
        }
    }
}

/// Scores a predicted mask sequence against ground truth: per-frame J and F
/// averaged over frames.
pub fn score_masks(
    pred: &crate::data::MaskSequence,
    gt: &crate::data::MaskSequence,
) -> Result<(Vec<f64>, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted masks vs {} ground-truth",
            pred.len(),
            gt.len()
        )));
    }
    let (h, w) = (gt.height(), gt.width());
    let tol = default_boundary_tolerance(h, w);
    let mut per_frame_j = Vec::with_capacity(gt.len());
    let mut per_frame_f = Vec::with_capacity(gt.len());
    for (p, g) in pred.masks.iter().zip(gt.masks.iter()) {
        per_frame_j.push(region_similarity(p, g)?);
        per_frame_f.push(contour_accuracy(p, g, tol)?);
    }
    let j = stable_mean(&per_frame_j);
    let f = stable_mean(&per_frame_f);
    Ok((per_frame_j, j, f))
}

/// Segments one sample with every expression and averages the scores over
/// expressions.
pub fn evaluate_sample(
    net: &DenoiserNet,
    ae: &Autoencoder,
    text: &TextEncoder,
    decoder: &MaskDecoder,
    sample: &ReferralSample,
    cfg: &EvalConfig,
) -> Result<SampleReport> {
    if sample.expressions.is_empty() {
        return Err(Error::Param("sample without expressions".into()));
    }
    let params = InferParams {
        window: cfg.window,
        overlap: cfg.overlap,
        threshold: cfg.threshold,
    };
    let mut records = Vec::new();
    for expr in &sample.expressions {
        let pred = segment_video(net, ae, text, decoder, &sample.clip, expr, &params)?;
        let (per_frame_j, j, f) = score_masks(&pred, &sample.gt)?;
        records.push(ExpressionRecord {
            expression: expr.clone(),
            per_frame_j,
            j,
            f,
        });
    }
    let j = stable_mean(&records.iter().map(|r| r.j).collect::<Vec<_>>());
    let f = stable_mean(&records.iter().map(|r| r.f).collect::<Vec<_>>());
    Ok(SampleReport {
        clip_id: sample.clip.clip_id.clone(),
        concept: sample.concept.clone(),
        expressions: records,
        j,
        f,
    })
}

/// Evaluates a whole manifest. Per-sample failures are counted and the
/// aggregates are computed over the successes. Records are ordered by
/// clip id.
pub fn evaluate_dataset(
    net: &DenoiserNet,
    ae: &Autoencoder,
    text: &TextEncoder,
    decoder: &MaskDecoder,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut per_sample = Vec::new();
    let mut n_failed = 0usize;
    for rec in &manifest.samples {
        let result = load_sample(manifest, &rec.clip_id)
            .and_then(|s| evaluate_sample(net, ae, text, decoder, &s, cfg));
        match result {
            Ok(r) => per_sample.push(r),
            Err(_) => n_failed += 1,
        }
    }
    per_sample.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    Ok(aggregate_report(
        &cfg.dataset_name,
        decoder.name(),
        per_sample,
        n_failed,
    ))
}

pub fn aggregate_report(
    dataset: &str,
    decoder: &str,
    per_sample: Vec<SampleReport>,
    n_failed: usize,
) -> EvalReport {
    let j = stable_mean(&per_sample.iter().map(|s| s.j).collect::<Vec<_>>());
    let f = stable_mean(&per_sample.iter().map(|s| s.f).collect::<Vec<_>>());
    let mut concepts: Vec<String> = per_sample
        .iter()
        .filter_map(|s| s.concept.clone())
        .collect();
    concepts.sort();
    concepts.dedup();
    let per_concept = concepts
        .into_iter()
        .map(|c| {
            let vals: Vec<f64> = per_sample
                .iter()
                .filter(|s| s.concept.as_deref() == Some(&c))
                .map(|s| s.j)
                .collect();
            ConceptRow {
                concept: c,
                j: stable_mean(&vals),
                n: vals.len(),
            }
        })
        .collect();
    EvalReport {
        dataset: dataset.to_string(),
        j,
        f,
        jf: (j + f) / 2.0,
        n_samples: per_sample.len(),
        n_failed,
        decoder: decoder.to_string(),
        per_concept,
        per_sample,
    }
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSV mirror of the per-sample records, one row per (clip, expression).
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("clip_id,concept,expression,J,F\n");
        for s in &self.per_sample {
            for e in &s.expressions {
                out.push_str(&format!(
                    "{},{},\"{}\",{},{}\n",
                    s.clip_id,
                    s.concept.as_deref().unwrap_or(""),
                    e.expression,
                    e.j,
                    e.f
                ));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
