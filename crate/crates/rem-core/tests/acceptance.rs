//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.
//!
//! Heavy fixtures (the trained toy autoencoder and its datasets) are built
//! once and shared across criteria.

use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rem_core::codec::{encode_mask, latents_to_mask};
use rem_core::data::{load_sample, synth_dataset, DatasetManifest, ShapeKind, SynthSpec};
use rem_core::infer::{segment_video, InferParams, MaskDecoder};
use rem_core::metrics::{
    aggregate_report, contour_accuracy, default_boundary_tolerance, evaluate_dataset,
    region_similarity, EvalConfig, EvalReport, ExpressionRecord, SampleReport,
};
use rem_core::schedule::{build_schedule, forward_diffuse};
use rem_core::train::{
    denoising_loss, mask_latent_loss, train_denoiser, train_denoiser_with_head, EarlyStop, Stage,
    TrainConfig,
};
use rem_core::unet::{CnnHead, DenoiserConfig, DenoiserNet};
use rem_core::util::randn_seeded;
use rem_core::vae::{train_toy_autoencoder, Autoencoder, AutoencoderConfig, VaeTrainConfig};
use rem_core::{LatentTensor, TextEncoder, VideoClip};

fn verdict(criterion: usize, name: &str, result: Result<(), String>) {
    let line = match &result {
        Ok(()) => format!("ACCEPTANCE criterion {criterion} ({name}): PASS"),
        Err(e) => format!("ACCEPTANCE criterion {criterion} ({name}): FAIL — {e}"),
    };
    // write past the harness's output capture so the gate line is visible
    // even for passing tests without --nocapture
    use std::io::Write;
    match std::fs::OpenOptions::new().append(true).open("/dev/stdout") {
        Ok(mut f) => {
            let _ = writeln!(f, "{line}");
        }
        Err(_) => println!("{line}"),
    }
    if let Err(e) = result {
        panic!("criterion {criterion} failed: {e}");
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

struct VaeFixture {
    _dir: tempfile::TempDir,
    ae: Autoencoder,
    video: DatasetManifest,
    images: DatasetManifest,
    vae_seconds: f64,
}

fn vae_fixture() -> &'static VaeFixture {
    static FIX: OnceLock<VaeFixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let video = synth_dataset(
            &SynthSpec {
                n_clips: 8,
                frames_per_clip: 8,
                resolution: (64, 64),
                ..SynthSpec::default()
            },
            &dir.path().join("video"),
            7,
        )
        .unwrap();
        let images = synth_dataset(
            &SynthSpec {
                n_clips: 16,
                frames_per_clip: 1,
                resolution: (64, 64),
                ..SynthSpec::default()
            },
            &dir.path().join("images"),
            8,
        )
        .unwrap();
        let t0 = Instant::now();
        let ae = train_toy_autoencoder(
            &video,
            &VaeTrainConfig {
                steps: 1500,
                ..VaeTrainConfig::default()
            },
        )
        .unwrap();
        VaeFixture {
            _dir: dir,
            ae,
            video,
            images,
            vae_seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

fn desk_denoiser() -> DenoiserNet {
    DenoiserNet::new(DenoiserConfig {
        base_channels: 16,
        ..DenoiserConfig::default()
    })
    .unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1: metric oracle equivalence

/// Independent brute-force oracles, written directly from the definitions.
mod oracle {
    use ndarray::Array2;

    pub fn iou(a: &Array2<u8>, b: &Array2<u8>) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&x, &y) in a.iter().zip(b.iter()) {
            if x != 0 && y != 0 {
                inter += 1;
            }
            if x != 0 || y != 0 {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn boundary(m: &Array2<u8>) -> Vec<(usize, usize)> {
        let (h, w) = m.dim();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if m[[y, x]] == 0 {
                    continue;
                }
                let mut edge = false;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            edge = true;
                        } else if m[[ny as usize, nx as usize]] == 0 {
                            edge = true;
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

    /// Boundary F-measure via exhaustive pairwise distances.
    pub fn boundary_f(pred: &Array2<u8>, gt: &Array2<u8>, tol: f64) -> f64 {
        let bp = boundary(pred);
        let bg = boundary(gt);
        match (bp.is_empty(), bg.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let within = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
            let hits = from
                .iter()
                .filter(|&&(y, x)| {
                    to.iter().any(|&(gy, gx)| {
                        let dy = y as f64 - gy as f64;
                        let dx = x as f64 - gx as f64;
                        (dy * dy + dx * dx).sqrt() <= tol
                    })
                })
                .count();
            hits as f64 / from.len() as f64
        };
        let precision = within(&bp, &bg);
        let recall = within(&bg, &bp);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

#[test]
fn criterion_1_metric_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let result = (|| {
        for case in 0..100 {
            // mix of blob-like and speckle masks
            let gen = |rng: &mut ChaCha8Rng| -> Array2<u8> {
                if rng.random_bool(0.5) {
                    let cy = rng.random_range(4..28) as f64;
                    let cx = rng.random_range(4..28) as f64;
                    let r = rng.random_range(2..10) as f64;
                    Array2::from_shape_fn((32, 32), |(y, x)| {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        u8::from(d <= r)
                    })
                } else {
                    let p = rng.random_range(0.05..0.5);
                    let mut m = Array2::zeros((32, 32));
                    for v in m.iter_mut() {
                        *v = u8::from(rng.random_bool(p));
                    }
                    m
                }
            };
            let a = gen(&mut rng);
            let b = gen(&mut rng);
            let j = region_similarity(&a, &b).map_err(|e| e.to_string())?;
            let j_oracle = oracle::iou(&a, &b);
            check(j == j_oracle, format!("case {case}: J {j} != oracle {j_oracle}"))?;
            let tol = default_boundary_tolerance(32, 32);
            let f = contour_accuracy(&a, &b, tol).map_err(|e| e.to_string())?;
            let f_oracle = oracle::boundary_f(&a, &b, tol);
            check(
                (f - f_oracle).abs() <= 1e-9,
                format!("case {case}: F {f} vs oracle {f_oracle}"),
            )?;
        }
        let secs = t0.elapsed().as_secs_f64();
        check(secs < 10.0, format!("took {secs:.1}s, budget 10s"))
    })();
    verdict(1, "metric oracle equivalence", result);
}

// ---------------------------------------------------------------------------
// criterion 2: schedule invariants

#[test]
fn criterion_2_schedule_invariants() {
    let t0 = Instant::now();
    let result = (|| {
        let sched = build_schedule(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
        check(sched.alpha_bar(0).unwrap() == 1.0, "alpha_bar(0) != 1")?;
        for t in 1..=1000usize {
            let (a, b) = (sched.alpha_bar(t - 1).unwrap(), sched.alpha_bar(t).unwrap());
            check(b < a, format!("alpha_bar not strictly decreasing at t={t}"))?;
            let ab = sched.alpha_bar(t).unwrap();
            let split = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
            check(
                (split - 1.0).abs() < 1e-12,
                format!("unit split violated at t={t}: {split}"),
            )?;
        }
        let z0 = LatentTensor::new(
            randn_seeded(&[2, 4, 8, 8], candle_core::DType::F32, 5).unwrap(),
        )
        .unwrap();
        let eps = LatentTensor::new(
            randn_seeded(&[2, 4, 8, 8], candle_core::DType::F32, 6).unwrap(),
        )
        .unwrap();
        let out = forward_diffuse(&z0, 0, &eps, &sched).map_err(|e| e.to_string())?;
        let a: Vec<f32> = z0.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = out.tensor().flatten_all().unwrap().to_vec1().unwrap();
        check(
            a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            "forward_diffuse at t=0 is not bit-exact identity",
        )?;
        let secs = t0.elapsed().as_secs_f64();
        check(secs < 1.0, format!("took {secs:.2}s, budget 1s"))
    })();
    verdict(2, "schedule invariants", result);
}

// ---------------------------------------------------------------------------
// criterion 3: gradient correctness vs central finite differences

#[test]
fn criterion_3_gradient_correctness() {
    let t0 = Instant::now();
    let result = (|| {
        let net = DenoiserNet::new(DenoiserConfig::tiny_f64()).map_err(|e| e.to_string())?;
        check(
            net.param_count() <= 10_000,
            format!("{} params exceeds the 1e4 budget", net.param_count()),
        )?;
        // the output conv is zero-initialized, which would zero every
        // upstream gradient; redraw all weights so gradients flow everywhere
        for (i, (name, var)) in net.named_vars().iter().enumerate() {
            let r = randn_seeded(var.as_tensor().dims(), candle_core::DType::F64, 0xC3 + i as u64)
                .unwrap();
            var.set(&(r * 0.2).unwrap())
                .map_err(|e| format!("reseeding {name}: {e}"))?;
        }
        let text = TextEncoder::new(rem_core::TextEncoderConfig {
            vocab_size: 128,
            d_text: 8,
            seq_len: 4,
        })
        .map_err(|e| e.to_string())?;
        let e_c = text.encode("the red square").map_err(|e| e.to_string())?;
        let z0 = LatentTensor::new(
            randn_seeded(&[2, 2, 8, 8], candle_core::DType::F64, 31).unwrap(),
        )
        .unwrap();
        let zm = LatentTensor::new(
            randn_seeded(&[2, 2, 8, 8], candle_core::DType::F64, 32).unwrap(),
        )
        .unwrap();
        let eps = LatentTensor::new(
            randn_seeded(&[2, 2, 8, 8], candle_core::DType::F64, 33).unwrap(),
        )
        .unwrap();
        let sched = build_schedule(10, 1e-4, 0.02).map_err(|e| e.to_string())?;

        // two losses under test: latent supervision at t=0, denoising at t=3
        let losses: Vec<(&str, Box<dyn Fn() -> Result<candle_core::Tensor, String>>)> = vec![
            (
                "mask_latent_loss",
                Box::new(|| {
                    let pred = net.denoise(&z0, &e_c, 0).map_err(|e| e.to_string())?;
                    mask_latent_loss(&pred, &zm).map_err(|e| e.to_string())
                }),
            ),
            (
                "denoising_loss",
                Box::new(|| {
                    denoising_loss(&net, &z0, &e_c, 3, &eps, &sched).map_err(|e| e.to_string())
                }),
            ),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
        let mut checked = 0usize;
        for (lname, loss_fn) in &losses {
            let loss = loss_fn()?;
            let grads = loss.backward().map_err(|e| e.to_string())?;
            let vars = net.named_vars();
            // sample coordinates across randomly chosen tensors
            for _ in 0..20 {
                let (vname, var) = &vars[rng.random_range(0..vars.len())];
                let Some(grad) = grads.get(var.as_tensor()) else {
                    continue;
                };
                let flat_g: Vec<f64> = grad.flatten_all().unwrap().to_vec1().unwrap();
                let idx = rng.random_range(0..flat_g.len());
                let g_bp = flat_g[idx];

                let original: Vec<f64> = var
                    .as_tensor()
                    .flatten_all()
                    .unwrap()
                    .to_vec1()
                    .unwrap();
                let dims = var.as_tensor().dims().to_vec();
                let h = 1e-4 * original[idx].abs().max(1.0);
                let eval_at = |v: f64| -> Result<f64, String> {
                    let mut data = original.clone();
                    data[idx] = v;
                    let t = candle_core::Tensor::from_vec(
                        data,
                        dims.as_slice(),
                        &candle_core::Device::Cpu,
                    )
                    .unwrap();
                    var.set(&t).map_err(|e| e.to_string())?;
                    let l = loss_fn()?;
                    Ok(l.to_scalar::<f64>().map_err(|e| e.to_string())?)
                };
                let lp = eval_at(original[idx] + h)?;
                let lm = eval_at(original[idx] - h)?;
                // restore
                let t = candle_core::Tensor::from_vec(
                    original.clone(),
                    dims.as_slice(),
                    &candle_core::Device::Cpu,
                )
                .unwrap();
                var.set(&t).map_err(|e| e.to_string())?;

                let g_fd = (lp - lm) / (2.0 * h);
                // central differences carry roundoff noise of about
                // eps * |L| / h; a 1e-4 relative comparison is only
                // meaningful for gradients well above that floor
                let noise = f64::EPSILON * lp.abs().max(1.0) / h;
                if g_fd.abs().max(g_bp.abs()) < 1e4 * noise {
                    continue;
                }
                let rel = (g_fd - g_bp).abs() / g_fd.abs().max(g_bp.abs());
                check(
                    rel < 1e-4,
                    format!(
                        "{lname} grad mismatch at {vname}[{idx}]: fd {g_fd:.3e} bp {g_bp:.3e} rel {rel:.3e}"
                    ),
                )?;
                checked += 1;
            }
        }
        check(checked >= 20, format!("only {checked} coordinates checked"))?;
        let secs = t0.elapsed().as_secs_f64();
        check(secs < 120.0, format!("took {secs:.0}s, budget 2min"))
    })();
    verdict(3, "gradient correctness", result);
}

// ---------------------------------------------------------------------------
// criterion 4: mask-codec round trip through the trained autoencoder

#[test]
fn criterion_4_mask_codec_roundtrip() {
    let result = (|| {
        let fix = vae_fixture();
        // held-out masks: a fresh dataset the autoencoder never saw
        let dir = tempfile::tempdir().unwrap();
        let held = synth_dataset(
            &SynthSpec {
                n_clips: 4,
                frames_per_clip: 8,
                resolution: (64, 64),
                ..SynthSpec::default()
            },
            dir.path(),
            99,
        )
        .map_err(|e| e.to_string())?;
        let mut js = Vec::new();
        for rec in &held.samples {
            let s = load_sample(&held, &rec.clip_id).map_err(|e| e.to_string())?;
            let z = encode_mask(&fix.ae, &s.gt).map_err(|e| e.to_string())?;
            let m = latents_to_mask(&fix.ae, &z, 0.5).map_err(|e| e.to_string())?;
            for (p, g) in m.masks.iter().zip(s.gt.masks.iter()) {
                js.push(region_similarity(p, g).map_err(|e| e.to_string())?);
            }
        }
        let mean = js.iter().sum::<f64>() / js.len() as f64;
        check(
            mean >= 0.95,
            format!("held-out codec round-trip J {mean:.4} < 0.95"),
        )?;
        check(
            fix.vae_seconds <= 1200.0,
            format!("autoencoder training took {:.0}s, budget 20min", fix.vae_seconds),
        )
    })();
    verdict(4, "mask-codec round trip", result);
}

// ---------------------------------------------------------------------------
// criterion 5: end-to-end overfit + bit-deterministic inference

#[test]
fn criterion_5_end_to_end_overfit() {
    let result = (|| {
        let fix = vae_fixture();
        let t0 = Instant::now();
        let net = desk_denoiser();
        let text = TextEncoder::new(Default::default()).unwrap();

        let s1 = TrainConfig {
            max_steps: 100,
            epochs: None,
            batch_size: 2,
            window: 8,
            seed: 11,
            ..TrainConfig::desk_default(Stage::Stage1)
        };
        let st1 = train_denoiser(&net, &fix.ae, &text, &fix.images, None, None, &s1, None, None)
            .map_err(|e| e.to_string())?;

        let s2 = TrainConfig {
            max_steps: 1900,
            batch_size: 2,
            window: 8,
            seed: 12,
            early_stop: Some(EarlyStop {
                target_j: 0.92,
                check_every: 100,
            }),
            ..TrainConfig::desk_default(Stage::Stage2)
        };
        let st2 = train_denoiser(
            &net,
            &fix.ae,
            &text,
            &fix.video,
            Some(&fix.images),
            Some(&fix.video),
            &s2,
            None,
            None,
        )
        .map_err(|e| e.to_string())?;
        let total_steps = st1.step + st2.step;
        check(
            total_steps <= 2000,
            format!("{total_steps} steps exceeds the 2000-step budget"),
        )?;

        let report = evaluate_dataset(
            &net,
            &fix.ae,
            &text,
            &MaskDecoder::Vae,
            &fix.video,
            &EvalConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        check(
            report.j >= 0.90,
            format!("training-set J {:.4} < 0.90 after {total_steps} steps", report.j),
        )?;

        // bit-deterministic inference
        let sample = load_sample(&fix.video, &fix.video.samples[0].clip_id)
            .map_err(|e| e.to_string())?;
        let params = InferParams::default();
        let a = segment_video(
            &net,
            &fix.ae,
            &text,
            &MaskDecoder::Vae,
            &sample.clip,
            &sample.expressions[0],
            &params,
        )
        .map_err(|e| e.to_string())?;
        let b = segment_video(
            &net,
            &fix.ae,
            &text,
            &MaskDecoder::Vae,
            &sample.clip,
            &sample.expressions[0],
            &params,
        )
        .map_err(|e| e.to_string())?;
        check(
            a.masks == b.masks,
            "repeated inference is not bit-identical",
        )?;
        let secs = t0.elapsed().as_secs_f64() + fix.vae_seconds;
        check(secs <= 2700.0, format!("took {secs:.0}s, budget 45min CPU"))
    })();
    verdict(5, "end-to-end overfit", result);
}

// ---------------------------------------------------------------------------
// criterion 6: language conditioning on two-object clips

#[test]
fn criterion_6_language_conditioning() {
    let result = (|| {
        let fix = vae_fixture();
        let combos = vec![
            ("red".to_string(), ShapeKind::Square),
            ("blue".to_string(), ShapeKind::Circle),
        ];
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_clips: 10,
            frames_per_clip: 8,
            resolution: (64, 64),
            objects_per_clip: 2,
            combos: Some(combos.clone()),
            ..SynthSpec::default()
        };
        let train = synth_dataset(&spec, &dir.path().join("train"), 21).map_err(|e| e.to_string())?;
        // held-out clips: same concepts, unseen object positions/motions
        let held = synth_dataset(
            &SynthSpec {
                n_clips: 2,
                split: "val".into(),
                ..spec.clone()
            },
            &dir.path().join("val"),
            22,
        )
        .map_err(|e| e.to_string())?;

        let net = desk_denoiser();
        let text = TextEncoder::new(Default::default()).unwrap();
        let cfg = TrainConfig {
            max_steps: 2500,
            batch_size: 2,
            window: 4,
            seed: 13,
            early_stop: Some(EarlyStop {
                target_j: 0.80,
                check_every: 100,
            }),
            ..TrainConfig::desk_default(Stage::Stage2)
        };
        train_denoiser(&net, &fix.ae, &text, &train, None, Some(&held), &cfg, None, None)
            .map_err(|e| e.to_string())?;

        // each held-out clip carries one sample per object sharing frames;
        // inference window matches the trained temporal window
        let params = InferParams {
            window: 4,
            overlap: 2,
            ..InferParams::default()
        };
        let mut own_j = Vec::new();
        let mut cross_j = Vec::new();
        for rec in &held.samples {
            let s = load_sample(&held, &rec.clip_id).map_err(|e| e.to_string())?;
            // the partner sample: same clip prefix, other object
            let partner = held
                .samples
                .iter()
                .find(|r| r.clip_id != rec.clip_id && r.frames == rec.frames)
                .ok_or("no partner object found")?;
            let other = load_sample(&held, &partner.clip_id).map_err(|e| e.to_string())?;
            let expr = &s.expressions[0]; // "the <color> <shape>"
            let pred = segment_video(&net, &fix.ae, &text, &MaskDecoder::Vae, &s.clip, expr, &params)
                .map_err(|e| e.to_string())?;
            let mut own = Vec::new();
            let mut cross = Vec::new();
            for ((p, g), og) in pred
                .masks
                .iter()
                .zip(s.gt.masks.iter())
                .zip(other.gt.masks.iter())
            {
                own.push(region_similarity(p, g).map_err(|e| e.to_string())?);
                cross.push(region_similarity(p, og).map_err(|e| e.to_string())?);
            }
            own_j.push(own.iter().sum::<f64>() / own.len() as f64);
            cross_j.push(cross.iter().sum::<f64>() / cross.len() as f64);
        }
        for (i, (o, c)) in own_j.iter().zip(cross_j.iter()).enumerate() {
            check(
                *o >= 0.70,
                format!("expression {i}: held-out J {o:.4} < 0.70 (all: {own_j:?})"),
            )?;
            check(
                *c < 0.30,
                format!("expression {i}: cross-object IoU {c:.4} >= 0.30 (all: {cross_j:?})"),
            )?;
        }
        Ok(())
    })();
    verdict(6, "language conditioning", result);
}

// ---------------------------------------------------------------------------
// criterion 7: decoder ablation (frozen-VAE path vs CNN head)

#[test]
fn criterion_7_decoder_ablation() {
    let result = (|| {
        let fix = vae_fixture();
        let dir = tempfile::tempdir().unwrap();
        // seen combos for training, unseen color/shape pairings held out
        let train_combos = vec![
            ("red".to_string(), ShapeKind::Square),
            ("green".to_string(), ShapeKind::Circle),
            ("blue".to_string(), ShapeKind::Square),
            ("yellow".to_string(), ShapeKind::Circle),
        ];
        let held_combos = vec![
            ("red".to_string(), ShapeKind::Circle),
            ("blue".to_string(), ShapeKind::Circle),
            ("green".to_string(), ShapeKind::Square),
        ];
        let train = synth_dataset(
            &SynthSpec {
                n_clips: 8,
                frames_per_clip: 8,
                resolution: (64, 64),
                combos: Some(train_combos),
                ..SynthSpec::default()
            },
            &dir.path().join("train"),
            31,
        )
        .map_err(|e| e.to_string())?;
        let held = synth_dataset(
            &SynthSpec {
                n_clips: 6,
                frames_per_clip: 8,
                resolution: (64, 64),
                combos: Some(held_combos),
                split: "val".into(),
                ..SynthSpec::default()
            },
            &dir.path().join("val"),
            32,
        )
        .map_err(|e| e.to_string())?;

        let text = TextEncoder::new(Default::default()).unwrap();
        // identical budgets for both paths: same net config, steps, seed
        let cfg = TrainConfig {
            max_steps: 700,
            batch_size: 2,
            window: 4,
            seed: 14,
            early_stop: None,
            ..TrainConfig::desk_default(Stage::Stage2)
        };

        // evaluation window matches the trained temporal window
        let eval_cfg = EvalConfig {
            window: 4,
            overlap: 2,
            ..EvalConfig::default()
        };

        let net_vae = desk_denoiser();
        train_denoiser(&net_vae, &fix.ae, &text, &train, None, None, &cfg, None, None)
            .map_err(|e| e.to_string())?;
        let report_vae = evaluate_dataset(
            &net_vae,
            &fix.ae,
            &text,
            &MaskDecoder::Vae,
            &held,
            &eval_cfg,
        )
        .map_err(|e| e.to_string())?;

        let net_cnn = desk_denoiser();
        let head = CnnHead::new(
            net_cnn.config.base_channels * net_cnn.config.channel_mults[0],
            fix.ae.config.downsample_factor,
            candle_core::DType::F32,
        )
        .map_err(|e| e.to_string())?;
        train_denoiser_with_head(
            &net_cnn,
            &fix.ae,
            &text,
            &train,
            None,
            None,
            &cfg,
            None,
            None,
            Some(&head),
        )
        .map_err(|e| e.to_string())?;
        let report_cnn = evaluate_dataset(
            &net_cnn,
            &fix.ae,
            &text,
            &MaskDecoder::Cnn(head),
            &held,
            &eval_cfg,
        )
        .map_err(|e| e.to_string())?;

        println!(
            "  ablation held-out J: vae {:.4} vs cnn {:.4}",
            report_vae.j, report_cnn.j
        );
        check(
            report_vae.j >= report_cnn.j,
            format!(
                "frozen-VAE path J {:.4} below CNN-head path J {:.4}",
                report_vae.j, report_cnn.j
            ),
        )
    })();
    verdict(7, "decoder ablation", result);
}

// ---------------------------------------------------------------------------
// criterion 8: two-stage freeze contracts

#[test]
fn criterion_8_freeze_contracts() {
    let result = (|| {
        let dir = tempfile::tempdir().unwrap();
        let images = synth_dataset(
            &SynthSpec {
                n_clips: 3,
                frames_per_clip: 1,
                resolution: (32, 32),
                ..SynthSpec::default()
            },
            &dir.path().join("img"),
            41,
        )
        .map_err(|e| e.to_string())?;
        let video = synth_dataset(
            &SynthSpec {
                n_clips: 2,
                frames_per_clip: 4,
                resolution: (32, 32),
                ..SynthSpec::default()
            },
            &dir.path().join("vid"),
            42,
        )
        .map_err(|e| e.to_string())?;
        let ae = Autoencoder::new(AutoencoderConfig {
            base_channels: 8,
            ..AutoencoderConfig::default()
        })
        .unwrap()
        .freeze()
        .map_err(|e| e.to_string())?;
        let net = DenoiserNet::new(DenoiserConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            self_attn_levels: vec![1],
            cross_attn_levels: vec![1],
            num_groups: 4,
            ..DenoiserConfig::default()
        })
        .unwrap();
        let text = TextEncoder::new(Default::default()).unwrap();

        let ae_sum = ae.checksum().map_err(|e| e.to_string())?;
        let text_sum = text.checksum().map_err(|e| e.to_string())?;
        let temporal_sum = net
            .checksum_of(&net.temporal_parameters())
            .map_err(|e| e.to_string())?;

        let mk = |stage, steps| TrainConfig {
            max_steps: steps,
            epochs: None,
            batch_size: 1,
            window: 2,
            resolution: (32, 32),
            seed: 15,
            ..TrainConfig::desk_default(stage)
        };
        train_denoiser(&net, &ae, &text, &images, None, None, &mk(Stage::Stage1, 3), None, None)
            .map_err(|e| e.to_string())?;
        check(
            net.checksum_of(&net.temporal_parameters()).unwrap() == temporal_sum,
            "stage 1 changed temporal weights",
        )?;
        check(
            ae.checksum().unwrap() == ae_sum,
            "stage 1 changed the autoencoder",
        )?;

        train_denoiser(
            &net,
            &ae,
            &text,
            &video,
            Some(&images),
            None,
            &mk(Stage::Stage2, 3),
            None,
            None,
        )
        .map_err(|e| e.to_string())?;
        check(
            ae.checksum().unwrap() == ae_sum,
            "full pipeline changed the autoencoder",
        )?;
        check(
            text.checksum().unwrap() == text_sum,
            "full pipeline changed the text tables",
        )
    })();
    verdict(8, "two-stage freeze contracts", result);
}

// ---------------------------------------------------------------------------
// criterion 9: evaluation protocol

#[test]
fn criterion_9_evaluation_protocol() {
    let result = (|| {
        let rec = |expr: &str, js: &[f64], f: f64| ExpressionRecord {
            expression: expr.into(),
            per_frame_j: js.to_vec(),
            j: js.iter().sum::<f64>() / js.len() as f64,
            f,
        };
        let sample = |id: &str, concept: &str, recs: Vec<ExpressionRecord>| {
            let j = recs.iter().map(|r| r.j).sum::<f64>() / recs.len() as f64;
            let f = recs.iter().map(|r| r.f).sum::<f64>() / recs.len() as f64;
            SampleReport {
                clip_id: id.into(),
                concept: Some(concept.into()),
                expressions: recs,
                j,
                f,
            }
        };
        // 3-sample fixture with hand-computable aggregates
        let samples = vec![
            sample(
                "a",
                "square",
                vec![rec("e1", &[0.4, 0.6], 0.5), rec("e2", &[0.5, 0.5], 0.7)],
            ),
            sample("b", "square", vec![rec("e1", &[0.8, 1.0], 0.9)]),
            sample("c", "circle", vec![rec("e1", &[0.2, 0.4, 0.6], 0.3)]),
        ];
        // hand computation: sample a J = (0.5 + 0.5)/2 = 0.5, F = 0.6;
        // sample b J = 0.9, F = 0.9; sample c J = 0.4, F = 0.3.
        // dataset J = 0.6, F = 0.6; per-concept square J = 0.7, circle J = 0.4.
        let report = aggregate_report("fixture", "vae", samples.clone(), 0);
        check((report.j - 0.6).abs() < 1e-12, format!("J {} != 0.6", report.j))?;
        check((report.f - 0.6).abs() < 1e-12, format!("F {} != 0.6", report.f))?;
        check(
            (report.jf - 0.6).abs() < 1e-12,
            format!("JF {} != 0.6", report.jf),
        )?;
        let sq = report
            .per_concept
            .iter()
            .find(|r| r.concept == "square")
            .ok_or("missing square row")?;
        check((sq.j - 0.7).abs() < 1e-12, format!("square J {} != 0.7", sq.j))?;
        let ci = report
            .per_concept
            .iter()
            .find(|r| r.concept == "circle")
            .ok_or("missing circle row")?;
        check((ci.j - 0.4).abs() < 1e-12, format!("circle J {} != 0.4", ci.j))?;

        // order invariance: samples and expressions permuted
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled[2].expressions.reverse();
        let report2 = aggregate_report("fixture", "vae", shuffled, 0);
        check(
            report.j.to_bits() == report2.j.to_bits()
                && report.f.to_bits() == report2.f.to_bits()
                && report.jf.to_bits() == report2.jf.to_bits(),
            "aggregates changed under enumeration order",
        )?;

        // bit-exact JSON round trip
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).map_err(|e| e.to_string())?;
        let loaded = EvalReport::load_json(&path).map_err(|e| e.to_string())?;
        check(
            loaded.j.to_bits() == report.j.to_bits()
                && loaded.f.to_bits() == report.f.to_bits()
                && loaded.jf.to_bits() == report.jf.to_bits(),
            "JSON round trip not bit-exact on aggregates",
        )?;
        let path2 = dir.path().join("report2.json");
        loaded.save_json(&path2).map_err(|e| e.to_string())?;
        check(
            std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap(),
            "re-serialized report differs byte-for-byte",
        )
    })();
    verdict(9, "evaluation protocol", result);
}

// ---------------------------------------------------------------------------

/// Windows shorter than the trained window must degrade gracefully, not
/// error (long clips are covered by chunked inference).
#[test]
fn short_clip_inference_does_not_error() {
    let ae = Autoencoder::new(AutoencoderConfig {
        base_channels: 8,
        ..AutoencoderConfig::default()
    })
    .unwrap()
    .freeze()
    .unwrap();
    let net = DenoiserNet::new(DenoiserConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        self_attn_levels: vec![1],
        cross_attn_levels: vec![1],
        num_groups: 4,
        ..DenoiserConfig::default()
    })
    .unwrap();
    let text = TextEncoder::new(Default::default()).unwrap();
    let frames = (0..2)
        .map(|k| {
            ndarray::Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y + x + k) % 5) as f32 / 5.0)
        })
        .collect();
    let clip = VideoClip::new(frames, 24.0, "short").unwrap();
    let masks = segment_video(
        &net,
        &ae,
        &text,
        &MaskDecoder::Vae,
        &clip,
        "the red square",
        &InferParams::default(),
    )
    .unwrap();
    assert_eq!(masks.len(), 2);
}
