//! `rem` — synthetic data generation, training, inference and evaluation
//! for the referral video segmentation pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 numerical
//! abort during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rem_core::data::{load_frame, load_manifest, ShapeKind, SynthSpec};
use rem_core::infer::{render_overlay, segment_video, InferParams, MaskDecoder};
use rem_core::metrics::{evaluate_dataset, EvalConfig};
use rem_core::train::{
    load_checkpoint, train_denoiser_with_head, ResumePoint, Stage, TrainConfig,
};
use rem_core::unet::{CnnHead, DenoiserConfig, DenoiserNet};
use rem_core::vae::{load_autoencoder, save_autoencoder, train_toy_autoencoder, VaeTrainConfig};
use rem_core::{Error, TextEncoder, VideoClip};

#[derive(Parser)]
#[command(name = "rem", version, about = "Referral video segmentation toolkit")]
struct Cli {
    /// Base directory that relative paths are resolved against.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Global seed; falls back to the REM_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes referral dataset.
    Synth(SynthArgs),
    /// Train the toy autoencoder or a denoiser stage.
    Train(TrainArgs),
    /// Segment a directory of frames with one or more expressions.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a dataset manifest.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_clips: usize,
    /// HxW, e.g. 64x64.
    #[arg(long, default_value = "64x64")]
    resolution: String,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 1)]
    objects_per_clip: usize,
    /// Comma-separated "color shape" pairs restricting the generated
    /// concepts, e.g. "red square,blue circle".
    #[arg(long)]
    concepts: Option<String>,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    /// vae | pretrain | stage1 | stage2
    #[arg(long)]
    stage: String,
    /// Manifest of the stage's primary dataset.
    #[arg(long)]
    data: PathBuf,
    /// Image-modality manifest mixed into stage-2 batches.
    #[arg(long)]
    image_data: Option<PathBuf>,
    /// Validation manifest for early stopping.
    #[arg(long)]
    val: Option<PathBuf>,
    /// JSON training config (TrainConfig, or VaeTrainConfig for --stage vae).
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON denoiser architecture config for fresh runs.
    #[arg(long)]
    denoiser_config: Option<PathBuf>,
    /// Directory with a trained frozen autoencoder (vae.safetensors).
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Checkpoint directory to resume from (also supplies net + autoencoder).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train the CNN mask-decoder head jointly instead of latent supervision.
    #[arg(long)]
    cnn_head: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    frames_dir: PathBuf,
    /// Referral expression; repeatable.
    #[arg(long, required = true)]
    expr: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    overlap: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Additionally write blended overlay PNGs.
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// "cnn-head" switches to the jointly-trained CNN decoder path.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    overlap: usize,
    #[arg(long, default_value = "dataset")]
    dataset_name: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli
        .seed
        .or_else(|| {
            std::env::var("REM_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(0);
    let root = cli.root.clone().unwrap_or_else(|| PathBuf::from("."));
    let result = match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, &root, seed),
        Cmd::Train(a) => cmd_train(a, &root, seed),
        Cmd::Infer(a) => cmd_infer(a, &root, seed),
        Cmd::Eval(a) => cmd_eval(a, &root, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Train { .. } => ExitCode::from(3),
                Error::Param(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Records the resolved configuration and a hash of the running binary so
/// every run is attributable and repeatable.
fn write_run_json(out: &Path, command: &str, resolved: serde_json::Value, seed: u64) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let version = std::env::current_exe()
        .ok()
        .and_then(|p| rem_core::util::sha256_file(&p).ok())
        .unwrap_or_else(|| "unknown".into());
    let run = serde_json::json!({
        "command": command,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "code_hash": version,
        "config": resolved,
    });
    let path = out.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&run)?).map_err(|e| Error::io(&path, e))
}

fn parse_resolution(s: &str) -> Result<(usize, usize), Error> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let err = || Error::Param(format!("bad resolution '{s}', expected HxW like 64x64"));
    if parts.len() != 2 {
        return Err(err());
    }
    let h = parts[0].parse().map_err(|_| err())?;
    let w = parts[1].parse().map_err(|_| err())?;
    Ok((h, w))
}

fn parse_concepts(s: &str) -> Result<Vec<(String, ShapeKind)>, Error> {
    let mut combos = Vec::new();
    for item in s.split(',') {
        let mut it = item.split_whitespace();
        let (Some(color), Some(shape), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Param(format!(
                "bad concept '{item}', expected \"color shape\""
            )));
        };
        let shape = match shape {
            "square" => ShapeKind::Square,
            "circle" => ShapeKind::Circle,
            other => return Err(Error::Param(format!("unknown shape '{other}'"))),
        };
        combos.push((color.to_string(), shape));
    }
    Ok(combos)
}

fn cmd_synth(a: &SynthArgs, root: &Path, seed: u64) -> Result<(), Error> {
    let out = resolve(root, &a.out);
    let spec = SynthSpec {
        n_clips: a.n_clips,
        frames_per_clip: a.frames,
        resolution: parse_resolution(&a.resolution)?,
        objects_per_clip: a.objects_per_clip,
        combos: a.concepts.as_deref().map(parse_concepts).transpose()?,
        split: a.split.clone(),
        ..SynthSpec::default()
    };
    rem_core::data::synth_dataset(&spec, &out, seed)?;
    write_run_json(
        &out,
        "synth",
        serde_json::json!({
            "n_clips": a.n_clips,
            "frames": a.frames,
            "resolution": a.resolution,
            "objects_per_clip": a.objects_per_clip,
            "concepts": a.concepts,
            "split": a.split,
        }),
        seed,
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_train(a: &TrainArgs, root: &Path, seed: u64) -> Result<(), Error> {
    let out = resolve(root, &a.out);
    let data = load_manifest(&resolve(root, &a.data))?;

    if a.stage == "vae" {
        let mut cfg: VaeTrainConfig = match &a.config {
            Some(p) => read_json(&resolve(root, p))?,
            None => VaeTrainConfig::default(),
        };
        cfg.seed = seed;
        if let Some(s) = a.max_steps {
            cfg.steps = s;
        }
        if let Some(lr) = a.lr {
            cfg.lr = lr;
        }
        let ae = train_toy_autoencoder(&data, &cfg)?;
        save_autoencoder(&ae, &out)?;
        return write_run_json(&out, "train", serde_json::to_value(&cfg)?, seed);
    }

    let stage = match a.stage.as_str() {
        "pretrain" => Stage::Pretrain,
        "stage1" => Stage::Stage1,
        "stage2" => Stage::Stage2,
        other => {
            return Err(Error::Param(format!(
                "unknown stage '{other}' (expected vae|pretrain|stage1|stage2)"
            )))
        }
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(&resolve(root, p))?,
        None => TrainConfig::desk_default(stage),
    };
    cfg.stage = stage;
    cfg.seed = seed;
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.window {
        cfg.window = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }

    let image_data = a
        .image_data
        .as_ref()
        .map(|p| load_manifest(&resolve(root, p)))
        .transpose()?;
    let val = a
        .val
        .as_ref()
        .map(|p| load_manifest(&resolve(root, p)))
        .transpose()?;

    let (net, ae, resume) = match &a.resume {
        Some(dir) => {
            let loaded = load_checkpoint(&resolve(root, dir))?;
            (
                loaded.net,
                loaded.ae,
                Some(ResumePoint {
                    state: loaded.state,
                    moments: loaded.moments,
                }),
            )
        }
        None => {
            let vae_dir = a.vae.as_ref().ok_or_else(|| {
                Error::Param("fresh training needs --vae (trained autoencoder dir)".into())
            })?;
            let ae = load_autoencoder(&resolve(root, vae_dir))?;
            let dcfg: DenoiserConfig = match &a.denoiser_config {
                Some(p) => read_json(&resolve(root, p))?,
                None => DenoiserConfig {
                    latent_channels: ae.config.latent_channels,
                    ..DenoiserConfig::default()
                },
            };
            (DenoiserNet::new(dcfg)?, ae, None)
        }
    };

    let head = if a.cnn_head {
        let h = CnnHead::new(
            net.config.base_channels * net.config.channel_mults[0],
            ae.config.downsample_factor,
            net.config.dtype()?,
        )?;
        if let Some(r) = &a.resume {
            let loaded = load_checkpoint(&resolve(root, r))?;
            if !loaded.head_tensors.is_empty() {
                h.set_vars(&loaded.head_tensors)?;
            }
        }
        Some(h)
    } else {
        None
    };

    let text = TextEncoder::new(Default::default())?;
    write_run_json(&out, "train", serde_json::to_value(&cfg)?, seed)?;
    train_denoiser_with_head(
        &net,
        &ae,
        &text,
        &data,
        image_data.as_ref(),
        val.as_ref(),
        &cfg,
        Some(&out),
        resume,
        head.as_ref(),
    )?;
    Ok(())
}

fn load_frames_dir(dir: &Path) -> Result<VideoClip, Error> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Param(format!(
            "no frames (*.png, *.jpg) found in {}",
            dir.display()
        )));
    }
    let frames = paths
        .iter()
        .map(|p| load_frame(p))
        .collect::<Result<Vec<_>, _>>()?;
    let clip_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("clip")
        .to_string();
    VideoClip::new(frames, 24.0, clip_id)
}

fn load_decoder(ckpt: &Path, ablation: Option<&str>) -> Result<(DenoiserNet, rem_core::vae::Autoencoder, MaskDecoder), Error> {
    let loaded = load_checkpoint(ckpt)?;
    let decoder = match ablation {
        None => MaskDecoder::Vae,
        Some("cnn-head") => {
            if loaded.head_tensors.is_empty() {
                return Err(Error::Checkpoint(
                    "checkpoint has no CNN head weights; train with --cnn-head first".into(),
                ));
            }
            let head = CnnHead::new(
                loaded.net.config.base_channels * loaded.net.config.channel_mults[0],
                loaded.ae.config.downsample_factor,
                loaded.net.config.dtype()?,
            )?;
            head.set_vars(&loaded.head_tensors)?;
            MaskDecoder::Cnn(head)
        }
        Some(other) => {
            return Err(Error::Param(format!(
                "unknown ablation '{other}' (expected cnn-head)"
            )))
        }
    };
    Ok((loaded.net, loaded.ae, decoder))
}

fn cmd_infer(a: &InferArgs, root: &Path, seed: u64) -> Result<(), Error> {
    let ckpt = resolve(root, &a.ckpt);
    let out = resolve(root, &a.out);
    let (net, ae, decoder) = load_decoder(&ckpt, None)?;
    let text = TextEncoder::new(Default::default())?;
    let clip = load_frames_dir(&resolve(root, &a.frames_dir))?;
    let params = InferParams {
        window: a.window,
        overlap: a.overlap,
        threshold: a.threshold,
    };
    for (ei, expr) in a.expr.iter().enumerate() {
        let masks = segment_video(&net, &ae, &text, &decoder, &clip, expr, &params)?;
        let dir = out.join(&clip.clip_id).join(ei.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (fi, m) in masks.masks.iter().enumerate() {
            let (h, w) = m.dim();
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([m[[y, x]] * 255]));
                }
            }
            let path = dir.join(format!("{fi:04}.png"));
            img.save(&path).map_err(|e| Error::Image { path, source: e })?;
        }
        if a.overlay {
            render_overlay(&clip, &masks, (255, 40, 40), &dir.join("overlay"))?;
        }
    }
    write_run_json(
        &out,
        "infer",
        serde_json::json!({
            "ckpt": ckpt,
            "frames_dir": a.frames_dir,
            "expr": a.expr,
            "window": a.window,
            "overlap": a.overlap,
            "threshold": a.threshold,
            "overlay": a.overlay,
        }),
        seed,
    )
}

fn cmd_eval(a: &EvalArgs, root: &Path, seed: u64) -> Result<(), Error> {
    let ckpt = resolve(root, &a.ckpt);
    let out = resolve(root, &a.out);
    let manifest = load_manifest(&resolve(root, &a.manifest))?;
    let (net, ae, decoder) = load_decoder(&ckpt, a.ablation.as_deref())?;
    let text = TextEncoder::new(Default::default())?;
    let cfg = EvalConfig {
        window: a.window,
        overlap: a.overlap,
        threshold: 0.5,
        dataset_name: a.dataset_name.clone(),
    };
    let report = evaluate_dataset(&net, &ae, &text, &decoder, &manifest, &cfg)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report.save_json(&out.join("report.json"))?;
    report.save_csv(&out.join("report.csv"))?;
    write_run_json(
        &out,
        "eval",
        serde_json::json!({
            "ckpt": ckpt,
            "manifest": a.manifest,
            "ablation": a.ablation,
            "window": a.window,
            "overlap": a.overlap,
            "dataset": a.dataset_name,
        }),
        seed,
    )
}
