//! Training engine: a name-aware AdamW, the latent-supervision and
//! denoising losses, the staged training loops, and resumable checkpoints.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::encode_mask;
use crate::data::{
    image_to_pseudo_video, load_sample, resize_sample, sample_training_window, AugParams,
    DatasetManifest, Modality, ReferralSample,
};
use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::metrics::{evaluate_dataset, EvalConfig};
use crate::schedule::{build_schedule, forward_diffuse, NoiseSchedule};
use crate::text::{TextEmbedding, TextEncoder};
use crate::unet::{load_denoiser, save_denoiser, CnnHead, DenoiserNet, DenoiserSidecar};
use crate::util::randn_seeded;
use crate::vae::{encode_video, load_autoencoder, save_autoencoder, Autoencoder};

/// AdamW with decoupled weight decay. Implemented here (rather than reusing
/// an off-the-shelf optimizer) so the first/second moments are named
/// tensors that round-trip bit-exactly through checkpoints.
pub struct AdamW {
    named: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Self {
        let named = vars
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("p{i}"), v))
            .collect();
        Self::from_named(named, lr, weight_decay)
    }

    pub fn new_named(named: Vec<(String, Var)>, lr: f64, weight_decay: f64) -> Self {
        Self::from_named(named, lr, weight_decay)
    }

    fn from_named(named: Vec<(String, Var)>, lr: f64, weight_decay: f64) -> Self {
        Self {
            named,
            m: Vec::new(),
            v: Vec::new(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    fn ensure_moments(&mut self) -> Result<()> {
        if self.m.is_empty() {
            for (_, var) in &self.named {
                self.m.push(var.zeros_like()?);
                self.v.push(var.zeros_like()?);
            }
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.ensure_moments()?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.named.iter().enumerate() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue; // parameter not in this step's graph
            };
            // detach so the moments don't retain each step's autograd graph
            let grad = grad.detach();
            let m = ((&self.m[i] * self.beta1)? + (&grad * (1.0 - self.beta1))?)?.detach();
            let v = ((&self.v[i] * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut delta = (update * self.lr)?;
            if self.weight_decay != 0.0 {
                delta = (delta + (var.as_tensor() * (self.lr * self.weight_decay))?)?;
            }
            var.set(&(var.as_tensor() - delta)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// Named moment tensors ("m.{param}", "v.{param}") for checkpoints.
    pub fn moments(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        if self.m.is_empty() {
            return Ok(out);
        }
        for (i, (name, _)) in self.named.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[i].clone());
            out.insert(format!("v.{name}"), self.v[i].clone());
        }
        Ok(out)
    }

    /// Restores moments saved by [`AdamW::moments`], matching by name.
    pub fn load_moments(&mut self, moments: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        if moments.is_empty() {
            self.t = step;
            return Ok(());
        }
        self.ensure_moments()?;
        for (i, (name, _)) in self.named.iter().enumerate() {
            let m = moments
                .get(&format!("m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment m.{name}")))?;
            let v = moments
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment v.{name}")))?;
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        self.t = step;
        Ok(())
    }
}

/// Mean squared error over all elements; shapes must match.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mse shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// The latent supervision loss: MSE between the net's prediction at the
/// clean timestep and the encoded ground-truth mask latents.
pub fn mask_latent_loss(pred: &LatentTensor, target: &LatentTensor) -> Result<Tensor> {
    mse(pred.tensor(), target.tensor())
}

/// Numerically stable binary cross-entropy on logits, averaged over all
/// elements.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "bce shape mismatch: {:?} vs {:?}",
            logits.dims(),
            target.dims()
        )));
    }
    // max(x, 0) - x*y + ln(1 + exp(-|x|))
    let log1p = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * target)?)? + log1p)?.mean_all()?)
}

/// Ground-truth masks as a `(F, 1, H, W)` float tensor for the pixel-space
/// head loss.
fn mask_target(gt: &crate::data::MaskSequence, dtype: DType) -> Result<Tensor> {
    let f = gt.len();
    let (h, w) = (gt.height(), gt.width());
    let mut data = Vec::with_capacity(f * h * w);
    for m in &gt.masks {
        data.extend(m.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (f, 1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// The standard denoising objective: noise `z0` to timestep `t` with `eps`
/// and regress the net's output onto `eps`.
pub fn denoising_loss(
    net: &DenoiserNet,
    z0: &LatentTensor,
    text: &TextEmbedding,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let zt = forward_diffuse(z0, t, eps, sched)?;
    let pred = net.denoise(&zt, text, t)?;
    mse(
        pred.tensor(),
        &eps.tensor().to_dtype(pred.tensor().dtype())?,
    )
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Optional denoising warm-up on the standard objective.
    Pretrain,
    /// Spatial weights only, on image data expanded to pseudo-videos.
    Stage1,
    /// All weights, on a joint video + image mixture.
    Stage2,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Stage1 => 2,
            Stage::Stage2 => 3,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Pretrain => write!(f, "pretrain"),
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage2 => write!(f, "stage2"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStop {
    pub target_j: f64,
    pub check_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub window: usize,
    pub max_steps: usize,
    /// Optional epoch cap; an epoch is `ceil(n_samples / batch_size)` steps.
    pub epochs: Option<usize>,
    /// Stage-2 probability of drawing a slot from the image stream.
    pub image_mix: f64,
    pub resolution: (usize, usize),
    pub seed: u64,
    /// Timesteps of the noise schedule used by the pretrain stage.
    pub t_max: usize,
    pub log_every: usize,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_default(Stage::Stage2)
    }
}

impl TrainConfig {
    pub fn desk_default(stage: Stage) -> Self {
        Self {
            stage,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 2,
            window: 8,
            max_steps: 2000,
            epochs: if stage == Stage::Stage1 { Some(1) } else { None },
            image_mix: 0.5,
            resolution: (64, 64),
            seed: 0,
            t_max: 1000,
            log_every: 25,
            early_stop: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 || self.max_steps == 0 {
            return Err(Error::Param(
                "batch_size, window and max_steps must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Param(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.image_mix) {
            return Err(Error::Param(format!("image_mix {} not in [0, 1]", self.image_mix)));
        }
        Ok(())
    }
}

/// Serializable position in a training run; enough, together with the
/// checkpointed parameters and moments, to resume bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub last_loss: f64,
    pub opt_step: usize,
}

pub struct ResumePoint {
    pub state: TrainState,
    pub moments: HashMap<String, Tensor>,
}

// splitmix64-style mixer: every (run seed, stage, step) pair gets an
// independent stream, so resuming at step k replays steps k.. exactly.
fn derive_seed(seed: u64, tag: u64, step: u64) -> u64 {
    let mut x = seed
        ^ tag.wrapping_mul(0x9e3779b97f4a7c15)
        ^ step.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    x
}

/// Draws one training example: a window of `cfg.window` frames at the
/// training resolution plus one of its expressions, ready to encode.
fn draw_sample(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    downsample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ReferralSample, String)> {
    if manifest.samples.is_empty() {
        return Err(Error::Param("training manifest is empty".into()));
    }
    let idx = rng.random_range(0..manifest.samples.len());
    let clip_id = manifest.samples[idx].clip_id.clone();
    let sample = load_sample(manifest, &clip_id)?;
    let sample = match manifest.modality {
        Modality::Image => image_to_pseudo_video(
            &sample.clip.frames[0],
            &sample.gt.masks[0],
            sample.expressions.clone(),
            sample.concept.clone(),
            cfg.window,
            &AugParams::default(),
            rng.random(),
        )?,
        Modality::Video => sample_training_window(&sample, cfg.window, rng.random())?,
    };
    let sample = resize_sample(&sample, cfg.resolution, downsample)?;
    let expr = sample.expressions[rng.random_range(0..sample.expressions.len())].clone();
    Ok((sample, expr))
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Runs one training stage. `data` is the stage's primary manifest
/// (image-modality for stage 1); `image_data` is the extra image stream
/// mixed into stage-2 batches; `val` enables early stopping when
/// configured; `head` switches supervision from mask latents to the
/// pixel-space BCE of the jointly-trained CNN decoder head (the ablation
/// path; early stopping is disabled so budgets stay comparable). Frozen
/// components (autoencoder, text tables, and the temporal weights in
/// stage 1) are checksum-verified after the loop.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser_with_head(
    net: &DenoiserNet,
    ae: &Autoencoder,
    text: &TextEncoder,
    data: &DatasetManifest,
    image_data: Option<&DatasetManifest>,
    val: Option<&DatasetManifest>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<ResumePoint>,
    head: Option<&CnnHead>,
) -> Result<TrainState> {
    cfg.validate()?;
    if !ae.is_frozen() {
        return Err(Error::Frozen(
            "denoiser training requires a frozen autoencoder".into(),
        ));
    }
    if cfg.stage == Stage::Stage1 && data.modality != Modality::Image {
        return Err(Error::Param(
            "stage 1 trains on image-modality data only".into(),
        ));
    }
    if data.samples.is_empty() {
        return Err(Error::Param("training manifest is empty".into()));
    }

    let mut params = match cfg.stage {
        Stage::Stage1 => net.spatial_parameters(),
        Stage::Pretrain | Stage::Stage2 => net.named_vars(),
    };
    if let Some(h) = head {
        if cfg.stage == Stage::Pretrain {
            return Err(Error::Param(
                "the CNN head has no role in denoising pretraining".into(),
            ));
        }
        params.extend(
            h.named_vars()
                .into_iter()
                .map(|(n, v)| (format!("head.{n}"), v)),
        );
    }
    let frozen_temporal = match cfg.stage {
        Stage::Stage1 => {
            let t = net.temporal_parameters();
            Some((net.checksum_of(&t)?, t))
        }
        _ => None,
    };
    let ae_sum = ae.checksum()?;
    let text_sum = text.checksum()?;

    let mut opt = AdamW::new_named(params, cfg.lr, cfg.weight_decay);
    let mut start_step = 0usize;
    if let Some(r) = resume {
        if r.state.stage != cfg.stage {
            return Err(Error::Checkpoint(format!(
                "checkpoint is from stage {}, config asks for {}",
                r.state.stage, cfg.stage
            )));
        }
        opt.load_moments(&r.moments, r.state.opt_step)?;
        start_step = r.state.step;
    }

    let sched = build_schedule(cfg.t_max, 1e-4, 0.02)?;
    let steps_per_epoch = data.samples.len().div_ceil(cfg.batch_size);
    let total_steps = match cfg.epochs {
        Some(e) => cfg.max_steps.min(e.max(1) * steps_per_epoch),
        None => cfg.max_steps,
    };
    let downsample = ae.config.downsample_factor;

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };

    let mut state = TrainState {
        stage: cfg.stage,
        step: start_step,
        epoch: start_step / steps_per_epoch,
        seed: cfg.seed,
        last_loss: f64::NAN,
        opt_step: opt.step_count(),
    };

    for step in start_step..total_steps {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, cfg.stage.tag(), step as u64));
        let mut batch_ids = Vec::with_capacity(cfg.batch_size);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let source = match (cfg.stage, image_data) {
                (Stage::Stage2, Some(imgs)) if rng.random_bool(cfg.image_mix) => imgs,
                _ => data,
            };
            let (sample, expr) = draw_sample(source, cfg, downsample, &mut rng)?;
            batch_ids.push(sample.clip.clip_id.clone());
            let e_c = text.encode(&expr)?;
            let z0 = encode_video(ae, &sample.clip)?;
            let loss = match cfg.stage {
                Stage::Pretrain => {
                    let t = rng.random_range(1..=sched.max_timestep());
                    let eps = LatentTensor::new(randn_seeded(
                        &[
                            z0.dims().0,
                            z0.dims().1,
                            z0.dims().2,
                            z0.dims().3,
                        ],
                        z0.tensor().dtype(),
                        rng.random(),
                    )?)?;
                    denoising_loss(net, &z0, &e_c, t, &eps, &sched)?
                }
                Stage::Stage1 | Stage::Stage2 => match head {
                    None => {
                        let zm = encode_mask(ae, &sample.gt)?;
                        let pred = net.denoise(&z0, &e_c, 0)?;
                        mse(pred.tensor(), &zm.tensor().detach())?
                    }
                    Some(h) => {
                        let (_, features) = net.forward_features(&z0, &e_c, 0)?;
                        let logits = h.forward(&features)?;
                        let target = mask_target(&sample.gt, logits.dtype())?;
                        bce_with_logits(&logits, &target)?
                    }
                },
            };
            losses.push(loss);
        }
        let refs: Vec<&Tensor> = losses.iter().collect();
        let loss = Tensor::stack(&refs, 0)?.mean_all()?;
        let loss_val = scalar_f64(&loss)?;
        if !loss_val.is_finite() {
            return Err(Error::Train {
                step,
                lr: cfg.lr,
                reason: format!("non-finite loss {loss_val}"),
                batch: batch_ids,
            });
        }
        let grads = loss.backward()?;
        opt.step(&grads)?;

        state.step = step + 1;
        state.epoch = state.step / steps_per_epoch;
        state.last_loss = loss_val;
        state.opt_step = opt.step_count();

        if let Some(f) = log.as_mut() {
            if step % cfg.log_every == 0 || step + 1 == total_steps {
                let line = serde_json::json!({
                    "step": step,
                    "stage": cfg.stage.to_string(),
                    "loss": loss_val,
                    "lr": cfg.lr,
                    "wall_ms": t0.elapsed().as_millis() as u64,
                });
                writeln!(f, "{line}").map_err(|e| Error::io(Path::new("train_log.jsonl"), e))?;
            }
        }

        if let (Some(es), Some(val), None) = (&cfg.early_stop, val, head) {
            if state.step % es.check_every.max(1) == 0 {
                let eval_cfg = EvalConfig {
                    window: cfg.window,
                    overlap: cfg.window / 2,
                    ..EvalConfig::default()
                };
                let report = evaluate_dataset(
                    net,
                    ae,
                    text,
                    &crate::infer::MaskDecoder::Vae,
                    val,
                    &eval_cfg,
                )?;
                if report.j >= es.target_j {
                    break;
                }
            }
        }
    }

    if ae.checksum()? != ae_sum {
        return Err(Error::Frozen("autoencoder changed during training".into()));
    }
    if text.checksum()? != text_sum {
        return Err(Error::Frozen("text tables changed during training".into()));
    }
    if let Some((sum, t)) = frozen_temporal {
        if net.checksum_of(&t)? != sum {
            return Err(Error::Frozen(
                "temporal weights changed during stage 1".into(),
            ));
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(dir, net, &opt, ae, text, &state, head)?;
    }
    Ok(state)
}

/// [`train_denoiser_with_head`] on the default latent-supervision path.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    net: &DenoiserNet,
    ae: &Autoencoder,
    text: &TextEncoder,
    data: &DatasetManifest,
    image_data: Option<&DatasetManifest>,
    val: Option<&DatasetManifest>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<ResumePoint>,
) -> Result<TrainState> {
    train_denoiser_with_head(net, ae, text, data, image_data, val, cfg, out_dir, resume, None)
}

/// Writes the full checkpoint bundle: denoiser parameters plus optimizer
/// moments (and CNN head weights when present), autoencoder, and the
/// training state.
pub fn save_checkpoint(
    dir: &Path,
    net: &DenoiserNet,
    opt: &AdamW,
    ae: &Autoencoder,
    text: &TextEncoder,
    state: &TrainState,
    head: Option<&CnnHead>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut extra = HashMap::new();
    for (k, v) in opt.moments()? {
        extra.insert(format!("opt.{k}"), v);
    }
    if let Some(h) = head {
        for (n, v) in h.named_vars() {
            extra.insert(format!("head.{n}"), v.as_tensor().clone());
        }
    }
    save_denoiser(net, &extra, &text.checksum()?, dir)?;
    save_autoencoder(ae, dir)?;
    let state_path = dir.join("state.json");
    std::fs::write(&state_path, serde_json::to_string_pretty(state)?)
        .map_err(|e| Error::io(&state_path, e))
}

pub struct LoadedCheckpoint {
    pub net: DenoiserNet,
    pub ae: Autoencoder,
    pub state: TrainState,
    pub moments: HashMap<String, Tensor>,
    /// CNN head weights, present when the checkpoint was trained on the
    /// ablation path.
    pub head_tensors: HashMap<String, Tensor>,
    pub sidecar: DenoiserSidecar,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let (net, extra, sidecar) = load_denoiser(dir)?;
    let ae = load_autoencoder(dir)?;
    let state_path = dir.join("state.json");
    let state: TrainState = serde_json::from_str(
        &std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?,
    )?;
    let mut moments = HashMap::new();
    let mut head_tensors = HashMap::new();
    for (k, v) in extra {
        if let Some(s) = k.strip_prefix("opt.") {
            moments.insert(s.to_string(), v);
        } else if let Some(s) = k.strip_prefix("head.") {
            head_tensors.insert(s.to_string(), v);
        }
    }
    Ok(LoadedCheckpoint {
        net,
        ae,
        state,
        moments,
        head_tensors,
        sidecar,
    })
}
