//! The frozen autoencoder: a small convolutional VAE trained on synthetic
//! frames and broadcast mask images, then frozen for the rest of the
//! pipeline.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, Module, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::mask_to_rgb;
use crate::data::{load_sample, resize_frame_bilinear, DatasetManifest, VideoClip};
use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::train::AdamW;
use crate::util::{randn_seeded, sha256_file, tensor_checksum};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 4,
            latent_channels: 4,
            base_channels: 24,
        }
    }
}

struct EncoderNet {
    conv_in: Conv2d,
    down1: Conv2d,
    conv2: Conv2d,
    down2: Conv2d,
    conv3: Conv2d,
    conv_out: Conv2d,
}

struct DecoderNet {
    conv_in: Conv2d,
    conv2: Conv2d,
    up1: Conv2d,
    conv3: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

fn pad1() -> Conv2dConfig {
    Conv2dConfig {
        padding: 1,
        ..Default::default()
    }
}

fn pad1_stride2() -> Conv2dConfig {
    Conv2dConfig {
        padding: 1,
        stride: 2,
        ..Default::default()
    }
}

fn build_modules(cfg: &AutoencoderConfig, vb: &VarBuilder) -> Result<(EncoderNet, DecoderNet)> {
    let b = cfg.base_channels;
    let cz = cfg.latent_channels;
    let enc_vb = vb.pp("enc");
    let enc = EncoderNet {
        conv_in: conv2d(3, b, 3, pad1(), enc_vb.pp("conv_in"))?,
        down1: conv2d(b, b, 3, pad1_stride2(), enc_vb.pp("down1"))?,
        conv2: conv2d(b, 2 * b, 3, pad1(), enc_vb.pp("conv2"))?,
        down2: conv2d(2 * b, 2 * b, 3, pad1_stride2(), enc_vb.pp("down2"))?,
        conv3: conv2d(2 * b, 2 * b, 3, pad1(), enc_vb.pp("conv3"))?,
        conv_out: conv2d(2 * b, 2 * cz, 3, pad1(), enc_vb.pp("conv_out"))?,
    };
    let dec_vb = vb.pp("dec");
    let dec = DecoderNet {
        conv_in: conv2d(cz, 2 * b, 3, pad1(), dec_vb.pp("conv_in"))?,
        conv2: conv2d(2 * b, 2 * b, 3, pad1(), dec_vb.pp("conv2"))?,
        up1: conv2d(2 * b, b, 3, pad1(), dec_vb.pp("up1"))?,
        conv3: conv2d(b, b, 3, pad1(), dec_vb.pp("conv3"))?,
        up2: conv2d(b, b, 3, pad1(), dec_vb.pp("up2"))?,
        conv_out: conv2d(b, 3, 3, pad1(), dec_vb.pp("conv_out"))?,
    };
    Ok((enc, dec))
}

impl EncoderNet {
    /// `(N, 3, H, W)` in `[-1, 1]` to `(mean, logvar)`, each `(N, C_z, H/4, W/4)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
        let h = self.conv_in.forward(x)?.silu()?;
        let h = self.down1.forward(&h)?.silu()?;
        let h = self.conv2.forward(&h)?.silu()?;
        let h = self.down2.forward(&h)?.silu()?;
        let h = self.conv3.forward(&h)?.silu()?;
        let h = self.conv_out.forward(&h)?;
        let cz = h.dims()[1] / 2;
        let mean = h.narrow(1, 0, cz)?;
        let logvar = h.narrow(1, cz, cz)?.clamp(-30.0, 10.0)?;
        Ok((mean, logvar))
    }
}

impl DecoderNet {
    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let (h, w) = (z.dims()[2], z.dims()[3]);
        let x = self.conv_in.forward(z)?.silu()?;
        let x = self.conv2.forward(&x)?.silu()?;
        let x = x.upsample_nearest2d(2 * h, 2 * w)?;
        let x = self.up1.forward(&x)?.silu()?;
        let x = self.conv3.forward(&x)?.silu()?;
        let x = x.upsample_nearest2d(4 * h, 4 * w)?;
        let x = self.up2.forward(&x)?.silu()?;
        self.conv_out.forward(&x)
    }
}

/// The toy VAE. Trainable until [`Autoencoder::freeze`] is called, after
/// which the weights are detached constants and every mutating entry point
/// errors.
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    varmap: VarMap,
    enc: EncoderNet,
    dec: DecoderNet,
    frozen: bool,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let (enc, dec) = build_modules(&config, &vb)?;
        {
            let data = varmap.data().lock().unwrap();
            crate::util::deterministic_init(
                data.iter().map(|(n, v)| (n.as_str(), v)),
                0x41455f494e4954, // distinct stream per module kind
            )?;
        }
        Ok(Self {
            config,
            varmap,
            enc,
            dec,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.varmap
            .all_vars()
            .iter()
            .map(|v| v.elem_count())
            .sum()
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Tensor)> = data
            .iter()
            .map(|(name, var)| (name.clone(), var.as_tensor().clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn checksum(&self) -> Result<String> {
        let named = self.named_tensors();
        tensor_checksum(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Detaches all weights and rebuilds the modules on the detached copies,
    /// so no gradient ever flows into the autoencoder afterwards.
    pub fn freeze(self) -> Result<Self> {
        let detached: HashMap<String, Tensor> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.detach()))
            .collect();
        let vb = VarBuilder::from_tensors(detached, DType::F32, &Device::Cpu);
        let (enc, dec) = build_modules(&self.config, &vb)?;
        Ok(Self {
            enc,
            dec,
            frozen: true,
            ..self
        })
    }

    fn trainable_vars(&self) -> Result<Vec<(String, Var)>> {
        if self.frozen {
            return Err(Error::Frozen(
                "autoencoder parameters may not change after freezing".into(),
            ));
        }
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// Posterior parameters for input in `[-1, 1]`.
    pub fn encode_t(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok(self.enc.forward(x)?)
    }

    /// Decoder output in approximately `[-1, 1]`.
    pub fn decode_t(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.dec.forward(z)?)
    }
}

/// Stacks clip frames into a `(F, 3, H, W)` tensor with values in `[0, 1]`.
pub fn clip_to_tensor(clip: &VideoClip) -> Result<Tensor> {
    let (f, h, w) = (clip.len(), clip.height(), clip.width());
    let mut data = Vec::with_capacity(f * 3 * h * w);
    for frame in &clip.frames {
        data.extend(frame.iter().copied());
    }
    Ok(Tensor::from_vec(data, (f, 3, h, w), &Device::Cpu)?)
}

/// Encodes a clip into latents: pixels are mapped to `[-1, 1]`, each frame
/// is encoded to the posterior mean (deterministic, no sampling) and the
/// results are stacked over time.
pub fn encode_video(ae: &Autoencoder, clip: &VideoClip) -> Result<LatentTensor> {
    let f = ae.config.downsample_factor;
    if clip.height() % f != 0 || clip.width() % f != 0 {
        return Err(Error::Shape(format!(
            "clip dims {}x{} not divisible by downsample factor {f}",
            clip.height(),
            clip.width()
        )));
    }
    let x = clip_to_tensor(clip)?;
    let x = ((x * 2.0)? - 1.0)?;
    let (mean, _logvar) = ae.encode_t(&x)?;
    LatentTensor::new(mean)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_weight: f64,
    /// Training resolution (must be divisible by the downsample factor).
    pub resolution: (usize, usize),
    /// Number of images held out for the reconstruction bar.
    pub holdout: usize,
    pub min_psnr: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 4,
            lr: 1e-3,
            kl_weight: 1e-6,
            resolution: (64, 64),
            holdout: 8,
            min_psnr: 25.0,
            seed: 0,
        }
    }
}

fn gather_training_images(
    data: &DatasetManifest,
    resolution: (usize, usize),
) -> Result<Vec<Tensor>> {
    let mut images = Vec::new();
    for rec in &data.samples {
        let sample = load_sample(data, &rec.clip_id)?;
        for frame in &sample.clip.frames {
            let r = resize_frame_bilinear(frame, resolution);
            images.push(frame_tensor(&r)?);
        }
        let mask_clip = mask_to_rgb(&sample.gt)?;
        for frame in &mask_clip.frames {
            let r = resize_frame_bilinear(frame, resolution);
            images.push(frame_tensor(&r)?);
        }
    }
    Ok(images)
}

fn frame_tensor(frame: &ndarray::Array3<f32>) -> Result<Tensor> {
    let (c, h, w) = frame.dim();
    let data: Vec<f32> = frame.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?)
}

pub fn psnr(recon: &Tensor, target: &Tensor) -> Result<f64> {
    let mse = (recon - target)?
        .sqr()?
        .mean_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok(-10.0 * mse.max(1e-12).log10())
}

/// Trains the toy VAE on all frames and broadcast mask images of `data`,
/// verifies the held-out reconstruction bar and returns the model frozen.
pub fn train_toy_autoencoder(data: &DatasetManifest, cfg: &VaeTrainConfig) -> Result<Autoencoder> {
    if data.is_empty() {
        return Err(Error::Param("cannot train autoencoder on empty dataset".into()));
    }
    let mut images = gather_training_images(data, cfg.resolution)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    images.shuffle(&mut rng);
    let holdout = cfg.holdout.min(images.len().saturating_sub(1)).max(1);
    let held: Vec<Tensor> = images.split_off(images.len() - holdout);
    if images.is_empty() {
        return Err(Error::Param("not enough images to train on".into()));
    }

    let ae = Autoencoder::new(AutoencoderConfig::default())?;
    let vars = ae.trainable_vars()?;
    let mut opt = AdamW::new(vars.iter().map(|(_, v)| v.clone()).collect(), cfg.lr, 0.0);
    for step in 0..cfg.steps {
        let mut batch_rows = Vec::with_capacity(cfg.batch_size);
        let mut srng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15));
        for _ in 0..cfg.batch_size {
            let i = rand::Rng::random_range(&mut srng, 0..images.len());
            batch_rows.push(images[i].clone());
        }
        let x = Tensor::cat(&batch_rows, 0)?;
        let x = ((x * 2.0)? - 1.0)?;
        let (mean, logvar) = ae.encode_t(&x)?;
        let eps = randn_seeded(mean.dims(), DType::F32, cfg.seed ^ (0xabc0 + step as u64))?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?;
        let recon = ae.decode_t(&z)?;
        let rec_loss = (recon - &x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()?)? - &logvar)?
            .affine(0.5, -0.5)?
            .mean_all()?;
        let loss = (rec_loss + (kl * cfg.kl_weight)?)?;
        let loss_val = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_val.is_finite() {
            return Err(Error::Train {
                step,
                lr: cfg.lr,
                reason: format!("autoencoder loss diverged ({loss_val})"),
                batch: vec![],
            });
        }
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }

    let ae = ae.freeze()?;
    let held_x = Tensor::cat(&held, 0)?;
    let xin = ((&held_x * 2.0)? - 1.0)?;
    let (mean, _) = ae.encode_t(&xin)?;
    let recon = ae.decode_t(&mean)?;
    let recon01 = recon.affine(0.5, 0.5)?.clamp(0.0, 1.0)?;
    let got = psnr(&recon01, &held_x)?;
    if got < cfg.min_psnr {
        return Err(Error::Train {
            step: cfg.steps,
            lr: cfg.lr,
            reason: format!(
                "held-out reconstruction PSNR {got:.2} dB below the {:.1} dB bar",
                cfg.min_psnr
            ),
            batch: vec![],
        });
    }
    Ok(ae)
}

#[derive(Debug, Serialize, Deserialize)]
struct VaeSidecar {
    f: usize,
    c_z: usize,
    base_channels: usize,
    param_count: usize,
    frozen: bool,
    sha256: String,
}

/// Saves the frozen autoencoder as a safetensors blob plus JSON sidecar.
pub fn save_autoencoder(ae: &Autoencoder, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = dir.join("vae.safetensors");
    let named: HashMap<String, Tensor> = ae.named_tensors().into_iter().collect();
    candle_core::safetensors::save(&named, &blob)?;
    let sidecar = VaeSidecar {
        f: ae.config.downsample_factor,
        c_z: ae.config.latent_channels,
        base_channels: ae.config.base_channels,
        param_count: ae.param_count(),
        frozen: ae.frozen,
        sha256: sha256_file(&blob)?,
    };
    let sc_path = dir.join("vae.json");
    std::fs::write(&sc_path, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|e| Error::io(&sc_path, e))
}

/// Loads a frozen autoencoder, verifying the blob checksum in the sidecar.
pub fn load_autoencoder(dir: &Path) -> Result<Autoencoder> {
    let blob = dir.join("vae.safetensors");
    let sc_path = dir.join("vae.json");
    let sidecar: VaeSidecar = serde_json::from_str(
        &std::fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?,
    )?;
    let got = sha256_file(&blob)?;
    if got != sidecar.sha256 {
        return Err(Error::Checkpoint(format!(
            "autoencoder blob checksum mismatch: {got} != {}",
            sidecar.sha256
        )));
    }
    let tensors = candle_core::safetensors::load(&blob, &Device::Cpu)?;
    let config = AutoencoderConfig {
        downsample_factor: sidecar.f,
        latent_channels: sidecar.c_z,
        base_channels: sidecar.base_channels,
    };
    let ae = Autoencoder::new(config)?;
    {
        let mut data = ae.varmap.data().lock().unwrap();
        for (name, var) in data.iter_mut() {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("autoencoder blob is missing tensor '{name}'"))
            })?;
            var.set(t)?;
        }
    }
    ae.freeze()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VideoClip;
    use ndarray::Array3;

    #[test]
    fn encode_shape_arithmetic() {
        let ae = Autoencoder::new(AutoencoderConfig::default()).unwrap();
        let clip = VideoClip::new(
            vec![Array3::from_elem((3, 64, 64), 0.5f32); 8],
            24.0,
            "c",
        )
        .unwrap();
        let z = encode_video(&ae, &clip).unwrap();
        assert_eq!(z.dims(), (8, 4, 16, 16));
    }

    #[test]
    fn encoding_is_deterministic() {
        let ae = Autoencoder::new(AutoencoderConfig::default()).unwrap();
        let clip = VideoClip::new(
            vec![Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
                ((c + y + x) % 7) as f32 / 7.0
            })],
            24.0,
            "c",
        )
        .unwrap();
        let a: Vec<f32> = encode_video(&ae, &clip)
            .unwrap()
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let b: Vec<f32> = encode_video(&ae, &clip)
            .unwrap()
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let ae = Autoencoder::new(AutoencoderConfig::default()).unwrap();
        let clip = VideoClip::new(
            vec![Array3::from_elem((3, 30, 30), 0.5f32)],
            24.0,
            "c",
        )
        .unwrap();
        assert!(matches!(encode_video(&ae, &clip), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_model_rejects_parameter_changes() {
        let ae = Autoencoder::new(AutoencoderConfig::default())
            .unwrap()
            .freeze()
            .unwrap();
        assert!(ae.is_frozen());
        assert!(matches!(ae.trainable_vars(), Err(Error::Frozen(_))));
    }

    #[test]
    fn checksum_survives_freeze_and_roundtrip() {
        let ae = Autoencoder::new(AutoencoderConfig::default()).unwrap();
        let before = ae.checksum().unwrap();
        let ae = ae.freeze().unwrap();
        assert_eq!(ae.checksum().unwrap(), before);

        let dir = tempfile::tempdir().unwrap();
        save_autoencoder(&ae, dir.path()).unwrap();
        let back = load_autoencoder(dir.path()).unwrap();
        assert_eq!(back.checksum().unwrap(), before);
        assert!(back.is_frozen());
    }

    #[test]
    fn corrupt_checkpoint_detected() {
        let ae = Autoencoder::new(AutoencoderConfig::default())
            .unwrap()
            .freeze()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_autoencoder(&ae, dir.path()).unwrap();
        // truncate the blob
        let blob = dir.path().join("vae.safetensors");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_autoencoder(dir.path()),
            Err(Error::Checkpoint(_))
        ));
    }
}
