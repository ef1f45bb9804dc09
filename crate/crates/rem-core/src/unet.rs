//! The text-conditioned spatio-temporal denoising U-Net, its timestep
//! embedding, the spatial/temporal parameter partition, and the CNN decoder
//! head used by the ablation path.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Init, Linear, Module, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::text::TextEmbedding;
use crate::util::{sha256_file, tensor_checksum};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Levels with spatial self-attention.
    pub self_attn_levels: Vec<usize>,
    /// Levels with cross-attention to the text embedding; must be non-empty.
    pub cross_attn_levels: Vec<usize>,
    /// Toggles the per-pixel frame-axis attention blocks.
    pub temporal: bool,
    pub d_text: usize,
    pub time_dim: usize,
    pub num_groups: usize,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f32".into()
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            self_attn_levels: vec![2],
            cross_attn_levels: vec![1, 2],
            temporal: true,
            d_text: 64,
            time_dim: 64,
            num_groups: 8,
            dtype: "f32".into(),
        }
    }
}

impl DenoiserConfig {
    /// A deliberately tiny double-precision variant for finite-difference
    /// gradient checks.
    pub fn tiny_f64() -> Self {
        Self {
            latent_channels: 2,
            base_channels: 4,
            channel_mults: vec![1, 2],
            self_attn_levels: vec![1],
            cross_attn_levels: vec![1],
            temporal: true,
            d_text: 8,
            time_dim: 8,
            num_groups: 2,
            dtype: "f64".into(),
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Param(format!("unsupported dtype '{other}'"))),
        }
    }

    fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() {
            return Err(Error::Param("channel_mults must be non-empty".into()));
        }
        if self.cross_attn_levels.is_empty() {
            return Err(Error::Param(
                "at least one level must use cross-attention".into(),
            ));
        }
        for &l in self.cross_attn_levels.iter().chain(&self.self_attn_levels) {
            if l >= self.levels() {
                return Err(Error::Param(format!(
                    "attention level {l} out of range for {} levels",
                    self.levels()
                )));
            }
        }
        for level in 0..self.levels() {
            if self.channels(level) % self.num_groups != 0 {
                return Err(Error::Param(format!(
                    "channels at level {level} not divisible by num_groups"
                )));
            }
        }
        Ok(())
    }
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

fn conv2d_zero(in_c: usize, out_c: usize, k: usize, cfg: Conv2dConfig, vb: VarBuilder) -> Result<Conv2d> {
    let weight = vb.get_with_hints((out_c, in_c, k, k), "weight", Init::Const(0.0))?;
    let bias = vb.get_with_hints(out_c, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(weight, Some(bias), cfg))
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(in_c: usize, out_c: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        let groups = cfg.num_groups.min(in_c);
        Ok(Self {
            norm1: group_norm(groups, in_c, 1e-5, vb.pp("norm1"))?,
            conv1: conv2d(in_c, out_c, 3, pad1(), vb.pp("conv1"))?,
            time_proj: linear(cfg.time_dim, out_c, vb.pp("time_proj"))?,
            norm2: group_norm(cfg.num_groups.min(out_c), out_c, 1e-5, vb.pp("norm2"))?,
            conv2: conv2d(out_c, out_c, 3, pad1(), vb.pp("conv2"))?,
            skip: if in_c != out_c {
                Some(conv2d(in_c, out_c, 1, Conv2dConfig::default(), vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, t_emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        // (1, out_c) -> (1, out_c, 1, 1), broadcast over frames and space
        let t = self.time_proj.forward(&t_emb.silu()?)?;
        let t = t.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let x = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        x + h
    }
}

/// Single-head attention weights over channel dim `c` with keys/values of
/// width `kv_dim`.
struct AttnWeights {
    norm: GroupNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    scale: f64,
}

impl AttnWeights {
    fn new(c: usize, kv_dim: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: group_norm(groups.min(c), c, 1e-5, vb.pp("norm"))?,
            wq: linear(c, c, vb.pp("wq"))?,
            wk: linear(kv_dim, c, vb.pp("wk"))?,
            wv: linear(kv_dim, c, vb.pp("wv"))?,
            wo: linear(c, c, vb.pp("wo"))?,
            scale: 1.0 / (c as f64).sqrt(),
        })
    }

    /// q: (b, n, c); kv: (b, m, kv_dim) or (m, kv_dim) broadcast over b.
    fn attend(&self, q_in: &Tensor, kv: &Tensor) -> candle_core::Result<Tensor> {
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv)?;
        let v = self.wv.forward(kv)?;
        let kt = k.transpose(D::Minus2, D::Minus1)?.contiguous()?;
        let scores = (q.broadcast_matmul(&kt)? * self.scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.broadcast_matmul(&v.contiguous()?)?;
        self.wo.forward(&out)
    }
}

/// Spatial self- or cross-attention over the `(h*w)` token axis of each
/// frame, residual.
struct SpatialAttn {
    weights: AttnWeights,
    cross: bool,
}

impl SpatialAttn {
    fn forward(&self, x: &Tensor, text: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let (f, c, h, w) = x.dims4()?;
        let n = self.weights.norm.forward(x)?;
        let tokens = n.reshape((f, c, h * w))?.transpose(1, 2)?.contiguous()?; // (f, hw, c)
        let out = match (self.cross, text) {
            (true, Some(e)) => self.weights.attend(&tokens, e)?,
            (false, _) => self.weights.attend(&tokens, &tokens)?,
            (true, None) => {
                return Err(candle_core::Error::Msg(
                    "cross-attention block called without text".into(),
                ))
            }
        };
        let out = out.transpose(1, 2)?.reshape((f, c, h, w))?;
        x + out
    }
}

/// Per-pixel attention across the frame axis; the temporal mixing blocks
/// whose parameters form the "temporal" group of the partition.
struct TemporalAttn {
    weights: AttnWeights,
}

impl TemporalAttn {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (f, c, h, w) = x.dims4()?;
        let n = self.weights.norm.forward(x)?;
        // (f, c, h, w) -> (h*w, f, c)
        let tokens = n
            .permute((2, 3, 0, 1))?
            .contiguous()?
            .reshape((h * w, f, c))?;
        let out = self.weights.attend(&tokens, &tokens)?;
        let out = out
            .reshape((h, w, f, c))?
            .permute((2, 3, 0, 1))?
            .contiguous()?;
        x + out
    }
}

struct LevelBlocks {
    res: ResBlock,
    self_attn: Option<SpatialAttn>,
    cross_attn: Option<SpatialAttn>,
    temporal: Option<TemporalAttn>,
}

impl LevelBlocks {
    fn new(in_c: usize, out_c: usize, level: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        let g = cfg.num_groups;
        Ok(Self {
            res: ResBlock::new(in_c, out_c, cfg, vb.pp("res"))?,
            self_attn: if cfg.self_attn_levels.contains(&level) {
                Some(SpatialAttn {
                    weights: AttnWeights::new(out_c, out_c, g, vb.pp("self_attn"))?,
                    cross: false,
                })
            } else {
                None
            },
            cross_attn: if cfg.cross_attn_levels.contains(&level) {
                Some(SpatialAttn {
                    weights: AttnWeights::new(out_c, cfg.d_text, g, vb.pp("cross_attn"))?,
                    cross: true,
                })
            } else {
                None
            },
            temporal: if cfg.temporal {
                Some(TemporalAttn {
                    weights: AttnWeights::new(out_c, out_c, g, vb.pp("temporal"))?,
                })
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, t_emb: &Tensor, text: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = self.res.forward(x, t_emb)?;
        if let Some(a) = &self.self_attn {
            x = a.forward(&x, None)?;
        }
        if let Some(a) = &self.cross_attn {
            x = a.forward(&x, Some(text))?;
        }
        if let Some(t) = &self.temporal {
            x = t.forward(&x)?;
        }
        Ok(x)
    }
}

struct Modules {
    conv_in: Conv2d,
    time_mlp1: Linear,
    time_mlp2: Linear,
    down: Vec<LevelBlocks>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_temporal: Option<TemporalAttn>,
    mid2: ResBlock,
    up: Vec<LevelBlocks>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

fn build_modules(cfg: &DenoiserConfig, vb: &VarBuilder) -> Result<Modules> {
    let levels = cfg.levels();
    let c0 = cfg.channels(0);
    let mut down = Vec::new();
    let mut downsample = Vec::new();
    for i in 0..levels {
        let in_c = if i == 0 { c0 } else { cfg.channels(i - 1) };
        down.push(LevelBlocks::new(
            in_c,
            cfg.channels(i),
            i,
            cfg,
            vb.pp(format!("down.{i}")),
        )?);
        if i + 1 < levels {
            downsample.push(conv2d(
                cfg.channels(i),
                cfg.channels(i),
                3,
                pad1_stride2(),
                vb.pp(format!("downsample.{i}")),
            )?);
        }
    }
    let c_last = cfg.channels(levels - 1);
    let mut up = Vec::new();
    let mut upsample = Vec::new();
    for i in (0..levels).rev() {
        up.push(LevelBlocks::new(
            2 * cfg.channels(i),
            cfg.channels(i),
            i,
            cfg,
            vb.pp(format!("up.{i}")),
        )?);
        if i > 0 {
            upsample.push(conv2d(
                cfg.channels(i),
                cfg.channels(i - 1),
                3,
                pad1(),
                vb.pp(format!("upsample.{i}")),
            )?);
        }
    }
    Ok(Modules {
        conv_in: conv2d(cfg.latent_channels, c0, 3, pad1(), vb.pp("conv_in"))?,
        time_mlp1: linear(cfg.time_dim, cfg.time_dim, vb.pp("time_mlp1"))?,
        time_mlp2: linear(cfg.time_dim, cfg.time_dim, vb.pp("time_mlp2"))?,
        down,
        downsample,
        mid1: ResBlock::new(c_last, c_last, cfg, vb.pp("mid1"))?,
        mid_temporal: if cfg.temporal {
            Some(TemporalAttn {
                weights: AttnWeights::new(c_last, c_last, cfg.num_groups, vb.pp("mid.temporal"))?,
            })
        } else {
            None
        },
        mid2: ResBlock::new(c_last, c_last, cfg, vb.pp("mid2"))?,
        up,
        upsample,
        norm_out: group_norm(cfg.num_groups.min(c0), c0, 1e-5, vb.pp("norm_out"))?,
        // zero-initialized so the untrained net predicts zero latents
        conv_out: conv2d_zero(c0, cfg.latent_channels, 3, pad1(), vb.pp("conv_out"))?,
    })
}

/// The denoising network. Input and output latents share the shape
/// `(frames, C_z, h, w)`.
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    varmap: VarMap,
    modules: Modules,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, config.dtype()?, &Device::Cpu);
        let modules = build_modules(&config, &vb)?;
        {
            let data = varmap.data().lock().unwrap();
            crate::util::deterministic_init(
                data.iter().map(|(n, v)| (n.as_str(), v)),
                0x554e45545f494e49,
            )?;
        }
        Ok(Self {
            config,
            varmap,
            modules,
        })
    }

    pub fn param_count(&self) -> usize {
        self.varmap.all_vars().iter().map(|v| v.elem_count()).sum()
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data.iter().map(|(n, v)| (n.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn is_temporal_name(name: &str) -> bool {
        name.split('.').any(|seg| seg == "temporal")
    }

    /// Parameters outside the temporal mixing blocks.
    pub fn spatial_parameters(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(n, _)| !Self::is_temporal_name(n))
            .collect()
    }

    /// Parameters of the temporal mixing blocks only.
    pub fn temporal_parameters(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(n, _)| Self::is_temporal_name(n))
            .collect()
    }

    pub fn checksum(&self) -> Result<String> {
        let named = self.named_vars();
        tensor_checksum(named.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }

    pub fn checksum_of(&self, params: &[(String, Var)]) -> Result<String> {
        tensor_checksum(params.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }

    fn time_embedding(&self, t: usize) -> Result<Tensor> {
        let dim = self.config.time_dim;
        let half = dim / 2;
        let mut data = vec![0f64; dim];
        for i in 0..half {
            let freq = (10000f64).powf(-(i as f64) / half as f64);
            data[i] = (t as f64 * freq).sin();
            data[half + i] = (t as f64 * freq).cos();
        }
        let emb = Tensor::from_vec(data, (1, dim), &Device::Cpu)?.to_dtype(self.config.dtype()?)?;
        let h = self.modules.time_mlp1.forward(&emb)?.silu()?;
        Ok(self.modules.time_mlp2.forward(&h)?)
    }

    /// U-Net forward pass returning both the predicted latents and the
    /// finest-level decoder features feeding the CNN ablation head.
    pub fn forward_features(
        &self,
        z: &LatentTensor,
        text: &TextEmbedding,
        t: usize,
    ) -> Result<(LatentTensor, Tensor)> {
        let (_, c, _, _) = z.dims();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, config expects {}",
                self.config.latent_channels
            )));
        }
        let dtype = self.config.dtype()?;
        let x = z.tensor().to_dtype(dtype)?;
        let e_c = text.values.to_dtype(dtype)?;
        if e_c.dims()[1] != self.config.d_text {
            return Err(Error::Shape(format!(
                "text embedding dim {} does not match d_text {}",
                e_c.dims()[1],
                self.config.d_text
            )));
        }
        let t_emb = self.time_embedding(t)?;
        let m = &self.modules;

        let mut x = m.conv_in.forward(&x)?;
        let mut skips = Vec::new();
        for (i, level) in m.down.iter().enumerate() {
            x = level.forward(&x, &t_emb, &e_c)?;
            skips.push(x.clone());
            if i < m.downsample.len() {
                x = m.downsample[i].forward(&x)?;
            }
        }
        x = m.mid1.forward(&x, &t_emb)?;
        if let Some(tm) = &m.mid_temporal {
            x = tm.forward(&x)?;
        }
        x = m.mid2.forward(&x, &t_emb)?;

        let levels = m.down.len();
        for (j, level) in m.up.iter().enumerate() {
            let i = levels - 1 - j; // actual level index
            let skip = &skips[i];
            x = Tensor::cat(&[&x, skip], 1)?;
            x = level.forward(&x, &t_emb, &e_c)?;
            if i > 0 {
                let (_, _, h, w) = x.dims4()?;
                x = x.upsample_nearest2d(2 * h, 2 * w)?;
                x = m.upsample[j].forward(&x)?;
            }
        }
        let features = x.clone();
        let out = m.conv_out.forward(&m.norm_out.forward(&x)?.silu()?)?;
        Ok((LatentTensor::new(out)?, features))
    }

    /// Predicts output latents for input latents, conditioning text and
    /// timestep; shape-preserving.
    pub fn denoise(&self, z: &LatentTensor, text: &TextEmbedding, t: usize) -> Result<LatentTensor> {
        Ok(self.forward_features(z, text, t)?.0)
    }
}

/// Task-specific convolutional decoder head: maps finest-level U-Net
/// features to full-resolution single-channel mask logits. Trained jointly,
/// never frozen.
pub struct CnnHead {
    varmap: VarMap,
    in_channels: usize,
    upsample_factor: usize,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl CnnHead {
    pub fn new(in_channels: usize, upsample_factor: usize, dtype: DType) -> Result<Self> {
        if !upsample_factor.is_power_of_two() || upsample_factor == 0 {
            return Err(Error::Param(format!(
                "upsample factor {upsample_factor} must be a power of two"
            )));
        }
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &Device::Cpu);
        let n_up = upsample_factor.trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut c = in_channels;
        for i in 0..n_up {
            let next = (c / 2).max(8);
            convs.push(conv2d(c, next, 3, pad1(), vb.pp(format!("up.{i}")))?);
            c = next;
        }
        let out = conv2d(c, 1, 3, pad1(), vb.pp("out"))?;
        {
            let data = varmap.data().lock().unwrap();
            crate::util::deterministic_init(
                data.iter().map(|(n, v)| (n.as_str(), v)),
                0x484541445f494e,
            )?;
        }
        Ok(Self {
            varmap,
            in_channels,
            upsample_factor,
            convs,
            out,
        })
    }

    /// Features `(F, C, h, w)` to logits `(F, 1, h*factor, w*factor)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = features.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "head expects {} feature channels, got {c}",
                self.in_channels
            )));
        }
        let mut x = features.clone();
        for conv in &self.convs {
            let (_, _, h, w) = x.dims4()?;
            x = x.upsample_nearest2d(2 * h, 2 * w)?;
            x = conv.forward(&x)?.silu()?;
        }
        Ok(self.out.forward(&x)?)
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data.iter().map(|(n, v)| (n.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn upsample_factor(&self) -> usize {
        self.upsample_factor
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Restores head weights saved in a checkpoint, matching by name.
    pub fn set_vars(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let data = self.varmap.data().lock().unwrap();
        for (name, var) in data.iter() {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing head tensor '{name}'"))
            })?;
            var.set(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DenoiserSidecar {
    pub config: DenoiserConfig,
    pub spatial_params: Vec<String>,
    pub temporal_params: Vec<String>,
    pub text_vocab_hash: String,
    pub sha256: String,
}

/// Saves denoiser parameters (plus any extra named tensors such as
/// optimizer moments) and the JSON sidecar with the parameter partition.
pub fn save_denoiser(
    net: &DenoiserNet,
    extra: &HashMap<String, Tensor>,
    text_vocab_hash: &str,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = dir.join("denoiser.safetensors");
    let mut named: HashMap<String, Tensor> = net
        .named_vars()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().clone()))
        .collect();
    for (k, v) in extra {
        named.insert(format!("extra.{k}"), v.clone());
    }
    candle_core::safetensors::save(&named, &blob)?;
    let sidecar = DenoiserSidecar {
        config: net.config.clone(),
        spatial_params: net.spatial_parameters().into_iter().map(|(n, _)| n).collect(),
        temporal_params: net.temporal_parameters().into_iter().map(|(n, _)| n).collect(),
        text_vocab_hash: text_vocab_hash.to_string(),
        sha256: sha256_file(&blob)?,
    };
    let sc = dir.join("denoiser.json");
    std::fs::write(&sc, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&sc, e))
}

/// Loads a denoiser checkpoint; returns the net, any extra tensors, and the
/// sidecar. The blob checksum is verified first.
pub fn load_denoiser(dir: &Path) -> Result<(DenoiserNet, HashMap<String, Tensor>, DenoiserSidecar)> {
    let blob = dir.join("denoiser.safetensors");
    let sc_path = dir.join("denoiser.json");
    let sidecar: DenoiserSidecar = serde_json::from_str(
        &std::fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?,
    )?;
    let got = sha256_file(&blob)?;
    if got != sidecar.sha256 {
        return Err(Error::Checkpoint(format!(
            "denoiser blob checksum mismatch: {got} != {}",
            sidecar.sha256
        )));
    }
    let tensors = candle_core::safetensors::load(&blob, &Device::Cpu)?;
    let net = DenoiserNet::new(sidecar.config.clone())?;
    {
        let data = net.varmap.data().lock().unwrap();
        for (name, var) in data.iter() {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("denoiser blob is missing tensor '{name}'"))
            })?;
            var.set(t)?;
        }
    }
    let extra = tensors
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|s| (s.to_string(), v)))
        .collect();
    Ok((net, extra, sidecar))
}
