//! Referring video segmentation with a retargeted latent video denoiser.
//!
//! A video denoising network is repurposed to predict segmentation-mask
//! latents directly: at the clean timestep it maps encoded video latents,
//! conditioned on a language expression, to the latents of the broadcast
//! binary mask, which a frozen autoencoder decodes back to pixels.

pub mod codec;
pub mod data;
pub mod error;
pub mod infer;
pub mod latent;
pub mod metrics;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;
pub mod util;
pub mod vae;

pub use codec::{encode_mask, latents_to_mask, mask_to_rgb};
pub use data::{
    load_manifest, load_sample, synth_dataset, DatasetManifest, MaskSequence, Modality,
    ReferralSample, SampleRecord, SynthSpec, VideoClip,
};
pub use error::{Error, Result};
pub use infer::{render_overlay, segment_video, InferParams, MaskDecoder};
pub use latent::LatentTensor;
pub use metrics::{
    evaluate_dataset, evaluate_sample, EvalConfig, EvalReport, SampleReport,
};
pub use schedule::{build_schedule, forward_diffuse, NoiseSchedule};
pub use text::{TextEmbedding, TextEncoder, TextEncoderConfig};
pub use train::{
    load_checkpoint, save_checkpoint, train_denoiser, AdamW, Stage, TrainConfig, TrainState,
};
pub use unet::{CnnHead, DenoiserConfig, DenoiserNet};
pub use vae::{
    encode_video, load_autoencoder, save_autoencoder, train_toy_autoencoder, Autoencoder,
    AutoencoderConfig, VaeTrainConfig,
};
