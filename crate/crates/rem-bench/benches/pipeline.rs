use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use rem_core::metrics::{contour_accuracy, default_boundary_tolerance, region_similarity};
use rem_core::text::TextEncoder;
use rem_core::unet::{DenoiserConfig, DenoiserNet};
use rem_core::util::randn_seeded;
use rem_core::vae::{encode_video, Autoencoder, AutoencoderConfig};
use rem_core::{LatentTensor, VideoClip};

fn random_mask(seed: u64) -> Array2<u8> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    Array2::from_shape_fn((64, 64), |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        u8::from(state & 3 == 0)
    })
}

fn bench_metrics(c: &mut Criterion) {
    let a = random_mask(1);
    let b = random_mask(2);
    let tol = default_boundary_tolerance(64, 64);
    c.bench_function("region_similarity_64", |bch| {
        bch.iter(|| region_similarity(std::hint::black_box(&a), std::hint::black_box(&b)).unwrap())
    });
    c.bench_function("contour_accuracy_64", |bch| {
        bch.iter(|| {
            contour_accuracy(std::hint::black_box(&a), std::hint::black_box(&b), tol).unwrap()
        })
    });
}

fn bench_denoiser_forward(c: &mut Criterion) {
    let net = DenoiserNet::new(DenoiserConfig {
        base_channels: 16,
        ..DenoiserConfig::default()
    })
    .unwrap();
    let text = TextEncoder::new(Default::default()).unwrap();
    let e = text.encode("the red square").unwrap();
    let z = LatentTensor::new(randn_seeded(&[8, 4, 16, 16], candle_core::DType::F32, 3).unwrap())
        .unwrap();
    c.bench_function("denoiser_forward_8x16x16", |bch| {
        bch.iter(|| net.denoise(std::hint::black_box(&z), &e, 0).unwrap())
    });
}

fn bench_vae_encode(c: &mut Criterion) {
    let ae = Autoencoder::new(AutoencoderConfig::default())
        .unwrap()
        .freeze()
        .unwrap();
    let frames = (0..8)
        .map(|k| Array3::from_shape_fn((3, 64, 64), |(c, y, x)| ((c + y + x + k) % 5) as f32 / 5.0))
        .collect();
    let clip = VideoClip::new(frames, 24.0, "bench").unwrap();
    c.bench_function("vae_encode_8x64x64", |bch| {
        bch.iter(|| encode_video(&ae, std::hint::black_box(&clip)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_metrics, bench_denoiser_forward, bench_vae_encode
}
criterion_main!(benches);
