use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Deterministic standard-normal tensor from an explicit seed.
pub fn randn_seeded(shape: &[usize], dtype: DType, seed: u64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// SHA-256 over named tensors in sorted name order; stable fingerprint of a
/// parameter set.
pub fn tensor_checksum<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut entries: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    entries.sort_by_key(|(name, _)| *name);
    let mut hasher = Sha256::new();
    for (name, t) in entries {
        hasher.update(name.as_bytes());
        let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for x in v {
            hasher.update(x.to_le_bytes());
        }
    }
    Ok(hex_string(&hasher.finalize()))
}

/// Replaces the randomly-initialized parameters of a fresh module with
/// draws from a named, seeded stream, so identically-configured modules
/// start identical. Structured initializations (all-equal tensors: norm
/// scales, zeroed projections) are left untouched; random vectors become
/// zero biases, random matrices/kernels are redrawn at `1/sqrt(fan_in)`
/// scale.
pub fn deterministic_init<'a>(
    named: impl IntoIterator<Item = (&'a str, &'a candle_core::Var)>,
    seed: u64,
) -> Result<()> {
    for (name, var) in named {
        let t = var.as_tensor();
        let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if v.iter().all(|&x| x == v[0]) {
            continue;
        }
        let dims = t.dims().to_vec();
        if dims.len() == 1 {
            var.set(&Tensor::zeros(dims.as_slice(), t.dtype(), &Device::Cpu)?)?;
        } else {
            let fan_in = t.elem_count() / dims[0];
            let std = (1.0 / fan_in as f64).sqrt();
            let draw = randn_seeded(&dims, t.dtype(), seed ^ fnv1a64(name.as_bytes()))?;
            var.set(&(draw * std)?)?;
        }
    }
    Ok(())
}

pub fn sha256_file(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// FNV-1a 64-bit; the stable token hash used by the text encoder.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
