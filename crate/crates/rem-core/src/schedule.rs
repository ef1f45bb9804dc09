//! DDPM-style forward process: linear beta schedule and the closed-form
//! noising step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentTensor;

/// Diffusion beta / alpha-bar tables. `alpha_bars[t]` is the cumulative
/// product of `(1 - beta_s)` for `s <= t`, with `alpha_bars[0] = 1` so that
/// timestep 0 carries no noise. The terminal latent distribution is the unit
/// Gaussian (mu = 0, sigma = 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn max_timestep(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Param(format!("timestep {t} out of range 0..={}", self.max_timestep())))
    }
}

/// Builds a linear beta schedule of `t_max` steps.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Param("schedule needs at least one timestep".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!(
            "invalid beta bounds: need 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(t_max + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Closed-form forward diffusion: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
/// At t = 0 the clean latent is returned bit-exactly.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if z0.tensor().dims() != eps.tensor().dims() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match latent shape {:?}",
            eps.tensor().dims(),
            z0.tensor().dims()
        )));
    }
    let abar = sched.alpha_bar(t)?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let signal = (z0.tensor() * abar.sqrt())?;
    let noise = (eps.tensor() * (1.0 - abar).sqrt())?;
    LatentTensor::new((signal + noise)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};

    #[test]
    fn alpha_bar_zero_is_one() {
        let s = build_schedule(10, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn single_step_product() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn ddpm_default_terminal_alpha_bar() {
        // independent oracle: direct cumulative product in extended precision
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let expected = 4.0e-5;
        let got = s.alpha_bar(1000).unwrap();
        assert!(
            (got - expected).abs() / expected < 0.2,
            "abar_1000 = {got}, expected about {expected}"
        );
        // strictly decreasing
        for t in 1..=1000 {
            assert!(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(build_schedule(0, 1e-4, 0.02).is_err());
        assert!(build_schedule(10, 0.0, 0.02).is_err());
        assert!(build_schedule(10, 0.5, 0.1).is_err());
        assert!(build_schedule(10, 0.5, 1.0).is_err());
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> LatentTensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f32> = (0..n)
            .map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng))
            .collect();
        LatentTensor::new(Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn t_zero_is_bit_exact_identity() {
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        let z0 = randn((2, 4, 8, 8), 1);
        let eps = randn((2, 4, 8, 8), 2);
        let out = forward_diffuse(&z0, 0, &eps, &s).unwrap();
        let a: Vec<f32> = out.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = z0.tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_signal_case() {
        let s = build_schedule(50, 1e-3, 0.02).unwrap();
        let z0 = LatentTensor::new(
            Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let eps = randn((1, 4, 4, 4), 3);
        let t = 30;
        let out = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(t).unwrap()).sqrt() as f32;
        let a: Vec<f32> = out.tensor().flatten_all().unwrap().to_vec1().unwrap();
        let e: Vec<f32> = eps.tensor().flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(e.iter()) {
            assert!((x - y * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn variance_preserved_monte_carlo() {
        // z0, eps iid unit variance => output variance close to 1
        let s = build_schedule(100, 1e-3, 0.02).unwrap();
        let z0 = randn((8, 4, 32, 32), 10); // 32768 elements per draw
        let eps = randn((8, 4, 32, 32), 11);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for &t in &[1usize, 25, 50, 100] {
            let out = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let v: Vec<f32> = out.tensor().flatten_all().unwrap().to_vec1().unwrap();
            total += v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            count += v.len();
        }
        let var = total / count as f64;
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = build_schedule(10, 1e-3, 0.02).unwrap();
        let z0 = randn((2, 4, 8, 8), 1);
        let eps = randn((2, 4, 4, 4), 2);
        assert!(matches!(
            forward_diffuse(&z0, 1, &eps, &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            forward_diffuse(&z0, 11, &z0, &s),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn unit_split_identity_holds() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 0..=1000 {
            let a = s.alpha_bars[t];
            let lhs = a.sqrt().powi(2) + (1.0 - a).sqrt().powi(2);
            assert!((lhs - 1.0).abs() < 1e-12, "t={t}: {lhs}");
        }
    }
}
