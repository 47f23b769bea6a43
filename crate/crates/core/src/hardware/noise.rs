//! Gaussian read noise expressed in converter LSBs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::quant::QuantScheme;
use super::HardwareError;

/// `N(μ, σ²)` in LSB units, applied at the enabled injection points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mean_lsb: f64,
    pub sigma_lsb: f64,
    pub after_vmm: bool,
    pub after_state_update: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            mean_lsb: 0.0,
            sigma_lsb: 0.0,
            after_vmm: true,
            after_state_update: true,
        }
    }

    /// Zero-mean noise at both injection points.
    pub fn gaussian(sigma_lsb: f64) -> Self {
        Self {
            sigma_lsb,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<(), HardwareError> {
        if !(self.sigma_lsb >= 0.0 && self.sigma_lsb.is_finite() && self.mean_lsb.is_finite()) {
            return Err(HardwareError::InvalidNoise(self.sigma_lsb));
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        self.sigma_lsb == 0.0 && self.mean_lsb == 0.0
    }
}

/// NRMSE of σ LSB on a converter with `2^bits` levels.
pub fn lsb_to_nrmse(sigma_lsb: f64, bits: u8) -> f64 {
    sigma_lsb / f64::from(1u32 << bits)
}

/// Adds i.i.d. noise scaled by the vector's LSB.
pub fn inject_noise<R: Rng + ?Sized>(
    values: &[f64],
    noise: &NoiseModel,
    scheme: &QuantScheme,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = values.to_vec();
    inject_noise_in_place(&mut out, noise, scheme, rng);
    out
}

pub fn inject_noise_in_place<R: Rng + ?Sized>(
    values: &mut [f64],
    noise: &NoiseModel,
    scheme: &QuantScheme,
    rng: &mut R,
) {
    if noise.is_silent() {
        return;
    }
    let lsb = scheme.scale;
    for v in values.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += (noise.mean_lsb + noise.sigma_lsb * z) * lsb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silent_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = vec![0.1, -2.0, 3.5];
        let out = inject_noise(&v, &NoiseModel::none(), &QuantScheme::with_scale(0.1), &mut rng);
        assert_eq!(out, v);
    }

    #[test]
    fn measured_noise_maps_to_nrmse() {
        let nrmse = lsb_to_nrmse(4.6, 8);
        assert!((nrmse - 0.01797).abs() < 2e-4);
        assert_eq!(nrmse, 4.6 / 256.0);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let s = QuantScheme::with_scale(0.02);
        let n = NoiseModel::gaussian(3.0);
        let a = inject_noise(&[0.0; 16], &n, &s, &mut ChaCha8Rng::seed_from_u64(9));
        let b = inject_noise(&[0.0; 16], &n, &s, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(NoiseModel::gaussian(-1.0).validate().is_err());
        assert!(NoiseModel::gaussian(f64::NAN).validate().is_err());
    }
}
