//! Two-stage linear ADC calibration for differential column pairs.
//!
//! Stage 1 inverts the gain and offset of each physical column. Stage 2
//! inverts the residual gain and offset of the differential channel. Both
//! stages are affine, so they collapse into one map per channel:
//! `G_pos · y_pos - G_neg · y_neg + O_diff`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HardwareError;

/// `y ≈ gain · x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub gain: f64,
    pub offset: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit, HardwareError> {
    if x.len() != y.len() {
        return Err(HardwareError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let n = x.len() as f64;
    if x.len() < 2 {
        return Err(HardwareError::DegenerateFit("fewer than two samples"));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if !(sxx > 0.0) {
        return Err(HardwareError::DegenerateFit("constant ideal inputs"));
    }
    let gain = sxy / sxx;
    Ok(LinearFit {
        gain,
        offset: my - gain * mx,
    })
}

fn invertible(fit: &LinearFit) -> Result<(), HardwareError> {
    if fit.gain == 0.0 || !fit.gain.is_finite() || !fit.offset.is_finite() {
        return Err(HardwareError::DegenerateFit("zero or non-finite gain"));
    }
    Ok(())
}

/// Raw fit `(s, b)` of one column and its inverse `(a, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnCalibration {
    pub s: f64,
    pub b: f64,
    pub a: f64,
    pub d: f64,
}

impl ColumnCalibration {
    pub fn from_fit(fit: LinearFit) -> Result<Self, HardwareError> {
        invertible(&fit)?;
        Ok(Self {
            s: fit.gain,
            b: fit.offset,
            a: 1.0 / fit.gain,
            d: -fit.offset / fit.gain,
        })
    }

    #[inline]
    pub fn correct(&self, raw: f64) -> f64 {
        self.a * raw + self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    pub pos: ColumnCalibration,
    pub neg: ColumnCalibration,
    pub alpha: f64,
    pub beta: f64,
    pub big_a: f64,
    pub big_b: f64,
    pub g_pos: f64,
    pub g_neg: f64,
    pub o_diff: f64,
}

impl ChannelCalibration {
    pub fn new(pos: ColumnCalibration, neg: ColumnCalibration, channel: LinearFit) -> Self {
        let big_a = 1.0 / channel.gain;
        let big_b = -channel.offset / channel.gain;
        Self {
            pos,
            neg,
            alpha: channel.gain,
            beta: channel.offset,
            big_a,
            big_b,
            g_pos: big_a * pos.a,
            g_neg: big_a * neg.a,
            o_diff: big_a * (pos.d - neg.d) + big_b,
        }
    }

    /// Single affine evaluation.
    #[inline]
    pub fn apply(&self, raw_pos: f64, raw_neg: f64) -> f64 {
        self.g_pos * raw_pos - self.g_neg * raw_neg + self.o_diff
    }

    /// Column correction, subtraction, then channel correction.
    #[inline]
    pub fn apply_sequential(&self, raw_pos: f64, raw_neg: f64) -> f64 {
        let diff = self.pos.correct(raw_pos) - self.neg.correct(raw_neg);
        self.big_a * diff + self.big_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCoeffs {
    pub channels: Vec<ChannelCalibration>,
}

/// Calibration readings of one differential channel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChannelSamples {
    pub ideal_pos: Vec<f64>,
    pub raw_pos: Vec<f64>,
    pub ideal_neg: Vec<f64>,
    pub raw_neg: Vec<f64>,
    /// Desired channel activation for each reading.
    pub target: Vec<f64>,
}

pub fn fit_calibration(samples: &[ChannelSamples]) -> Result<CalibrationCoeffs, HardwareError> {
    let channels = samples
        .iter()
        .map(|c| {
            let pos = ColumnCalibration::from_fit(ols(&c.ideal_pos, &c.raw_pos)?)?;
            let neg = ColumnCalibration::from_fit(ols(&c.ideal_neg, &c.raw_neg)?)?;
            let diff: Vec<f64> = c
                .raw_pos
                .iter()
                .zip(&c.raw_neg)
                .map(|(&p, &n)| pos.correct(p) - neg.correct(n))
                .collect();
            let channel = ols(&c.target, &diff)?;
            invertible(&channel)?;
            Ok(ChannelCalibration::new(pos, neg, channel))
        })
        .collect::<Result<Vec<_>, HardwareError>>()?;
    Ok(CalibrationCoeffs { channels })
}

/// Fused calibration of one reading per channel.
pub fn apply_calibration(
    raw_pos: &[f64],
    raw_neg: &[f64],
    coeffs: &CalibrationCoeffs,
) -> Result<Vec<f64>, HardwareError> {
    let n = coeffs.channels.len();
    if raw_pos.len() != n || raw_neg.len() != n {
        return Err(HardwareError::DimensionMismatch {
            expected: n,
            got: raw_pos.len().min(raw_neg.len()),
        });
    }
    Ok(coeffs
        .channels
        .iter()
        .zip(raw_pos.iter().zip(raw_neg))
        .map(|(c, (&p, &q))| c.apply(p, q))
        .collect())
}

/// Distortions synthesized by the calibration demo, in LSB units of an
/// 8-bit converter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDemoConfig {
    pub channels: usize,
    pub samples: usize,
    pub column_gain: (f64, f64),
    pub column_offset_lsb: (f64, f64),
    pub channel_gain: (f64, f64),
    pub channel_offset_lsb: (f64, f64),
    /// Quadratic bow at mid-scale, in LSB at full deflection.
    pub nonlinearity_lsb: f64,
    pub noise_lsb: f64,
}

impl Default for CalibrationDemoConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            samples: 256,
            column_gain: (0.8, 1.2),
            column_offset_lsb: (-8.0, 8.0),
            channel_gain: (0.9, 1.1),
            channel_offset_lsb: (-4.0, 4.0),
            nonlinearity_lsb: 0.0,
            noise_lsb: 0.0,
        }
    }
}

impl CalibrationDemoConfig {
    pub fn identity(channels: usize, samples: usize) -> Self {
        Self {
            channels,
            samples,
            column_gain: (1.0, 1.0),
            column_offset_lsb: (0.0, 0.0),
            channel_gain: (1.0, 1.0),
            channel_offset_lsb: (0.0, 0.0),
            nonlinearity_lsb: 0.0,
            noise_lsb: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub config: CalibrationDemoConfig,
    pub seed: u64,
    /// RMS error over the 256-level range, before and after calibration.
    pub pre_nrmse: f64,
    pub post_nrmse: f64,
    pub fused_vs_sequential_max_diff: f64,
    pub coeffs: CalibrationCoeffs,
}

pub const FULL_SCALE_LSB: f64 = 256.0;

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Synthesizes distorted differential readouts, fits, and evaluates the
/// calibration on a fresh set of readings.
pub fn run_calibration_demo(config: &CalibrationDemoConfig, seed: u64) -> Result<CalibrationReport, HardwareError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut truth = Vec::with_capacity(config.channels);
    for _ in 0..config.channels {
        truth.push((
            (uniform(&mut rng, config.column_gain), uniform(&mut rng, config.column_offset_lsb)),
            (uniform(&mut rng, config.column_gain), uniform(&mut rng, config.column_offset_lsb)),
            (uniform(&mut rng, config.channel_gain), uniform(&mut rng, config.channel_offset_lsb)),
        ));
    }
    let read = |rng: &mut ChaCha8Rng, (s, b): (f64, f64), x: f64| {
        let bow = config.nonlinearity_lsb * ((x - 128.0) / 128.0).powi(2);
        let z: f64 = StandardNormal.sample(rng);
        s * x + b + bow + config.noise_lsb * z
    };
    let draw = |rng: &mut ChaCha8Rng| -> Vec<ChannelSamples> {
        truth
            .iter()
            .map(|&(pos, neg, (alpha, beta))| {
                let mut c = ChannelSamples::default();
                for _ in 0..config.samples {
                    let xp = rng.random_range(0.0..255.0);
                    let xn = rng.random_range(0.0..255.0);
                    c.raw_pos.push(read(rng, pos, xp));
                    c.raw_neg.push(read(rng, neg, xn));
                    c.ideal_pos.push(xp);
                    c.ideal_neg.push(xn);
                    c.target.push((xp - xn - beta) / alpha);
                }
                c
            })
            .collect()
    };
    let fit_set = draw(&mut rng);
    let coeffs = fit_calibration(&fit_set)?;
    let eval_set = draw(&mut rng);

    let (mut pre, mut post, mut count, mut max_diff) = (0.0, 0.0, 0usize, 0.0f64);
    for (c, coef) in eval_set.iter().zip(&coeffs.channels) {
        for i in 0..c.target.len() {
            let (p, n, t) = (c.raw_pos[i], c.raw_neg[i], c.target[i]);
            pre += (p - n - t).powi(2);
            let fused = coef.apply(p, n);
            post += (fused - t).powi(2);
            max_diff = max_diff.max((fused - coef.apply_sequential(p, n)).abs());
            count += 1;
        }
    }
    let nrmse = |sum: f64| (sum / count.max(1) as f64).sqrt() / FULL_SCALE_LSB;
    Ok(CalibrationReport {
        config: config.clone(),
        seed,
        pre_nrmse: nrmse(pre),
        post_nrmse: nrmse(post),
        fused_vs_sequential_max_diff: max_diff,
        coeffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_distortion_inverted() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 10.0).collect();
        let c = ColumnCalibration::from_fit(ols(&x, &y).unwrap()).unwrap();
        assert!((c.a - 0.5).abs() < 1e-10);
        assert!((c.d + 5.0).abs() < 1e-10);
    }

    #[test]
    fn constant_inputs_rejected() {
        assert!(ols(&[3.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
        assert!(ols(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn identity_distortion_gives_unit_gains() {
        let r = run_calibration_demo(&CalibrationDemoConfig::identity(4, 64), 1).unwrap();
        for c in &r.coeffs.channels {
            assert!((c.g_pos - 1.0).abs() < 1e-12 && (c.g_neg - 1.0).abs() < 1e-12);
            assert!(c.o_diff.abs() < 1e-9);
        }
        assert!(r.post_nrmse < 1e-12);
    }

    #[test]
    fn zero_codes_give_offset() {
        let r = run_calibration_demo(&CalibrationDemoConfig::default(), 2).unwrap();
        let out = apply_calibration(&[0.0; 16], &[0.0; 16], &r.coeffs).unwrap();
        for (o, c) in out.iter().zip(&r.coeffs.channels) {
            assert_eq!(*o, c.o_diff);
        }
    }

    #[test]
    fn linear_demo_is_recovered() {
        let r = run_calibration_demo(&CalibrationDemoConfig::default(), 3).unwrap();
        assert!(r.pre_nrmse > 0.01);
        assert!(r.post_nrmse < 1e-3);
        assert!(r.fused_vs_sequential_max_diff < 1e-12);
    }

    #[test]
    fn noisy_demo_improves() {
        let cfg = CalibrationDemoConfig {
            nonlinearity_lsb: 2.0,
            noise_lsb: 4.6,
            ..CalibrationDemoConfig::default()
        };
        let r = run_calibration_demo(&cfg, 4).unwrap();
        assert!(r.post_nrmse < r.pre_nrmse);
    }
}
