use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::noise::{inject_noise_in_place, NoiseModel};
use super::quant::{fake_quantize, QuantScheme, QuantizedTensor};
use super::state_node::{sample_lambda_variation, PulseModel, StateNodeArray};
use super::HardwareError;
use crate::derive_seed;
use crate::event_io::{pool_stride, EventDataset, EventSequence, Timed};
use crate::model::{argmax, gelu, sigmoid, EventSsm, ModelError, ParamKind};

/// Calibrated INT8 scales of the activations inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockScales {
    /// Output of the `B̄ᵀx` crossbar.
    pub projection: f64,
    /// State-node contents.
    pub state: f64,
    /// Output of the `Cᵀh` crossbar.
    pub readout: f64,
    /// Output of the gate crossbar.
    pub gate: f64,
    /// Block output, quantized at the boundary.
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationScales {
    pub embedding: f64,
    pub blocks: Vec<BlockScales>,
}

impl ActivationScales {
    /// Scales in the layout expected by `ForwardOptions::boundary_scales`.
    pub fn boundary_scales(&self) -> Vec<f64> {
        std::iter::once(self.embedding)
            .chain(self.blocks.iter().map(|b| b.output))
            .collect()
    }
}

/// A model whose crossbar weights hold dequantized INT8 values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: EventSsm,
    pub weight_schemes: Vec<(ParamKind, QuantScheme)>,
    pub activations: ActivationScales,
}

#[derive(Debug, Clone, Copy, Default)]
struct MaxAbs {
    embedding: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct BlockMax {
    projection: f64,
    state: f64,
    readout: f64,
    gate: f64,
    output: f64,
}

fn track(m: &mut f64, values: &[f64]) {
    for v in values {
        *m = m.max(v.abs());
    }
}

/// Per-inference result of the simulated chip.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareOutput {
    pub logits: Vec<f64>,
    pub sn_energy_j: f64,
    pub sn_pulses: u64,
}

struct Observer {
    embed: MaxAbs,
    blocks: Vec<BlockMax>,
}

/// Runs one sequence through the simulated chip. `realized_rates` holds one
/// rate per state dimension of each block.
fn run<R: Rng>(
    model: &EventSsm,
    seq: &EventSequence,
    scales: Option<&ActivationScales>,
    noise: &NoiseModel,
    realized_rates: &[Vec<f64>],
    rng: &mut R,
    mut observer: Option<&mut Observer>,
) -> Result<HardwareOutput, HardwareError> {
    let scheme = |s: f64| QuantScheme::with_scale(s);
    let vmm_noise = noise.after_vmm && !noise.is_silent() && scales.is_some();
    let state_noise = noise.after_state_update && !noise.is_silent() && scales.is_some();

    let mut items = model.embed_sequence(seq)?;
    if let Some(obs) = observer.as_deref_mut() {
        for it in &items {
            track(&mut obs.embed.embedding, &it.values);
        }
    }
    if let Some(sc) = scales {
        for it in items.iter_mut() {
            if vmm_noise {
                inject_noise_in_place(&mut it.values, noise, &scheme(sc.embedding), rng);
            }
            it.values.iter_mut().for_each(|v| *v = fake_quantize(*v, sc.embedding));
        }
    }

    let (mut energy, mut pulses) = (0.0, 0u64);
    let mut b = 0;
    for stage in &model.config.stages {
        for _ in 0..stage.blocks {
            let block = &model.blocks[b];
            let bs = scales.map(|s| s.blocks[b]);
            let pulse_model = PulseModel {
                code_step: bs.map_or(1.0, |s| s.projection),
                ..PulseModel::default()
            };
            let b_bar = block.projection_bar();
            let mut nodes = StateNodeArray::new(block.rates.mean(), realized_rates[b].clone(), pulse_model)?;
            let mut out_items = Vec::with_capacity(items.len());
            for it in &items {
                let (_, _, x) = block.layer_norm(&it.values);
                let mut v = b_bar.tr_matvec(&x);
                if let Some(s) = bs.filter(|_| vmm_noise) {
                    inject_noise_in_place(&mut v, noise, &scheme(s.projection), rng);
                }
                nodes.update_at(it.timestamp_us, &v)?;
                if let Some(s) = bs.filter(|_| state_noise) {
                    inject_noise_in_place(&mut nodes.g, noise, &scheme(s.state), rng);
                }
                let mut y = block.c.tr_matvec(&nodes.g);
                if let Some(s) = bs.filter(|_| vmm_noise) {
                    inject_noise_in_place(&mut y, noise, &scheme(s.readout), rng);
                }
                let g: Vec<f64> = y.iter().map(|&v| gelu(v)).collect();
                let mut z = block.gate_w.matvec(&g);
                if let Some(s) = bs.filter(|_| vmm_noise) {
                    inject_noise_in_place(&mut z, noise, &scheme(s.gate), rng);
                }
                let mut out: Vec<f64> = y
                    .iter()
                    .zip(z.iter().zip(&block.gate_b))
                    .map(|(&y, (&z, &gb))| y + y * sigmoid(z + gb))
                    .collect();
                if let Some(obs) = observer.as_deref_mut() {
                    let m = &mut obs.blocks[b];
                    track(&mut m.projection, &v);
                    track(&mut m.state, &nodes.g);
                    track(&mut m.readout, &y);
                    track(&mut m.gate, &z);
                    track(&mut m.output, &out);
                }
                if let Some(s) = bs {
                    out.iter_mut().for_each(|v| *v = fake_quantize(*v, s.output));
                }
                out_items.push(Timed::new(it.timestamp_us, out));
            }
            energy += nodes.energy_j;
            pulses += nodes.total_pulses;
            items = out_items;
            b += 1;
        }
        items = pool_stride(&items, stage.pool_stride);
    }

    let width = model.config.output_width();
    let mut mean = vec![0.0; width];
    for it in &items {
        for (m, v) in mean.iter_mut().zip(&it.values) {
            *m += v;
        }
    }
    let n = items.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut logits = model.head_w.tr_matvec(&mean);
    for (l, bias) in logits.iter_mut().zip(&model.head_b) {
        *l += bias;
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("hardware logits").into());
    }
    Ok(HardwareOutput {
        logits,
        sn_energy_j: energy,
        sn_pulses: pulses,
    })
}

fn nominal_rates(model: &EventSsm) -> Vec<Vec<f64>> {
    model.blocks.iter().map(|b| b.rates.expand(b.state_dim())).collect()
}

/// One noisy forward pass of a quantized model with the given device rates.
pub fn hardware_forward<R: Rng>(
    qm: &QuantizedModel,
    seq: &EventSequence,
    noise: &NoiseModel,
    realized_rates: &[Vec<f64>],
    rng: &mut R,
) -> Result<HardwareOutput, HardwareError> {
    noise.validate()?;
    if realized_rates.len() != qm.model.blocks.len() {
        return Err(HardwareError::DimensionMismatch {
            expected: qm.model.blocks.len(),
            got: realized_rates.len(),
        });
    }
    run(&qm.model, seq, Some(&qm.activations), noise, realized_rates, rng, None)
}

/// Quantizes every crossbar weight to symmetric per-tensor INT8 and
/// calibrates activation scales on `calibration` by max-abs observation of
/// the quantized-weight model.
pub fn quantize_model(model: &EventSsm, calibration: &EventDataset) -> Result<QuantizedModel, HardwareError> {
    model.validate()?;
    if calibration.is_empty() {
        return Err(HardwareError::EmptyDataset);
    }
    let mut q = model.clone();
    let mut weight_schemes = Vec::new();
    q.for_each_tensor_mut(|kind, t| {
        if kind.is_crossbar_weight() {
            let qt = QuantizedTensor::from_values(t);
            t.copy_from_slice(&qt.dequantize());
            weight_schemes.push((kind, qt.scheme));
        }
    });

    let rates = nominal_rates(&q);
    let mut obs = Observer {
        embed: MaxAbs::default(),
        blocks: vec![BlockMax::default(); q.blocks.len()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seq in &calibration.sequences {
        run(&q, seq, None, &NoiseModel::none(), &rates, &mut rng, Some(&mut obs))?;
    }
    let s = |m: f64| QuantScheme::for_max_abs(m).scale;
    let activations = ActivationScales {
        embedding: s(obs.embed.embedding),
        blocks: obs
            .blocks
            .iter()
            .map(|m| BlockScales {
                projection: s(m.projection),
                state: s(m.state),
                readout: s(m.readout),
                gate: s(m.gate),
                output: s(m.output),
            })
            .collect(),
    };
    Ok(QuantizedModel {
        model: q,
        weight_schemes,
        activations,
    })
}

/// Accuracy over repeated noisy evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareReport {
    pub sigma_lsb: f64,
    pub sigma_rel: f64,
    pub seed: u64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// State-node write energy per inference, averaged over all repeats.
    pub mean_sn_energy_j: f64,
}

/// Sample mean and standard deviation (`n - 1` denominator).
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const VARIATION_STREAM: u64 = u64::MAX;

/// Evaluates `dataset` `repeats` times. Repeat `r` samples its device rates
/// from `(seed, r)` and the noise of sequence `i` from `(seed, r, i)`, so the
/// report does not depend on scheduling.
pub fn hardware_inference(
    qm: &QuantizedModel,
    dataset: &EventDataset,
    noise: &NoiseModel,
    sigma_rel: f64,
    repeats: usize,
    seed: u64,
) -> Result<HardwareReport, HardwareError> {
    noise.validate()?;
    if dataset.is_empty() {
        return Err(HardwareError::EmptyDataset);
    }
    if repeats == 0 {
        return Err(HardwareError::NoRepeats);
    }
    if !(0.0..=0.5).contains(&sigma_rel) {
        return Err(HardwareError::InvalidVariation(sigma_rel));
    }
    let nominal = nominal_rates(&qm.model);
    let per_repeat = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut vrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64, VARIATION_STREAM]));
            let realized = nominal
                .iter()
                .map(|n| sample_lambda_variation(n, sigma_rel, &mut vrng))
                .collect::<Result<Vec<_>, _>>()?;
            let outcomes = dataset
                .sequences
                .par_iter()
                .enumerate()
                .map(|(i, seq)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64, i as u64]));
                    let out = hardware_forward(qm, seq, noise, &realized, &mut rng)?;
                    Ok((argmax(&out.logits) == seq.label as usize, out.sn_energy_j))
                })
                .collect::<Result<Vec<_>, HardwareError>>()?;
            let correct = outcomes.iter().filter(|o| o.0).count();
            let energy: f64 = outcomes.iter().map(|o| o.1).sum();
            Ok((correct as f64 / dataset.len() as f64, energy / dataset.len() as f64))
        })
        .collect::<Result<Vec<_>, HardwareError>>()?;
    let accuracies: Vec<f64> = per_repeat.iter().map(|p| p.0).collect();
    let (mean, std) = mean_std(&accuracies);
    Ok(HardwareReport {
        sigma_lsb: noise.sigma_lsb,
        sigma_rel,
        seed,
        n: accuracies.len(),
        mean,
        std,
        mean_sn_energy_j: per_repeat.iter().map(|p| p.1).sum::<f64>() / repeats as f64,
        accuracies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_lsb: f64,
    pub sigma_rel: f64,
    pub run: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sigma_lsb: f64,
    pub sigma_rel: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma_lsb,sigma_rel,run,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.sigma_lsb, r.sigma_rel, r.run, r.accuracy));
        }
        s
    }
}

/// Full grid over noise levels and rate variations. Every grid point reuses
/// the same master seed, so points differ only in the swept parameter.
pub fn sweep(
    qm: &QuantizedModel,
    dataset: &EventDataset,
    noise_lsb: &[f64],
    lambda_var: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<SweepResult, HardwareError> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &sigma in noise_lsb {
        for &rel in lambda_var {
            let rep = hardware_inference(qm, dataset, &NoiseModel::gaussian(sigma), rel, repeats, seed)?;
            for (run, &accuracy) in rep.accuracies.iter().enumerate() {
                rows.push(SweepRow {
                    sigma_lsb: sigma,
                    sigma_rel: rel,
                    run,
                    accuracy,
                });
            }
            summary.push(SweepSummary {
                sigma_lsb: sigma,
                sigma_rel: rel,
                mean: rep.mean,
                std: rep.std,
                n: rep.n,
            });
        }
    }
    Ok(SweepResult { seed, rows, summary })
}
