#![allow(dead_code)]

use evssm::event_io::{generate_synthetic, Event, EventDataset, EventSequence, SyntheticSpec};
use evssm::model::{cross_entropy, EventSsm, ModelConfig, ParamKind};
use evssm::trainer::{LambdaMode, TrainConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const DESK_DATA_SEED: u64 = 42;
pub const DESK_TRAIN: usize = 500;

/// The synthetic order-discrimination task: 500 training and 200 test sequences.
pub fn desk_data() -> (EventDataset, EventDataset) {
    let data = generate_synthetic(&SyntheticSpec::default(), DESK_DATA_SEED).expect("default spec is valid");
    data.split_at(DESK_TRAIN)
}

/// Two blocks of width 8 on 8 channels.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig::single_stage(8, 2, 8, 8, 2)
}

pub fn desk_train_config(seed: u64, mode: LambdaMode) -> TrainConfig {
    TrainConfig {
        seed,
        lambda_mode: mode,
        ..TrainConfig::default()
    }
}

/// Time-ordered random events; equal timestamps are allowed.
pub fn random_sequence<R: Rng>(rng: &mut R, channels: u32, classes: u32, len: std::ops::RangeInclusive<usize>) -> EventSequence {
    let n = rng.random_range(len);
    let mut t = rng.random_range(0..2_000u64);
    let events = (0..n)
        .map(|_| {
            t += if rng.random_bool(0.1) { 0 } else { rng.random_range(1..3_000) };
            Event::new(t, rng.random_range(0..channels))
        })
        .collect();
    EventSequence::new(events, rng.random_range(0..classes))
}

/// Moves every parameter off its initial value so no gradient is
/// structurally zero. Rates are scaled multiplicatively to stay positive.
pub fn jitter_parameters<R: Rng>(model: &mut EventSsm, sigma: f64, rng: &mut R) {
    let normal = Normal::new(0.0, sigma).unwrap();
    model.for_each_tensor_mut(|kind, t| {
        for v in t.iter_mut() {
            let z: f64 = normal.sample(rng);
            match kind {
                ParamKind::DecayRates { .. } => *v *= z.exp(),
                _ => *v += z,
            }
        }
    });
}

pub fn sequence_loss(model: &EventSsm, seq: &EventSequence) -> f64 {
    let logits = model.forward(seq).expect("forward");
    cross_entropy(&logits, seq.label as usize).0
}

/// Central differences of the cross-entropy of `seq` with respect to every
/// scalar parameter, laid out like `EventSsm::tensors`.
pub fn finite_difference_gradients(model: &EventSsm, seq: &EventSequence, rel_step: f64) -> Vec<Vec<f64>> {
    let shapes: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let original = model.tensors()[ti].1[k];
            let h = rel_step * original.abs().max(1.0);
            let eval = |value: f64| {
                let mut m = model.clone();
                let mut i = 0;
                m.for_each_tensor_mut(|_, t| {
                    if i == ti {
                        t[k] = value;
                    }
                    i += 1;
                });
                sequence_loss(&m, seq)
            };
            g.push((eval(original + h) - eval(original - h)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Slope of the least-squares line through `(x, y)`.
pub fn fitted_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
