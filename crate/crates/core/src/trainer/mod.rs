//! Backpropagation through time, Adam, and the three-stage decay-rate
//! procedure.

mod baseline;

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::event_io::{EventDataset, EventSequence};
use crate::model::{argmax, cross_entropy, DecayRates, EventSsm, ForwardOptions, Gradients, ModelConfig, ModelError, ParamKind};

pub use baseline::CountLogistic;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: u32 },
    #[error("gradient layout does not match the model at tensor {0}")]
    ShapeMismatch(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How decay rates are handled during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    /// Per-dimension rates trained throughout.
    Free,
    /// Each layer frozen at the mean of its learned rates.
    Fixed,
    /// First layer at its own mean, all later layers at one pooled mean.
    TwoTier,
}

impl std::str::FromStr for LambdaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "free" => Ok(Self::Free),
            "fixed" => Ok(Self::Fixed),
            "two-tier" => Ok(Self::TwoTier),
            other => Err(format!("unknown lambda mode {other:?} (free, fixed, two-tier)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total epoch budget over all stages.
    pub max_epochs: usize,
    /// Cap on the first stage of the decay-rate procedure.
    pub stage1_max_epochs: usize,
    pub plateau_window: usize,
    /// Relative eval-loss improvement that resets the plateau counter.
    pub plateau_threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub lambda_mode: LambdaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 30,
            stage1_max_epochs: 15,
            plateau_window: 5,
            plateau_threshold: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            lambda_mode: LambdaMode::Fixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.plateau_window == 0 {
            return bad("plateau window must be at least 1");
        }
        if !(self.plateau_threshold >= 0.0) {
            return bad("plateau threshold must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("moment coefficients must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }
}

/// Published two-tier rates in ms⁻¹, first layer then all other layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRates {
    pub dataset: &'static str,
    pub first_layer: f64,
    pub other_layers: f64,
}

pub const REFERENCE_TWO_TIER_RATES: [ReferenceRates; 4] = [
    ReferenceRates { dataset: "SHD", first_layer: 0.55, other_layers: 0.35 },
    ReferenceRates { dataset: "SSC", first_layer: 0.35, other_layers: 0.20 },
    ReferenceRates { dataset: "DVS-Gesture", first_layer: 1.15, other_layers: 0.70 },
    ReferenceRates { dataset: "DVS-Lips", first_layer: 1.15, other_layers: 0.50 },
];

/// Result of one batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Gradients,
    pub correct: usize,
    /// Set when the forward pass or gradients were not finite.
    pub diverged: bool,
}

/// Mean cross-entropy over the batch and its gradient. Sequences are
/// processed concurrently and their gradients summed in batch order.
pub fn loss_and_gradients<S: Borrow<EventSequence> + Sync>(
    model: &EventSsm,
    batch: &[S],
    opts: &ForwardOptions,
) -> Result<BatchOutcome, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let k = model.config.num_classes;
    for s in batch {
        let label = s.borrow().label;
        if label >= k {
            return Err(TrainError::LabelOutOfRange { label, num_classes: k });
        }
    }
    let per_seq: Vec<Option<(f64, Gradients, bool)>> = batch
        .par_iter()
        .map(|s| {
            let seq = s.borrow();
            let cache = match model.forward_cached(seq, opts) {
                Ok(c) => c,
                Err(ModelError::NonFinite(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let (loss, d_logits) = cross_entropy(&cache.logits, seq.label as usize);
            let grads = model.backward(&cache, &d_logits, &opts.engine)?;
            let hit = argmax(&cache.logits) == seq.label as usize;
            Ok(Some((loss, grads, hit)))
        })
        .collect::<Result<_, ModelError>>()?;

    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut correct = 0;
    let mut diverged = false;
    for item in &per_seq {
        match item {
            Some((l, g, hit)) => {
                loss += l;
                total.add_assign(g);
                correct += usize::from(*hit);
            }
            None => diverged = true,
        }
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    loss /= n;
    diverged |= !loss.is_finite() || !total.is_finite();
    Ok(BatchOutcome {
        loss: if diverged { f64::NAN } else { loss },
        grads: total,
        correct,
        diverged,
    })
}

/// Adam with bias correction. Decay rates are updated in log space, so they
/// stay positive; frozen rates are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &EventSsm, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Resets the moments of tensors whose length changed, e.g. rates
    /// collapsed to one shared value.
    pub fn resync(&mut self, model: &EventSsm) {
        for (i, (_, t)) in model.tensors().iter().enumerate() {
            if self.m[i].len() != t.len() {
                self.m[i] = vec![0.0; t.len()];
                self.v[i] = vec![0.0; t.len()];
            }
        }
    }

    pub fn step(&mut self, model: &mut EventSsm, grads: &Gradients) -> Result<(), TrainError> {
        let g_tensors = grads.tensors();
        let lens: Vec<usize> = model.tensors().iter().map(|(_, t)| t.len()).collect();
        if g_tensors.len() != lens.len() {
            return Err(TrainError::ShapeMismatch(g_tensors.len().min(lens.len())));
        }
        for (i, ((_, g), &len)) in g_tensors.iter().zip(&lens).enumerate() {
            if g.len() != len || self.m[i].len() != len {
                return Err(TrainError::ShapeMismatch(i));
            }
        }
        let frozen: Vec<bool> = model.blocks.iter().map(|b| b.rates_frozen).collect();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.epsilon);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_tensor_mut(|kind, params| {
            let g = g_tensors[i].1;
            let (m, v) = (&mut ms[i], &mut vs[i]);
            i += 1;
            let log_space = match kind {
                ParamKind::DecayRates { block } => {
                    if frozen[block] {
                        return;
                    }
                    true
                }
                _ => false,
            };
            for j in 0..params.len() {
                let gj = if log_space { g[j] * params[j] } else { g[j] };
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let delta = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                if delta == 0.0 {
                    continue;
                }
                if log_space {
                    params[j] = (params[j].ln() - delta).exp();
                } else {
                    params[j] -= delta;
                }
            }
        });
        Ok(())
    }
}

/// Classification summary; `confusion[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate(model: &EventSsm, dataset: &EventDataset) -> Result<EvalReport, TrainError> {
    evaluate_with(model, dataset, &ForwardOptions::default())
}

pub fn evaluate_with(model: &EventSsm, dataset: &EventDataset, opts: &ForwardOptions) -> Result<EvalReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let k = model.config.num_classes as usize;
    let results: Vec<(usize, usize, f64)> = dataset
        .sequences
        .par_iter()
        .map(|seq| {
            let label = seq.label as usize;
            if label >= k {
                return Err(TrainError::LabelOutOfRange {
                    label: seq.label,
                    num_classes: k as u32,
                });
            }
            let logits = model.forward_cached(seq, opts)?.logits;
            let (loss, _) = cross_entropy(&logits, label);
            Ok((label, argmax(&logits), loss))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut loss = 0.0;
    let mut correct = 0;
    for &(t, p, l) in &results {
        confusion[t][p] += 1;
        loss += l;
        correct += usize::from(t == p);
    }
    Ok(EvalReport {
        accuracy: correct as f64 / results.len() as f64,
        loss: loss / results.len() as f64,
        n: results.len(),
        confusion,
    })
}

/// One row of the loss curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lambda_mode: LambdaMode,
    pub epochs: Vec<EpochRecord>,
    /// `[epoch][block]` rates after each epoch, per stored group.
    pub lambda_trajectory: Vec<Vec<Vec<f64>>>,
    /// Epoch counts at which a new stage started.
    pub stage_transitions: Vec<usize>,
    pub stage1_diverged: bool,
    pub diverged: bool,
    pub final_eval_acc: f64,
    pub final_rates: Vec<Vec<f64>>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_loss,eval_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.eval_loss, e.eval_acc));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn rates_of(model: &EventSsm) -> Vec<Vec<f64>> {
    model.blocks.iter().map(|b| b.rates.as_slice().to_vec()).collect()
}

/// Mean over every state dimension, summed in index order.
fn per_dimension_mean(rates: &DecayRates, state: usize) -> f64 {
    rates.expand(state).iter().sum::<f64>() / state as f64
}

/// Collapses each layer's rates to a shared value and freezes them.
pub fn fix_rates(model: &mut EventSsm, mode: LambdaMode) -> Result<(), TrainError> {
    let means: Vec<f64> = match mode {
        LambdaMode::Free => return Err(TrainError::InvalidConfig("free mode keeps per-dimension rates".into())),
        LambdaMode::Fixed => model
            .blocks
            .iter()
            .map(|b| per_dimension_mean(&b.rates, b.state_dim()))
            .collect(),
        LambdaMode::TwoTier => {
            let first = per_dimension_mean(&model.blocks[0].rates, model.blocks[0].state_dim());
            let pooled: Vec<f64> = model.blocks[1..]
                .iter()
                .flat_map(|b| b.rates.expand(b.state_dim()))
                .collect();
            let rest = pooled.iter().sum::<f64>() / pooled.len().max(1) as f64;
            (0..model.blocks.len()).map(|i| if i == 0 { first } else { rest }).collect()
        }
    };
    for (b, m) in model.blocks.iter_mut().zip(means) {
        b.rates = DecayRates::Shared(m);
        b.rates_frozen = true;
    }
    Ok(())
}

/// Tracks the best eval loss and the epochs since it last improved.
#[derive(Debug, Clone)]
struct Plateau {
    best: f64,
    since: usize,
    window: usize,
    threshold: f64,
}

impl Plateau {
    fn new(window: usize, threshold: f64) -> Self {
        Self {
            best: f64::INFINITY,
            since: 0,
            window,
            threshold,
        }
    }

    /// Records an epoch; returns true once the loss has stalled.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.threshold * self.best.abs() || self.best.is_infinite() {
            self.best = loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.window
    }
}

enum StageEnd {
    Plateau,
    Budget,
    Diverged,
}

struct Run<'a> {
    config: &'a TrainConfig,
    train: &'a EventDataset,
    eval: &'a EventDataset,
    opts: ForwardOptions,
    report: TrainReport,
}

impl Run<'_> {
    /// Trains until plateau, divergence or `budget` epochs. On divergence the
    /// model is rolled back to its parameters at the start of the failing
    /// epoch, the last ones known to evaluate finitely.
    fn stage(&mut self, model: &mut EventSsm, adam: &mut Adam, stage: u8, budget: usize) -> Result<StageEnd, TrainError> {
        let mut plateau = Plateau::new(self.config.plateau_window, self.config.plateau_threshold);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for _ in 0..budget {
            let epoch = self.report.epochs.len();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[epoch as u64]));
            order.shuffle(&mut rng);
            // Parameters that evaluated finitely at the end of the previous epoch.
            let last_good = model.clone();
            let (mut loss_sum, mut correct) = (0.0, 0);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&EventSequence> = chunk.iter().map(|&i| &self.train.sequences[i]).collect();
                let out = loss_and_gradients(model, &batch, &self.opts)?;
                if out.diverged {
                    *model = last_good;
                    return Ok(StageEnd::Diverged);
                }
                adam.step(model, &out.grads)?;
                if model.validate().is_err() {
                    *model = last_good;
                    return Ok(StageEnd::Diverged);
                }
                loss_sum += out.loss * batch.len() as f64;
                correct += out.correct;
            }
            let eval = match evaluate_with(model, self.eval, &self.opts) {
                Ok(e) => e,
                Err(TrainError::Model(ModelError::NonFinite(_))) => {
                    *model = last_good;
                    return Ok(StageEnd::Diverged);
                }
                Err(e) => return Err(e),
            };
            let n = self.train.len().max(1) as f64;
            self.report.epochs.push(EpochRecord {
                epoch: epoch + 1,
                stage,
                train_loss: loss_sum / n,
                train_acc: correct as f64 / n,
                eval_loss: eval.loss,
                eval_acc: eval.accuracy,
            });
            self.report.lambda_trajectory.push(rates_of(model));
            self.report.final_eval_acc = eval.accuracy;
            if plateau.observe(eval.loss) {
                return Ok(StageEnd::Plateau);
            }
        }
        Ok(StageEnd::Budget)
    }
}

/// Trains `model` according to `config.lambda_mode`. Free mode is a single
/// stage; fixed and two-tier modes run the three-stage procedure.
pub fn train(
    model: &EventSsm,
    train_set: &EventDataset,
    eval_set: &EventDataset,
    config: &TrainConfig,
) -> Result<(EventSsm, TrainReport), TrainError> {
    train_with(model, train_set, eval_set, config, ForwardOptions::default())
}

pub fn train_with(
    model: &EventSsm,
    train_set: &EventDataset,
    eval_set: &EventDataset,
    config: &TrainConfig,
    opts: ForwardOptions,
) -> Result<(EventSsm, TrainReport), TrainError> {
    config.validate()?;
    model.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = model.clone();
    let mut run = Run {
        config,
        train: train_set,
        eval: eval_set,
        opts,
        report: TrainReport {
            lambda_mode: config.lambda_mode,
            epochs: Vec::new(),
            lambda_trajectory: Vec::new(),
            stage_transitions: Vec::new(),
            stage1_diverged: false,
            diverged: false,
            final_eval_acc: 0.0,
            final_rates: Vec::new(),
        },
    };
    if config.max_epochs > 0 {
        let mut adam = Adam::new(&model, config);
        match config.lambda_mode {
            LambdaMode::Free => {
                if let StageEnd::Diverged = run.stage(&mut model, &mut adam, 1, config.max_epochs)? {
                    run.report.diverged = true;
                }
            }
            LambdaMode::Fixed | LambdaMode::TwoTier => {
                let cap = config.stage1_max_epochs.min(config.max_epochs);
                if let StageEnd::Diverged = run.stage(&mut model, &mut adam, 1, cap)? {
                    run.report.stage1_diverged = true;
                }
                fix_rates(&mut model, config.lambda_mode)?;
                if run.report.stage1_diverged {
                    adam = Adam::new(&model, config);
                } else {
                    adam.resync(&model);
                }
                run.report.stage_transitions.push(run.report.epochs.len());
                let remaining = config.max_epochs - run.report.epochs.len();
                if let StageEnd::Diverged = run.stage(&mut model, &mut adam, 3, remaining)? {
                    run.report.diverged = true;
                }
            }
        }
    }
    if run.report.epochs.is_empty() || run.report.diverged {
        run.report.final_eval_acc = evaluate_with(&model, eval_set, &run.opts)?.accuracy;
    }
    run.report.final_rates = rates_of(&model);
    Ok((model, run.report))
}

/// Mean accuracy over seeds for each depth of a single-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub blocks: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

pub fn depth_sweep(
    base: &ModelConfig,
    depths: &[usize],
    seeds: &[u64],
    train_set: &EventDataset,
    eval_set: &EventDataset,
    config: &TrainConfig,
) -> Result<Vec<DepthPoint>, TrainError> {
    depths
        .iter()
        .map(|&blocks| {
            let mut cfg = base.clone();
            for st in &mut cfg.stages {
                st.blocks = blocks;
            }
            let accuracies = seeds
                .iter()
                .map(|&seed| {
                    let model = EventSsm::init(cfg.clone(), seed)?;
                    let tc = TrainConfig { seed, ..config.clone() };
                    Ok(train(&model, train_set, eval_set, &tc)?.1.final_eval_acc)
                })
                .collect::<Result<Vec<f64>, TrainError>>()?;
            let mean = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
            Ok(DepthPoint {
                blocks,
                accuracies,
                mean,
            })
        })
        .collect()
}

/// Fine-tunes with fake-quantized weights and boundary activations. The
/// forward pass sees INT8 values; updates land on the float master weights.
pub fn qat_finetune(
    model: &EventSsm,
    train_set: &EventDataset,
    boundary_scales: Vec<f64>,
    epochs: usize,
    config: &TrainConfig,
) -> Result<EventSsm, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let opts = ForwardOptions {
        boundary_scales: Some(boundary_scales),
        ..ForwardOptions::default()
    };
    let mut master = model.clone();
    let mut adam = Adam::new(&master, config);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[u64::MAX, epoch as u64]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut shadow = master.clone();
            shadow.for_each_tensor_mut(|kind, t| {
                if kind.is_crossbar_weight() {
                    let scheme = crate::hardware::QuantScheme::fit(t);
                    t.iter_mut().for_each(|v| *v = scheme.fake(*v));
                }
            });
            let batch: Vec<&EventSequence> = chunk.iter().map(|&i| &train_set.sequences[i]).collect();
            let out = loss_and_gradients(&shadow, &batch, &opts)?;
            if out.diverged {
                return Ok(master);
            }
            adam.step(&mut master, &out.grads)?;
        }
    }
    Ok(master)
}
