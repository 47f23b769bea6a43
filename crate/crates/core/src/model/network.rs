use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{BlockCache, SsmBlockParams};
use super::{ModelConfig, ModelError};
use crate::event_io::{pool_stride, EventSequence, Timed};
use crate::hardware::quant::fake_quantize;
use crate::scan::ScanEngine;
use crate::tensor::Matrix;

/// Embedding, stacked SSM blocks and a dense classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSsm {
    pub config: ModelConfig,
    /// `J × D`; row `j` is the feature vector of channel `j`.
    pub embedding: Matrix,
    /// All blocks of all stages, in evaluation order.
    pub blocks: Vec<SsmBlockParams>,
    /// `H_out × num_classes`.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Identifies a parameter tensor during flat iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embedding,
    DecayRates { block: usize },
    InputProjection { block: usize },
    Readout { block: usize },
    GateWeight { block: usize },
    GateBias { block: usize },
    NormScale { block: usize },
    NormShift { block: usize },
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    /// Weight matrices mapped onto crossbars.
    pub fn is_crossbar_weight(self) -> bool {
        matches!(
            self,
            ParamKind::Embedding
                | ParamKind::InputProjection { .. }
                | ParamKind::Readout { .. }
                | ParamKind::GateWeight { .. }
                | ParamKind::HeadWeight
        )
    }
}

/// Gradients laid out exactly like the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub EventSsm);

impl Gradients {
    pub fn zeros_like(model: &EventSsm) -> Self {
        Gradients(EventSsm {
            config: model.config.clone(),
            embedding: model.embedding.zeros_like(),
            blocks: model.blocks.iter().map(SsmBlockParams::zeros_like).collect(),
            head_w: model.head_w.zeros_like(),
            head_b: vec![0.0; model.head_b.len()],
        })
    }

    pub fn tensors(&self) -> Vec<(ParamKind, &[f64])> {
        self.0.tensors()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let others: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        let mut i = 0;
        self.0.for_each_tensor_mut(|_, t| {
            for (a, b) in t.iter_mut().zip(&others[i]) {
                *a += b;
            }
            i += 1;
        });
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Knobs of the differentiable forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub engine: ScanEngine,
    /// Symmetric INT8 scales for the embedding output and each block output.
    /// When set, those activations are fake-quantized (straight-through in
    /// backward).
    pub boundary_scales: Option<Vec<f64>>,
}

/// Everything the backward pass needs from one sequence evaluation.
#[derive(Debug, Clone)]
pub struct NetworkCache {
    channels: Vec<u32>,
    blocks: Vec<BlockCache>,
    /// Number of items entering each stage's pooling.
    pool_inputs: Vec<usize>,
    pooled_final: Vec<Vec<f64>>,
    mean: Vec<f64>,
    pub logits: Vec<f64>,
}

impl EventSsm {
    /// Fresh model; every block gets its own stream derived from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Matrix::random_normal(config.num_channels as usize, config.embed_dim, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(config.total_blocks());
        for stage in &config.stages {
            for _ in 0..stage.blocks {
                let block_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(blocks.len() as u64 + 1);
                blocks.push(SsmBlockParams::init(
                    stage,
                    config.rate_range,
                    config.decay_init,
                    block_seed,
                )?);
            }
        }
        let width = config.output_width();
        let head_w = Matrix::random_normal(width, config.num_classes as usize, 1.0 / width as f64, &mut rng);
        let head_b = vec![0.0; config.num_classes as usize];
        Ok(Self {
            config,
            embedding,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Checks tensor shapes against the configuration.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let c = &self.config;
        let check = |what, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch { what, expected, got })
            }
        };
        check("embedding rows", c.num_channels as usize, self.embedding.rows)?;
        check("embedding cols", c.embed_dim, self.embedding.cols)?;
        check("block count", c.total_blocks(), self.blocks.len())?;
        let mut idx = 0;
        for stage in &c.stages {
            for _ in 0..stage.blocks {
                let b = &self.blocks[idx];
                b.validate()?;
                check("block input", stage.h_in, b.h_in())?;
                check("block state", stage.state, b.state_dim())?;
                check("block output", stage.h_out, b.h_out())?;
                idx += 1;
            }
        }
        check("head rows", c.output_width(), self.head_w.rows)?;
        check("head cols", c.num_classes as usize, self.head_w.cols)?;
        check("head bias", c.num_classes as usize, self.head_b.len())?;
        if !self.embedding.is_finite() || !self.head_w.is_finite() || !self.head_b.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("model parameters"));
        }
        Ok(())
    }

    /// Row `channel` of the embedding.
    pub fn embed_event(&self, channel: u32) -> Result<&[f64], ModelError> {
        if channel >= self.config.num_channels {
            return Err(ModelError::ChannelOutOfRange {
                channel,
                num_channels: self.config.num_channels,
            });
        }
        Ok(self.embedding.row(channel as usize))
    }

    /// Visits every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out: Vec<(ParamKind, &[f64])> = vec![(ParamKind::Embedding, &self.embedding.data)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((ParamKind::DecayRates { block: i }, b.rates.as_slice()));
            out.push((ParamKind::InputProjection { block: i }, &b.b.data));
            out.push((ParamKind::Readout { block: i }, &b.c.data));
            out.push((ParamKind::GateWeight { block: i }, &b.gate_w.data));
            out.push((ParamKind::GateBias { block: i }, &b.gate_b));
            out.push((ParamKind::NormScale { block: i }, &b.norm_scale));
            out.push((ParamKind::NormShift { block: i }, &b.norm_shift));
        }
        out.push((ParamKind::HeadWeight, &self.head_w.data));
        out.push((ParamKind::HeadBias, &self.head_b));
        out
    }

    /// Mutable counterpart of [`EventSsm::tensors`], same order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(ParamKind, &mut [f64])) {
        f(ParamKind::Embedding, &mut self.embedding.data);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(ParamKind::DecayRates { block: i }, b.rates.as_mut_slice());
            f(ParamKind::InputProjection { block: i }, &mut b.b.data);
            f(ParamKind::Readout { block: i }, &mut b.c.data);
            f(ParamKind::GateWeight { block: i }, &mut b.gate_w.data);
            f(ParamKind::GateBias { block: i }, &mut b.gate_b);
            f(ParamKind::NormScale { block: i }, &mut b.norm_scale);
            f(ParamKind::NormShift { block: i }, &mut b.norm_shift);
        }
        f(ParamKind::HeadWeight, &mut self.head_w.data);
        f(ParamKind::HeadBias, &mut self.head_b);
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Embedded events as timestamped vectors.
    pub(crate) fn embed_sequence(&self, seq: &EventSequence) -> Result<Vec<Timed>, ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut previous = 0;
        let mut out = Vec::with_capacity(seq.len());
        for ev in &seq.events {
            if ev.timestamp_us < previous {
                return Err(ModelError::NegativeTimeStep(
                    -super::us_to_ms(previous - ev.timestamp_us),
                ));
            }
            previous = ev.timestamp_us;
            out.push(Timed::new(ev.timestamp_us, self.embed_event(ev.channel)?.to_vec()));
        }
        Ok(out)
    }

    /// Class logits for one sequence.
    pub fn forward(&self, seq: &EventSequence) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward_cached(seq, &ForwardOptions::default())?.logits)
    }

    /// Logits for many sequences; each is evaluated independently.
    pub fn forward_batch(&self, seqs: &[EventSequence]) -> Result<Vec<Vec<f64>>, ModelError> {
        seqs.iter().map(|s| self.forward(s)).collect()
    }

    pub fn forward_cached(
        &self,
        seq: &EventSequence,
        opts: &ForwardOptions,
    ) -> Result<NetworkCache, ModelError> {
        let quant = |items: &mut Vec<Timed>, idx: usize| {
            if let Some(scales) = &opts.boundary_scales {
                for it in items.iter_mut() {
                    it.values.iter_mut().for_each(|v| *v = fake_quantize(*v, scales[idx]));
                }
            }
        };
        let mut items = self.embed_sequence(seq)?;
        quant(&mut items, 0);

        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut pool_inputs = Vec::with_capacity(self.config.stages.len());
        let mut b = 0;
        for stage in &self.config.stages {
            for _ in 0..stage.blocks {
                let (out, cache) = self.blocks[b].forward_cached(&items, &opts.engine)?;
                items = out;
                caches.push(cache);
                b += 1;
                quant(&mut items, b);
            }
            pool_inputs.push(items.len());
            items = pool_stride(&items, stage.pool_stride);
        }
        let width = self.config.output_width();
        let n = items.len() as f64;
        let mut mean = vec![0.0; width];
        for it in &items {
            for (m, v) in mean.iter_mut().zip(&it.values) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut logits = self.head_w.tr_matvec(&mean);
        for (l, b) in logits.iter_mut().zip(&self.head_b) {
            *l += b;
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("logits"));
        }
        Ok(NetworkCache {
            channels: seq.events.iter().map(|e| e.channel).collect(),
            blocks: caches,
            pool_inputs,
            pooled_final: items.into_iter().map(|t| t.values).collect(),
            mean,
            logits,
        })
    }

    /// Gradients of a scalar loss given `∂L/∂logits`.
    pub fn backward(
        &self,
        cache: &NetworkCache,
        d_logits: &[f64],
        engine: &ScanEngine,
    ) -> Result<Gradients, ModelError> {
        let mut grads = Gradients::zeros_like(self);
        let g = &mut grads.0;
        g.head_w.add_outer(&cache.mean, d_logits);
        for (gb, d) in g.head_b.iter_mut().zip(d_logits) {
            *gb += d;
        }
        let d_mean = self.head_w.matvec(d_logits);
        let n = cache.pooled_final.len() as f64;
        let mut d_items: Vec<Vec<f64>> =
            vec![d_mean.iter().map(|d| d / n).collect(); cache.pooled_final.len()];

        let mut b = self.blocks.len();
        for (si, stage) in self.config.stages.iter().enumerate().rev() {
            d_items = unpool(&d_items, stage.pool_stride, cache.pool_inputs[si]);
            for _ in 0..stage.blocks {
                b -= 1;
                d_items = self.blocks[b].backward(&cache.blocks[b], &d_items, &mut g.blocks[b], engine)?;
            }
        }
        for (ch, d) in cache.channels.iter().zip(&d_items) {
            let row = *ch as usize * g.embedding.cols;
            for (w, v) in g.embedding.data[row..row + g.embedding.cols].iter_mut().zip(d) {
                *w += v;
            }
        }
        Ok(grads)
    }
}

/// Adjoint of [`pool_stride`].
fn unpool(d_pooled: &[Vec<f64>], stride: usize, n: usize) -> Vec<Vec<f64>> {
    if stride == 1 {
        return d_pooled.to_vec();
    }
    let mut out = Vec::with_capacity(n);
    for (w, d) in d_pooled.iter().enumerate() {
        let len = stride.min(n - w * stride);
        let share: Vec<f64> = d.iter().map(|v| v / len as f64).collect();
        for _ in 0..len {
            out.push(share.clone());
        }
    }
    out
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (loss, grad)
}
