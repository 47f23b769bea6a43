//! The event-driven state space model.
//!
//! Each block keeps a real hidden state that decays as `exp(-λ Δt)` between
//! events and accumulates a projected input `B̄ᵀ x` at each event. Decay rates
//! are stored as positive rates in ms⁻¹; timestamps arrive in microseconds and
//! are converted at the block boundary.

mod block;
pub mod checkpoint;
pub mod hippo;
mod network;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_io::EventIoError;
use crate::scan::ScanError;
use crate::tensor::Matrix;

pub use block::{BlockCache, BlockTrace, SsmBlockParams};
pub use hippo::{hippo_init, HippoOperator};
pub use network::{
    argmax, cross_entropy, softmax, EventSsm, ForwardOptions, Gradients, NetworkCache, ParamKind,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("channel {channel} out of range for {num_channels} channels")]
    ChannelOutOfRange { channel: u32, num_channels: u32 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("negative time step {0} ms; timestamps must be non-decreasing")]
    NegativeTimeStep(f64),
    #[error("decay rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("sequence has no events")]
    EmptySequence,
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Events(#[from] EventIoError),
}

/// Layer-norm variance floor.
pub const NORM_EPS: f64 = 1e-5;
/// Below this rate the input factor switches to its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-6;
const DERIVATIVE_SERIES_THRESHOLD: f64 = 1e-4;

/// Converts a timestamp difference to milliseconds.
#[inline]
pub fn us_to_ms(dt_us: u64) -> f64 {
    dt_us as f64 / 1000.0
}

/// `exp(-λ Δt)`, the per-event decay of the hidden state.
pub fn transition_factor(rate: f64, dt_ms: f64) -> Result<f64, ModelError> {
    if dt_ms < 0.0 {
        return Err(ModelError::NegativeTimeStep(dt_ms));
    }
    if !(rate > 0.0) {
        return Err(ModelError::NonPositiveRate(rate));
    }
    Ok(decay(rate, dt_ms))
}

#[inline]
pub(crate) fn decay(rate: f64, dt_ms: f64) -> f64 {
    (-rate * dt_ms).exp()
}

/// Scalar in `B̄ = ((1 - e^{-λ}) / λ) · B`.
pub fn input_factor(rate: f64) -> Result<f64, ModelError> {
    if !(rate > 0.0) {
        return Err(ModelError::NonPositiveRate(rate));
    }
    Ok(input_factor_unchecked(rate))
}

#[inline]
pub(crate) fn input_factor_unchecked(rate: f64) -> f64 {
    if rate < SERIES_THRESHOLD {
        1.0 - rate / 2.0 + rate * rate / 6.0
    } else {
        -(-rate).exp_m1() / rate
    }
}

/// `d/dλ [(1 - e^{-λ}) / λ]`.
#[inline]
pub(crate) fn input_factor_derivative(rate: f64) -> f64 {
    if rate < DERIVATIVE_SERIES_THRESHOLD {
        -0.5 + rate / 3.0 - rate * rate / 8.0 + rate * rate * rate / 30.0
    } else {
        ((-rate).exp_m1() * (1.0 + rate) + rate) / (rate * rate)
    }
}

/// `B̄ = input_factor(λ) · B` for a shared rate.
pub fn input_projection_bar(rate: f64, b: &Matrix) -> Result<Matrix, ModelError> {
    let f = input_factor(rate)?;
    Ok(Matrix::from_vec(
        b.rows,
        b.cols,
        b.data.iter().map(|x| f * x).collect(),
    ))
}

/// Exact GELU, `x Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated activation with residual: `y + y ⊙ σ(W · GELU(y) + b)`.
pub fn gated_block_output(y: &[f64], gate_w: &Matrix, gate_b: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = y.iter().map(|&v| gelu(v)).collect();
    let z = gate_w.matvec(&g);
    y.iter()
        .zip(z.iter().zip(gate_b))
        .map(|(&v, (&z, &b))| v + v * sigmoid(z + b))
        .collect()
}

/// Decay rates of one block, in ms⁻¹.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rates", rename_all = "snake_case")]
pub enum DecayRates {
    /// One rate for the whole state (`Λ = λI`).
    Shared(f64),
    /// `n` rates over contiguous equal partitions of the state; `n = H` is
    /// one rate per state dimension.
    Grouped(Vec<f64>),
}

impl DecayRates {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            DecayRates::Shared(r) => std::slice::from_ref(r),
            DecayRates::Grouped(r) => r,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            DecayRates::Shared(r) => std::slice::from_mut(r),
            DecayRates::Grouped(r) => r,
        }
    }

    /// Group index of state dimension `s` in a state of size `state`.
    #[inline]
    pub fn group_of(&self, s: usize, state: usize) -> usize {
        match self {
            DecayRates::Shared(_) => 0,
            DecayRates::Grouped(r) => s * r.len() / state,
        }
    }

    #[inline]
    pub fn rate_of(&self, s: usize, state: usize) -> f64 {
        match self {
            DecayRates::Shared(r) => *r,
            DecayRates::Grouped(r) => r[s * r.len() / state],
        }
    }

    /// Rate of every state dimension.
    pub fn expand(&self, state: usize) -> Vec<f64> {
        (0..state).map(|s| self.rate_of(s, state)).collect()
    }

    /// Arithmetic mean of the stored rates, summed in index order.
    pub fn mean(&self) -> f64 {
        let r = self.as_slice();
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, DecayRates::Shared(_))
    }
}

/// Hidden state of one block together with the time of its last update.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub h: Vec<f64>,
    pub last_timestamp_us: u64,
}

impl StateVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            last_timestamp_us: 0,
        }
    }
}

/// `h ← exp(-λ Δt) h + B̄x` advancing the state to `timestamp_us`.
pub fn step_state(
    state: &StateVector,
    timestamp_us: u64,
    projected: &[f64],
    rates: &DecayRates,
) -> Result<StateVector, ModelError> {
    if projected.len() != state.h.len() {
        return Err(ModelError::DimensionMismatch {
            what: "projected input",
            expected: state.h.len(),
            got: projected.len(),
        });
    }
    if !projected.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite("projected input"));
    }
    if timestamp_us < state.last_timestamp_us {
        return Err(ModelError::NegativeTimeStep(
            -us_to_ms(state.last_timestamp_us - timestamp_us),
        ));
    }
    let dt = us_to_ms(timestamp_us - state.last_timestamp_us);
    let dim = state.h.len();
    let mut h = Vec::with_capacity(dim);
    for s in 0..dim {
        let a = transition_factor(rates.rate_of(s, dim), dt)?;
        h.push(a * state.h[s] + projected[s]);
    }
    Ok(StateVector {
        h,
        last_timestamp_us: timestamp_us,
    })
}

/// One stage: `blocks` SSM blocks followed by stride pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub h_in: usize,
    pub state: usize,
    pub h_out: usize,
    pub pool_stride: usize,
}

/// Initial layout of each block's decay rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayInit {
    PerState,
    Shared,
    Groups(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_channels: u32,
    pub num_classes: u32,
    pub embed_dim: usize,
    pub stages: Vec<StageConfig>,
    /// Initial rates are an affine image of the HiPPO spectrum on this range.
    pub rate_range: (f64, f64),
    pub decay_init: DecayInit,
}

impl ModelConfig {
    /// A single-stage model with `blocks` blocks of equal width.
    pub fn single_stage(
        num_channels: u32,
        num_classes: u32,
        features: usize,
        state: usize,
        blocks: usize,
    ) -> Self {
        Self {
            num_channels,
            num_classes,
            embed_dim: features,
            stages: vec![StageConfig {
                blocks,
                h_in: features,
                state,
                h_out: features,
                pool_stride: 1,
            }],
            rate_range: (0.05, 2.0),
            decay_init: DecayInit::PerState,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_channels == 0 || self.num_classes == 0 || self.embed_dim == 0 {
            return bad("channels, classes and embedding dim must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        let (lo, hi) = self.rate_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("rate range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let mut width = self.embed_dim;
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.state == 0 || st.pool_stride == 0 {
                return bad(format!("stage {i}: blocks, state and pool stride must be positive"));
            }
            if st.h_in != st.h_out {
                return bad(format!("stage {i}: residual needs h_in == h_out"));
            }
            if st.h_in != width {
                return bad(format!("stage {i}: input width {} does not chain from {width}", st.h_in));
            }
            if let DecayInit::Groups(n) = self.decay_init {
                if n == 0 || n > st.state {
                    return bad(format!("stage {i}: {n} decay groups for state {}", st.state));
                }
            }
            width = st.h_out;
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Output width of the last stage.
    pub fn output_width(&self) -> usize {
        self.stages.last().map_or(self.embed_dim, |s| s.h_out)
    }
}
