//! Event-driven state space models with a simulated memristive back end.
//!
//! - [`event_io`]: the EVS1 event format, synthetic data and stride pooling.
//! - [`scan`]: parallel associative scan and its adjoint.
//! - [`model`]: the SSM blocks, network, HiPPO initialization and checkpoints.
//! - [`trainer`]: batching, Adam, the three-stage decay-rate procedure.
//! - [`hardware`]: INT8 quantization, noise, state nodes, ADC calibration.
//! - [`analysis`]: FLOPs and power accounting.

pub mod analysis;
pub mod event_io;
pub mod hardware;
pub mod model;
pub mod scan;
pub mod tensor;
pub mod trainer;

pub use event_io::{EventDataset, EventSequence};
pub use model::{EventSsm, ModelConfig};

/// Mixes a master seed with stream indices (SplitMix64 finalizer per step).
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}
