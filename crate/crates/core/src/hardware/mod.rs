//! Simulated compute-in-memory execution of a trained model.

pub mod calibration;
mod inference;
pub mod noise;
pub mod quant;
pub mod state_node;

use thiserror::Error;

use crate::model::ModelError;

pub use calibration::{
    apply_calibration, fit_calibration, run_calibration_demo, CalibrationCoeffs, CalibrationDemoConfig,
    CalibrationReport, ChannelSamples,
};
pub use inference::{
    hardware_forward, hardware_inference, quantize_model, sweep, ActivationScales, BlockScales, HardwareOutput,
    HardwareReport, QuantizedModel, SweepResult, SweepRow, SweepSummary,
};
pub use noise::{inject_noise, lsb_to_nrmse, NoiseModel};
pub use quant::{fake_quantize, QuantScheme, QuantizedTensor};
pub use state_node::{sample_lambda_variation, state_node_update, PulseModel, PulseRecord, StateNodeArray};

#[derive(Debug, Error)]
pub enum HardwareError {
    #[error("noise sigma must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
    #[error("relative rate variation must lie in [0, 0.5], got {0}")]
    InvalidVariation(f64),
    #[error("device decay rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("negative time step {0} ms")]
    NegativeTimeStep(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value written to the state nodes")]
    NonFinite,
    #[error("calibration fit failed: {0}")]
    DegenerateFit(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("repeat count must be positive")]
    NoRepeats,
    #[error(transparent)]
    Model(#[from] ModelError),
}
