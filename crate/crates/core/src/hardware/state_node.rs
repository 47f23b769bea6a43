//! Short-term-memory state nodes: one decaying conductance per state dimension.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HardwareError;
use crate::model::decay;

/// Write-pulse parameters of the state-node array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseModel {
    pub v_pulse: f64,
    pub t_pulse_s: f64,
    /// State units written by one pulse.
    pub code_step: f64,
    /// Conductance of a device holding state 0, in siemens.
    pub g_min_s: f64,
    /// Conductance added per unit of stored state magnitude, in siemens.
    pub siemens_per_unit: f64,
}

impl Default for PulseModel {
    fn default() -> Self {
        Self {
            v_pulse: 1.4,
            t_pulse_s: 50e-6,
            code_step: 1.0,
            g_min_s: 10e-6,
            siemens_per_unit: 10e-6,
        }
    }
}

/// Pulses delivered to one device during one update, with its conductance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseRecord {
    pub pulses: u64,
    pub conductance_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateNodeArray {
    pub g: Vec<f64>,
    pub nominal_rate: f64,
    pub realized_rates: Vec<f64>,
    pub last_update_us: Option<u64>,
    pub pulse_model: PulseModel,
    pub energy_j: f64,
    pub total_pulses: u64,
    /// Filled only when recording is enabled.
    pub pulse_log: Option<Vec<PulseRecord>>,
}

impl StateNodeArray {
    pub fn new(nominal_rate: f64, realized_rates: Vec<f64>, pulse_model: PulseModel) -> Result<Self, HardwareError> {
        if let Some(&bad) = realized_rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(HardwareError::NonPositiveRate(bad));
        }
        Ok(Self {
            g: vec![0.0; realized_rates.len()],
            nominal_rate,
            realized_rates,
            last_update_us: None,
            pulse_model,
            energy_j: 0.0,
            total_pulses: 0,
            pulse_log: None,
        })
    }

    /// Every device exactly at `rate`.
    pub fn uniform(rate: f64, dim: usize, pulse_model: PulseModel) -> Result<Self, HardwareError> {
        Self::new(rate, vec![rate; dim], pulse_model)
    }

    pub fn record_pulses(mut self) -> Self {
        self.pulse_log = Some(Vec::new());
        self
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    pub fn conductance_of(&self, state: f64) -> f64 {
        self.pulse_model.g_min_s + self.pulse_model.siemens_per_unit * state.abs()
    }

    /// `G ← exp(-λ dt) G + v`, accounting write pulses against the decayed
    /// conductance of each device.
    pub fn update(&mut self, dt_ms: f64, vmm_output: &[f64]) -> Result<(), HardwareError> {
        if !(dt_ms >= 0.0) {
            return Err(HardwareError::NegativeTimeStep(dt_ms));
        }
        if vmm_output.len() != self.g.len() {
            return Err(HardwareError::DimensionMismatch {
                expected: self.g.len(),
                got: vmm_output.len(),
            });
        }
        if !vmm_output.iter().all(|v| v.is_finite()) {
            return Err(HardwareError::NonFinite);
        }
        let pm = self.pulse_model;
        let per_pulse = pm.v_pulse * pm.v_pulse * pm.t_pulse_s;
        for s in 0..self.g.len() {
            let decayed = decay(self.realized_rates[s], dt_ms) * self.g[s];
            let pulses = (vmm_output[s].abs() / pm.code_step).round() as u64;
            let conductance = self.conductance_of(decayed);
            self.energy_j += pulses as f64 * per_pulse * conductance;
            self.total_pulses += pulses;
            if let Some(log) = &mut self.pulse_log {
                log.push(PulseRecord {
                    pulses,
                    conductance_s: conductance,
                });
            }
            self.g[s] = decayed + vmm_output[s];
        }
        Ok(())
    }

    /// Advances to an absolute timestamp; the first update has zero elapsed time.
    pub fn update_at(&mut self, timestamp_us: u64, vmm_output: &[f64]) -> Result<(), HardwareError> {
        let last = self.last_update_us.unwrap_or(timestamp_us);
        if timestamp_us < last {
            return Err(HardwareError::NegativeTimeStep(-((last - timestamp_us) as f64) / 1000.0));
        }
        self.update(crate::model::us_to_ms(timestamp_us - last), vmm_output)?;
        self.last_update_us = Some(timestamp_us);
        Ok(())
    }
}

/// Functional form of [`StateNodeArray::update`].
pub fn state_node_update(
    nodes: &StateNodeArray,
    dt_ms: f64,
    vmm_output: &[f64],
) -> Result<StateNodeArray, HardwareError> {
    let mut next = nodes.clone();
    next.update(dt_ms, vmm_output)?;
    Ok(next)
}

/// One realized rate per device, `N(λ, (σ_rel λ)²)` clamped below at `0.01 λ`.
pub fn sample_lambda_variation<R: Rng + ?Sized>(
    nominal: &[f64],
    sigma_rel: f64,
    rng: &mut R,
) -> Result<Vec<f64>, HardwareError> {
    if !(0.0..=0.5).contains(&sigma_rel) {
        return Err(HardwareError::InvalidVariation(sigma_rel));
    }
    if sigma_rel == 0.0 {
        return Ok(nominal.to_vec());
    }
    Ok(nominal
        .iter()
        .map(|&lambda| {
            let z: f64 = StandardNormal.sample(rng);
            (lambda + sigma_rel * lambda * z).max(0.01 * lambda)
        })
        .collect())
}
