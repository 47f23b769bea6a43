//! Static component power and state-node write energy.

use serde::{Deserialize, Serialize};

use super::AnalysisError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerComponent {
    pub name: String,
    pub count: f64,
    pub unit_mw: f64,
    /// True when count or unit power was solved from published shares
    /// rather than stated directly.
    pub derived: bool,
    pub note: String,
}

impl PowerComponent {
    pub fn power_mw(&self) -> f64 {
        self.count * self.unit_mw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub components: Vec<PowerComponent>,
    /// Conversion clock the static figures were measured at.
    pub clock_mhz: f64,
    pub v_pulse: f64,
    pub t_pulse_s: f64,
    /// Measured analog power of one crossbar array.
    pub array_unit_mw: f64,
}

pub const ARRAY_UNIT_MW: f64 = 0.028;
pub const LUT_UNIT_MW: f64 = 0.25;

impl PowerConfig {
    /// Inventory matching the published 34 mW budget. Array power per unit
    /// and LUT power per unit are stated; the array count, ADC unit power,
    /// state-node and remaining digital totals are solved from the
    /// published shares (ADC 43.7 %, arrays 30.3 %, state nodes 0.4 %).
    pub fn published_preset() -> Self {
        let c = |name: &str, count: f64, unit_mw: f64, derived: bool, note: &str| PowerComponent {
            name: name.into(),
            count,
            unit_mw,
            derived,
            note: note.into(),
        };
        Self {
            components: vec![
                c(
                    "adc",
                    368.0,
                    0.040375,
                    true,
                    "one 8-bit ADC per array; unit power solved from the 43.7% share of 34 mW",
                ),
                c(
                    "rram_arrays",
                    368.0,
                    ARRAY_UNIT_MW,
                    true,
                    "count solved as 30.3% of 34 mW divided by 0.028 mW per array",
                ),
                c("lut", 12.0, LUT_UNIT_MW, true, "GELU and sigmoid tables, two per block over six blocks"),
                c("state_nodes", 1.0, 0.136, true, "0.4% share of 34 mW"),
                c("other_digital", 1.0, 5.712, true, "remainder of the 34 mW budget"),
            ],
            clock_mhz: 40.0,
            v_pulse: 1.4,
            t_pulse_s: 50e-6,
            array_unit_mw: ARRAY_UNIT_MW,
        }
    }

    pub fn single(name: &str, count: f64, unit_mw: f64) -> Self {
        Self {
            components: vec![PowerComponent {
                name: name.into(),
                count,
                unit_mw,
                derived: false,
                note: String::new(),
            }],
            ..Self::published_preset()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentShare {
    pub name: String,
    pub power_mw: f64,
    pub percent: f64,
    /// `percent` rounded to one decimal.
    pub percent_rounded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub total_mw: f64,
    pub components: Vec<ComponentShare>,
    /// Array analog power divided by the per-array figure.
    pub implied_array_count: Option<f64>,
}

impl PowerBreakdown {
    pub fn share(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.percent)
    }
}

pub fn power_breakdown(config: &PowerConfig) -> Result<PowerBreakdown, AnalysisError> {
    if let Some(c) = config
        .components
        .iter()
        .find(|c| !(c.unit_mw >= 0.0 && c.count >= 0.0))
    {
        return Err(AnalysisError::NegativePower(c.name.clone()));
    }
    let total: f64 = config.components.iter().map(PowerComponent::power_mw).sum();
    if !(total > 0.0) {
        return Err(AnalysisError::ZeroTotalPower);
    }
    let components = config
        .components
        .iter()
        .map(|c| {
            let percent = 100.0 * c.power_mw() / total;
            ComponentShare {
                name: c.name.clone(),
                power_mw: c.power_mw(),
                percent,
                percent_rounded: (percent * 10.0).round() / 10.0,
            }
        })
        .collect();
    let implied_array_count = config
        .components
        .iter()
        .find(|c| c.name == "rram_arrays")
        .map(|c| c.power_mw() / config.array_unit_mw);
    Ok(PowerBreakdown {
        total_mw: total,
        components,
        implied_array_count,
    })
}

/// `Σ N · V² · G · t` over every update, with `pulses[i]` delivered to a
/// device of conductance `conductances_s[i]`.
pub fn sn_energy(pulses: &[u64], conductances_s: &[f64], config: &PowerConfig) -> Result<f64, AnalysisError> {
    if pulses.len() != conductances_s.len() {
        return Err(AnalysisError::LengthMismatch {
            pulses: pulses.len(),
            conductances: conductances_s.len(),
        });
    }
    if let Some(&g) = conductances_s.iter().find(|g| !(**g >= 0.0)) {
        return Err(AnalysisError::NegativeConductance(g));
    }
    let per_pulse = config.v_pulse * config.v_pulse * config.t_pulse_s;
    Ok(pulses
        .iter()
        .zip(conductances_s)
        .map(|(&n, &g)| n as f64 * per_pulse * g)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pulse_energy() {
        let e = sn_energy(&[1], &[100e-6], &PowerConfig::published_preset()).unwrap();
        assert!((e - 9.8e-9).abs() <= 1e-24, "{e:e}");
    }

    #[test]
    fn energy_is_linear_and_zero_for_no_events() {
        let cfg = PowerConfig::published_preset();
        assert_eq!(sn_energy(&[], &[], &cfg).unwrap(), 0.0);
        let one = sn_energy(&[1], &[50e-6], &cfg).unwrap();
        let seven = sn_energy(&[7], &[50e-6], &cfg).unwrap();
        assert!((seven - 7.0 * one).abs() < 1e-22);
    }

    #[test]
    fn negative_conductance_rejected() {
        let cfg = PowerConfig::published_preset();
        assert!(sn_energy(&[1], &[-1e-6], &cfg).is_err());
        assert!(sn_energy(&[1, 2], &[1e-6], &cfg).is_err());
    }

    #[test]
    fn preset_budget() {
        let b = power_breakdown(&PowerConfig::published_preset()).unwrap();
        assert!((b.total_mw - 34.0).abs() < 0.05);
        assert!((b.share("adc").unwrap() - 43.7).abs() < 0.05);
        assert!((b.share("rram_arrays").unwrap() - 30.3).abs() < 0.05);
        assert!((b.share("state_nodes").unwrap() - 0.4).abs() < 0.05);
        assert!((b.implied_array_count.unwrap() - 368.0).abs() < 1e-9);
        let sum: f64 = b.components.iter().map(|c| c.percent_rounded).sum();
        assert!((sum - 100.0).abs() <= 0.1 + 1e-9);
    }

    #[test]
    fn single_component_is_everything() {
        let b = power_breakdown(&PowerConfig::single("adc", 3.0, 1.0)).unwrap();
        assert_eq!(b.components[0].percent, 100.0);
        assert!(power_breakdown(&PowerConfig::single("adc", 0.0, 1.0)).is_err());
    }
}
