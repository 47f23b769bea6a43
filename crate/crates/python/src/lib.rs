//! Python bindings. Configuration and reports cross the boundary as plain
//! dicts; a config dict is overlaid on the defaults and unknown keys are
//! rejected.

use std::path::PathBuf;

use evssm::analysis::{build_report, PowerConfig, ResNetDepth, SsmFlopsConfig};
use evssm::event_io::{generate_synthetic, Event, EventDataset, EventSequence, SyntheticSpec};
use evssm::hardware::{hardware_inference, quantize_model, run_calibration_demo, sweep, CalibrationDemoConfig, NoiseModel};
use evssm::model::checkpoint::{Checkpoint, LambdaStage};
use evssm::model::ModelConfig;
use evssm::trainer::{evaluate, train as train_model, LambdaMode, TrainConfig};
use evssm::EventSsm;
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn merge(base: &mut Value, patch: Value, at: &str) -> PyResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(PyKeyError::new_err(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn overlay<T: Serialize + DeserializeOwned>(default: T, patch: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(patch) = patch else { return Ok(default) };
    let mut value = serde_json::to_value(&default).map_err(value_err)?;
    merge(&mut value, from_py(patch.as_any())?, "")?;
    serde_json::from_value(value).map_err(value_err)
}

#[pyclass(frozen, module = "evssm")]
struct Dataset {
    inner: EventDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic ordered-burst task; `spec` overrides individual fields.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, spec = None))]
    fn generate(py: Python<'_>, seed: u64, spec: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let spec = overlay(SyntheticSpec::default(), spec)?;
        let inner = py.detach(|| generate_synthetic(&spec, seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Builds a dataset from `(events, label)` pairs, where `events` is a
    /// list of `(timestamp_us, channel)`.
    #[new]
    fn new(num_channels: u32, num_classes: u32, sequences: Vec<(Vec<(u64, u32)>, u32)>) -> PyResult<Self> {
        let seqs = sequences
            .into_iter()
            .map(|(ev, label)| EventSequence::new(ev.into_iter().map(|(t, c)| Event::new(t, c)).collect(), label))
            .collect();
        let inner = EventDataset::new(num_channels, num_classes, seqs);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: EventDataset::from_bytes(data).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(value_err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let bytes = self.inner.to_bytes().map_err(value_err)?;
        std::fs::write(&path, bytes).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn num_channels(&self) -> u32 {
        self.inner.num_channels
    }

    #[getter]
    fn num_classes(&self) -> u32 {
        self.inner.num_classes
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(sequences={}, channels={}, classes={})",
            self.inner.len(),
            self.inner.num_channels,
            self.inner.num_classes
        )
    }

    /// `(events, label)` for sequence `i`.
    fn sequence(&self, i: usize) -> PyResult<(Vec<(u64, u32)>, u32)> {
        let s = self
            .inner
            .sequences
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        Ok((s.events.iter().map(|e| (e.timestamp_us, e.channel)).collect(), s.label))
    }

    /// The first `n` sequences and the rest.
    fn split_at(&self, n: usize) -> PyResult<(Self, Self)> {
        if n > self.inner.len() {
            return Err(PyValueError::new_err(format!("split {n} beyond {} sequences", self.inner.len())));
        }
        let (a, b) = self.inner.split_at(n);
        Ok((Self { inner: a }, Self { inner: b }))
    }
}

#[pyclass(frozen, module = "evssm")]
struct Model {
    inner: EventSsm,
    stage: LambdaStage,
}

#[pymethods]
impl Model {
    /// Single-stage model; `config` overrides fields of the full model
    /// configuration (`embed_dim`, `stages`, `rate_range`, `decay_init`).
    #[new]
    #[pyo3(signature = (num_channels, num_classes, features = 8, state = 8, blocks = 2, seed = 0, config = None))]
    fn new(
        num_channels: u32,
        num_classes: u32,
        features: usize,
        state: usize,
        blocks: usize,
        seed: u64,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg = overlay(ModelConfig::single_stage(num_channels, num_classes, features, state, blocks), config)?;
        Ok(Self {
            inner: EventSsm::init(cfg, seed).map_err(value_err)?,
            stage: LambdaStage::Initial,
        })
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        let ck = Checkpoint::from_json(text).map_err(value_err)?;
        Ok(Self {
            inner: ck.model,
            stage: ck.lambda_stage,
        })
    }

    fn to_checkpoint(&self) -> PyResult<String> {
        Checkpoint::new(self.inner.clone(), self.stage).to_json().map_err(value_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Linear decay rates (1/ms) of every block, in order.
    #[getter]
    fn decay_rates(&self) -> Vec<Vec<f64>> {
        self.inner.blocks.iter().map(|b| b.rates.as_slice().to_vec()).collect()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Class logits for one sequence of `(timestamp_us, channel)` events.
    fn logits(&self, events: Vec<(u64, u32)>) -> PyResult<Vec<f64>> {
        let seq = EventSequence::new(events.into_iter().map(|(t, c)| Event::new(t, c)).collect(), 0);
        self.inner.forward(&seq).map_err(value_err)
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| evaluate(&self.inner, &dataset.inner)).map_err(value_err)?;
        to_py(py, &report)
    }
}

/// Trains a copy of `model`; returns the trained model and the report.
/// `config` overrides training options such as `lambda_mode`
/// (`"free"`, `"fixed"`, `"two_tier"`), `max_epochs` or `learning_rate`.
#[pyfunction]
#[pyo3(signature = (model, train_set, eval_set, config = None))]
fn train<'py>(
    py: Python<'py>,
    model: &Model,
    train_set: &Dataset,
    eval_set: &Dataset,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = overlay(TrainConfig::default(), config)?;
    let (trained, report) = py
        .detach(|| train_model(&model.inner, &train_set.inner, &eval_set.inner, &cfg))
        .map_err(value_err)?;
    let stage = match (cfg.max_epochs, cfg.lambda_mode) {
        (0, _) => model.stage,
        (_, LambdaMode::Free) => LambdaStage::Free,
        _ => LambdaStage::Fixed,
    };
    Ok((Model { inner: trained, stage }, to_py(py, &report)?))
}

/// INT8 deployment of `model` (scales calibrated on `calibration`) swept
/// over read noise in LSB and relative decay-rate variation.
#[pyfunction]
#[pyo3(signature = (model, calibration, dataset, noise_lsb = vec![0.0], lambda_var = vec![0.0], repeats = 40, seed = 0))]
fn hardware_sweep<'py>(
    py: Python<'py>,
    model: &Model,
    calibration: &Dataset,
    dataset: &Dataset,
    noise_lsb: Vec<f64>,
    lambda_var: Vec<f64>,
    repeats: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let (clean, result) = py
        .detach(|| {
            let qm = quantize_model(&model.inner, &calibration.inner)?;
            let clean = hardware_inference(&qm, &dataset.inner, &NoiseModel::none(), 0.0, 1, seed)?.mean;
            Ok::<_, evssm::hardware::HardwareError>((clean, sweep(&qm, &dataset.inner, &noise_lsb, &lambda_var, repeats, seed)?))
        })
        .map_err(value_err)?;
    let out = to_py(py, &result)?;
    out.set_item("quantized_accuracy", clean)?;
    Ok(out)
}

/// FLOP and power accounting. `ssm` is a FLOP config dict overlaid on the
/// two-stage reference of width 8, or an int giving the reference width.
/// `power` is `"paper"` or a dict overlaid on that preset.
#[pyfunction]
#[pyo3(signature = (ssm = None, resnet = vec![], frames = evssm::analysis::REFERENCE_FRAMES, power = None))]
fn analyze<'py>(
    py: Python<'py>,
    ssm: Option<&Bound<'_, PyAny>>,
    resnet: Vec<u64>,
    frames: u64,
    power: Option<&Bound<'_, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let ssm = match ssm {
        None => None,
        Some(obj) => Some(match obj.extract::<u64>() {
            Ok(w) => SsmFlopsConfig::two_stage_reference(w),
            Err(_) => overlay(SsmFlopsConfig::two_stage_reference(8), Some(obj.cast::<PyDict>()?))?,
        }),
    };
    let power = match power {
        None => None,
        Some(obj) => Some(match obj.extract::<String>() {
            Ok(s) if s == "paper" => PowerConfig::published_preset(),
            Ok(s) => return Err(PyValueError::new_err(format!("unknown power preset {s:?}"))),
            Err(_) => overlay(PowerConfig::published_preset(), Some(obj.cast::<PyDict>()?))?,
        }),
    };
    let resnets = resnet
        .iter()
        .map(|d| d.to_string().parse::<ResNetDepth>().map(|d| (d, frames)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(PyValueError::new_err)?;
    let report = build_report(ssm.as_ref(), &resnets, power.as_ref()).map_err(value_err)?;
    to_py(py, &report)
}

/// Synthesizes distorted converter readings, fits the two-stage
/// calibration and reports error before and after.
#[pyfunction]
#[pyo3(signature = (seed = 0, config = None, identity = false))]
fn calibration_demo<'py>(
    py: Python<'py>,
    seed: u64,
    config: Option<&Bound<'_, PyDict>>,
    identity: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let base = if identity {
        let d = CalibrationDemoConfig::default();
        CalibrationDemoConfig::identity(d.channels, d.samples)
    } else {
        CalibrationDemoConfig::default()
    };
    let cfg = overlay(base, config)?;
    let report = run_calibration_demo(&cfg, seed).map_err(value_err)?;
    to_py(py, &report)
}

#[pymodule(name = "evssm")]
fn evssm_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(hardware_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_demo, m)?)?;
    Ok(())
}
