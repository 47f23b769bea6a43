//! Resolved configurations and the work behind each subcommand.
//!
//! Every command resolves defaults, an optional TOML file and flags into one
//! serializable config. That config is echoed into the run manifest and is
//! all `replay` needs to regenerate the outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use evssm::analysis::{build_report, PowerConfig, ResNetDepth, SsmFlopsConfig};
use evssm::event_io::{generate_synthetic, EventDataset, SyntheticSpec};
use evssm::hardware::{
    hardware_inference, quantize_model, run_calibration_demo, sweep, CalibrationDemoConfig, NoiseModel,
};
use evssm::model::checkpoint::{Checkpoint, LambdaStage};
use evssm::model::{DecayInit, ModelConfig};
use evssm::trainer::{evaluate, train, LambdaMode, TrainConfig};
use evssm::EventSsm;

use crate::error::CliError;

/// Recursively overlays `patch` on `base`; keys absent from `base` are rejected.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value, at: &str) -> Result<(), CliError> {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(CliError::Usage(format!("unknown config key `{path}`"))),
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

/// `default` overlaid with the TOML file at `path`, if any.
pub fn load_config<T: Serialize + DeserializeOwned>(default: T, path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(default) };
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut value = serde_json::to_value(&default).map_err(CliError::other)?;
    merge(&mut value, serde_json::to_value(table).map_err(CliError::other)?, "")?;
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> Result<EventDataset, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    EventDataset::from_bytes(&bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(CliError::other)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn require(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("{flag} is required")));
    }
    Ok(())
}

/// What a finished command produced.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            seed: 0,
            out: PathBuf::new(),
        }
    }
}

pub fn gen_data(cfg: &GenDataConfig) -> Result<RunOutput, CliError> {
    require(&cfg.out, "--out")?;
    let data = generate_synthetic(&cfg.spec, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&cfg.out, &data.to_bytes()?)?;
    let events: usize = data.sequences.iter().map(|s| s.len()).sum();
    Ok(RunOutput {
        outputs: vec![cfg.out.clone()],
        summary: vec![format!(
            "wrote {} sequences ({events} events, {} channels, {} classes) to {}",
            data.len(),
            data.num_channels,
            data.num_classes,
            cfg.out.display()
        )],
        ..RunOutput::default()
    })
}

/// Architecture of a single-stage model; channel and class counts come from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub features: usize,
    pub state: usize,
    pub blocks: usize,
    pub pool_stride: usize,
    pub rate_range: (f64, f64),
    pub decay_init: DecayInit,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            features: 8,
            state: 8,
            blocks: 2,
            pool_stride: 1,
            rate_range: (0.05, 2.0),
            decay_init: DecayInit::PerState,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, data: &EventDataset) -> ModelConfig {
        let mut cfg = ModelConfig::single_stage(data.num_channels, data.num_classes, self.features, self.state, self.blocks);
        cfg.stages[0].pool_stride = self.pool_stride;
        cfg.rate_range = self.rate_range;
        cfg.decay_init = self.decay_init;
        cfg
    }
}

/// How a data file is divided when no separate evaluation file is given:
/// the first `train_count` sequences train, the rest evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataSection {
    pub path: PathBuf,
    pub eval_path: Option<PathBuf>,
    /// Defaults to five sevenths of the file (500 of 700).
    pub train_count: Option<usize>,
}

impl DataSection {
    /// Loads both parts and pins `train_count` to the value used.
    fn load(&mut self, inputs: &mut Vec<PathBuf>) -> Result<(EventDataset, EventDataset), CliError> {
        require(&self.path, "--data")?;
        let data = read_dataset(&self.path)?;
        inputs.push(self.path.clone());
        if let Some(eval) = &self.eval_path {
            let e = read_dataset(eval)?;
            inputs.push(eval.clone());
            return Ok((data, e));
        }
        let n = *self.train_count.get_or_insert(data.len() * 5 / 7);
        if n == 0 || n >= data.len() {
            return Err(CliError::Usage(format!(
                "train count {n} leaves no training or evaluation data in {} sequences",
                data.len()
            )));
        }
        Ok(data.split_at(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainRunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub out: PathBuf,
}

pub fn train_cmd(cfg: &mut TrainRunConfig) -> Result<RunOutput, CliError> {
    require(&cfg.out, "--out")?;
    let mut out = RunOutput::default();
    let (tr, te) = cfg.data.load(&mut out.inputs)?;
    let model_cfg = cfg.model.model_config(&tr);
    let init = EventSsm::init(model_cfg, cfg.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let (model, report) = train(&init, &tr, &te, &cfg.train).map_err(|e| CliError::Usage(e.to_string()))?;
    let stage = match (cfg.train.max_epochs, cfg.train.lambda_mode) {
        (0, _) => LambdaStage::Initial,
        (_, LambdaMode::Free) => LambdaStage::Free,
        _ => LambdaStage::Fixed,
    };
    let ckpt = Checkpoint::new(model, stage).to_json().map_err(CliError::other)?;
    for (name, bytes) in [
        ("checkpoint.json", ckpt.into_bytes()),
        ("train_report.json", (report.to_json() + "\n").into_bytes()),
        ("train_curve.csv", report.to_csv().into_bytes()),
    ] {
        let path = cfg.out.join(name);
        write_file(&path, &bytes)?;
        out.outputs.push(path);
    }
    out.diverged = report.diverged || report.stage1_diverged;
    out.summary.push(format!(
        "{} epochs ({:?} mode, stage transitions at {:?}), final eval accuracy {:.4}",
        report.epochs.len(),
        cfg.train.lambda_mode,
        report.stage_transitions,
        report.final_eval_acc
    ));
    out.summary.push(format!("decay rates per block: {:?}", report.final_rates));
    if out.diverged {
        out.summary.push("training diverged and was rolled back to the last finite parameters".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepRunConfig {
    pub checkpoint: PathBuf,
    pub data: DataSection,
    pub noise_lsb: Vec<f64>,
    /// Relative standard deviations, as fractions.
    pub lambda_var: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            data: DataSection::default(),
            noise_lsb: vec![0.0],
            lambda_var: vec![0.0],
            repeats: 40,
            seed: 0,
            out: PathBuf::new(),
        }
    }
}

#[derive(Debug, Serialize)]
struct SweepSummaryFile<'a> {
    float_accuracy: f64,
    quantized_accuracy: f64,
    weight_scales: Vec<(String, f64)>,
    activations: &'a evssm::hardware::ActivationScales,
    sweep: &'a evssm::hardware::SweepResult,
}

pub fn hw_sweep(cfg: &mut SweepRunConfig) -> Result<RunOutput, CliError> {
    require(&cfg.checkpoint, "--checkpoint")?;
    require(&cfg.out, "--out")?;
    let mut out = RunOutput::default();
    let text = std::fs::read_to_string(&cfg.checkpoint).map_err(CliError::io(&cfg.checkpoint))?;
    let ckpt = Checkpoint::from_json(&text).map_err(|e| CliError::Other(format!("{}: {e}", cfg.checkpoint.display())))?;
    out.inputs.push(cfg.checkpoint.clone());
    let (calib, eval) = cfg.data.load(&mut out.inputs)?;
    let qm = quantize_model(&ckpt.model, &calib).map_err(CliError::other)?;
    let float_accuracy = evaluate(&ckpt.model, &eval).map_err(CliError::other)?.accuracy;
    let quantized_accuracy = hardware_inference(&qm, &eval, &NoiseModel::none(), 0.0, 1, cfg.seed)
        .map_err(CliError::other)?
        .mean;
    let result = sweep(&qm, &eval, &cfg.noise_lsb, &cfg.lambda_var, cfg.repeats, cfg.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let file = SweepSummaryFile {
        float_accuracy,
        quantized_accuracy,
        weight_scales: qm.weight_schemes.iter().map(|(k, s)| (format!("{k:?}"), s.scale)).collect(),
        activations: &qm.activations,
        sweep: &result,
    };
    for (name, bytes) in [("sweep.csv", result.to_csv().into_bytes()), ("sweep.json", to_json(&file)?)] {
        let path = cfg.out.join(name);
        write_file(&path, &bytes)?;
        out.outputs.push(path);
    }
    out.summary.push(format!(
        "float accuracy {float_accuracy:.4}, clean INT8 accuracy {quantized_accuracy:.4}, {} rows",
        result.rows.len()
    ));
    out.summary.push("sigma_lsb  sigma_rel  mean     std      n".into());
    for s in &result.summary {
        out.summary.push(format!(
            "{:<10} {:<10} {:.4}   {:.4}   {}",
            s.sigma_lsb, s.sigma_rel, s.mean, s.std, s.n
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub ssm: Option<SsmFlopsConfig>,
    pub resnet: Vec<u64>,
    pub frames: u64,
    pub power: Option<PowerConfig>,
    pub out: PathBuf,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            ssm: None,
            resnet: Vec::new(),
            frames: evssm::analysis::REFERENCE_FRAMES,
            power: None,
            out: PathBuf::new(),
        }
    }
}

pub fn analyze(cfg: &AnalyzeConfig) -> Result<RunOutput, CliError> {
    require(&cfg.out, "--out")?;
    if cfg.ssm.is_none() && cfg.resnet.is_empty() && cfg.power.is_none() {
        return Err(CliError::Usage(
            "nothing to analyze; pass --flops-config, --ssm-width, --resnet or --power-config".into(),
        ));
    }
    let resnets = cfg
        .resnet
        .iter()
        .map(|d| d.to_string().parse::<ResNetDepth>().map(|d| (d, cfg.frames)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::Usage)?;
    let report = build_report(cfg.ssm.as_ref(), &resnets, cfg.power.as_ref()).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&cfg.out, &to_json(&report)?)?;
    let mut summary = Vec::new();
    if let Some(s) = &report.ssm {
        summary.push(format!("event SSM: {} FLOPs ({:.2} GFLOPs)", s.flops.total, s.gflops));
    }
    for r in &report.resnet {
        summary.push(format!(
            "{:?} x {} frames: {:.2} GFLOPs ({:.2} without shortcut projections)",
            r.depth, r.frames, r.gflops, r.gflops_without_downsample
        ));
    }
    for (name, ratio) in &report.ratios {
        summary.push(format!("{name} / event SSM: {ratio:.2}x"));
    }
    if let Some(p) = &report.power {
        summary.push(format!("total power {:.2} mW", p.total_mw));
        for c in &p.components {
            summary.push(format!("  {:<14} {:>8.3} mW {:>5.1}%", c.name, c.power_mw, c.percent_rounded));
        }
    }
    for r in &report.reconciliation {
        summary.push(format!("reconcile {}: published {} vs computed {:.2}", r.quantity, r.published, r.computed));
    }
    Ok(RunOutput {
        outputs: vec![cfg.out.clone()],
        summary,
        ..RunOutput::default()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateConfig {
    pub demo: CalibrationDemoConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            demo: CalibrationDemoConfig::default(),
            seed: 0,
            out: PathBuf::new(),
        }
    }
}

pub fn calibrate_demo(cfg: &CalibrateConfig) -> Result<RunOutput, CliError> {
    require(&cfg.out, "--out")?;
    let report = run_calibration_demo(&cfg.demo, cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&cfg.out, &to_json(&report)?)?;
    let c0 = &report.coeffs.channels[0];
    Ok(RunOutput {
        outputs: vec![cfg.out.clone()],
        summary: vec![
            format!(
                "{} channels: NRMSE {:.4}% before, {:.2e}% after calibration",
                cfg.demo.channels,
                100.0 * report.pre_nrmse,
                100.0 * report.post_nrmse
            ),
            format!("fused vs sequential max difference {:e}", report.fused_vs_sequential_max_diff),
            format!(
                "channel 0 fused map: {:.6} * pos - {:.6} * neg + {:.6}",
                c0.g_pos, c0.g_neg, c0.o_diff
            ),
        ],
        ..RunOutput::default()
    })
}

/// A command together with its resolved configuration.
#[derive(Debug, Clone)]
pub enum Resolved {
    GenData(GenDataConfig),
    Train(TrainRunConfig),
    HwSweep(SweepRunConfig),
    Analyze(AnalyzeConfig),
    CalibrateDemo(CalibrateConfig),
}

impl Resolved {
    pub fn command(&self) -> &'static str {
        match self {
            Resolved::GenData(_) => "gen-data",
            Resolved::Train(_) => "train",
            Resolved::HwSweep(_) => "hw-sweep",
            Resolved::Analyze(_) => "analyze",
            Resolved::CalibrateDemo(_) => "calibrate-demo",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Resolved::GenData(c) => c.seed,
            Resolved::Train(c) => c.train.seed,
            Resolved::HwSweep(c) => c.seed,
            Resolved::Analyze(_) => 0,
            Resolved::CalibrateDemo(c) => c.seed,
        }
    }

    /// Output directory for directory commands, output file otherwise.
    pub fn out(&self) -> &Path {
        match self {
            Resolved::GenData(c) => &c.out,
            Resolved::Train(c) => &c.out,
            Resolved::HwSweep(c) => &c.out,
            Resolved::Analyze(c) => &c.out,
            Resolved::CalibrateDemo(c) => &c.out,
        }
    }

    fn out_mut(&mut self) -> &mut PathBuf {
        match self {
            Resolved::GenData(c) => &mut c.out,
            Resolved::Train(c) => &mut c.out,
            Resolved::HwSweep(c) => &mut c.out,
            Resolved::Analyze(c) => &mut c.out,
            Resolved::CalibrateDemo(c) => &mut c.out,
        }
    }

    fn writes_directory(&self) -> bool {
        matches!(self, Resolved::Train(_) | Resolved::HwSweep(_))
    }

    /// Directory that output paths in the manifest are relative to.
    pub fn output_root(&self) -> PathBuf {
        if self.writes_directory() {
            self.out().to_path_buf()
        } else {
            self.out().parent().map(Path::to_path_buf).unwrap_or_default()
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.writes_directory() {
            self.out().join("manifest.json")
        } else {
            let mut name = self.out().as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        }
    }

    /// Sends outputs to `dir`, keeping file names.
    pub fn redirect(&mut self, dir: &Path) {
        let new = if self.writes_directory() {
            dir.to_path_buf()
        } else {
            dir.join(self.out().file_name().unwrap_or_default())
        };
        *self.out_mut() = new;
    }

    pub fn config_value(&self) -> Result<serde_json::Value, CliError> {
        match self {
            Resolved::GenData(c) => serde_json::to_value(c),
            Resolved::Train(c) => serde_json::to_value(c),
            Resolved::HwSweep(c) => serde_json::to_value(c),
            Resolved::Analyze(c) => serde_json::to_value(c),
            Resolved::CalibrateDemo(c) => serde_json::to_value(c),
        }
        .map_err(CliError::other)
    }

    pub fn from_manifest(command: &str, config: serde_json::Value) -> Result<Self, CliError> {
        let bad = |e: serde_json::Error| CliError::Other(format!("manifest config: {e}"));
        Ok(match command {
            "gen-data" => Resolved::GenData(serde_json::from_value(config).map_err(bad)?),
            "train" => Resolved::Train(serde_json::from_value(config).map_err(bad)?),
            "hw-sweep" => Resolved::HwSweep(serde_json::from_value(config).map_err(bad)?),
            "analyze" => Resolved::Analyze(serde_json::from_value(config).map_err(bad)?),
            "calibrate-demo" => Resolved::CalibrateDemo(serde_json::from_value(config).map_err(bad)?),
            other => return Err(CliError::Other(format!("manifest names unknown command {other:?}"))),
        })
    }

    /// Runs the command. Values resolved while running (such as a default
    /// split point) are written back into the config.
    pub fn run(&mut self) -> Result<RunOutput, CliError> {
        match self {
            Resolved::GenData(c) => gen_data(c),
            Resolved::Train(c) => train_cmd(c),
            Resolved::HwSweep(c) => hw_sweep(c),
            Resolved::Analyze(c) => analyze(c),
            Resolved::CalibrateDemo(c) => calibrate_demo(c),
        }
    }
}

pub fn lambda_mode(s: &str) -> Result<LambdaMode, String> {
    s.parse()
}
