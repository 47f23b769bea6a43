//! `evssm`: reproducible experiments for the event-driven SSM.

mod commands;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{
    load_config, AnalyzeConfig, CalibrateConfig, GenDataConfig, Resolved, SweepRunConfig, TrainRunConfig,
};
use error::CliError;
use evssm::analysis::{PowerConfig, SsmFlopsConfig, StateEvolution};
use evssm::hardware::CalibrationDemoConfig;
use evssm::trainer::LambdaMode;
use manifest::{digest_file, FileDigest, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "evssm", version, about = "Event-driven state space model experiments")]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic order-discrimination dataset as an EVS1 file.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint, report and loss curve.
    Train(TrainArgs),
    /// Quantize a checkpoint and sweep read noise and decay-rate variation.
    HwSweep(SweepArgs),
    /// FLOPs and power accounting.
    Analyze(AnalyzeArgs),
    /// Fit and evaluate the two-stage ADC calibration on synthetic readouts.
    CalibrateDemo(CalibrateArgs),
    /// Re-run a manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// TOML file with `seed`, `out` and a `[spec]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<u32>,
    #[arg(long)]
    classes: Option<u32>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    events_per_burst: Option<usize>,
    #[arg(long)]
    spacing_us: Option<u64>,
    #[arg(long)]
    gap_us: Option<u64>,
    #[arg(long)]
    jitter_us: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// EVS1 file; without --eval-data the first --train-count sequences train.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Defaults to five sevenths of the file.
    #[arg(long)]
    train_count: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML file with `[data]`, `[model]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = commands::lambda_mode)]
    lambda_mode: Option<LambdaMode>,
    /// Total epoch budget over all stages.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    state: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A fraction, or a percentage when suffixed with `%`.
fn parse_fraction(s: &str) -> Result<f64, String> {
    let (num, div) = match s.strip_suffix('%') {
        Some(n) => (n, 100.0),
        None => (s, 1.0),
    };
    num.trim()
        .parse::<f64>()
        .map(|v| v / div)
        .map_err(|e| format!("{s:?}: {e}"))
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Read-noise standard deviations in LSB, comma separated.
    #[arg(long, value_delimiter = ',')]
    noise_lsb: Option<Vec<f64>>,
    /// Relative decay-rate variations, e.g. `0.05,0.1` or `5%,10%`.
    #[arg(long, value_delimiter = ',', value_parser = parse_fraction)]
    lambda_var: Option<Vec<f64>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvolutionArg {
    InputWidth,
    StateWidth,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// TOML description of the SSM, overlaid on the two-stage reference.
    #[arg(long)]
    flops_config: Option<PathBuf>,
    /// Two-stage reference SSM with this feature width.
    #[arg(long, conflicts_with = "flops_config")]
    ssm_width: Option<u64>,
    #[arg(long, value_enum)]
    state_evolution: Option<EvolutionArg>,
    /// ResNet depths (18, 50), comma separated.
    #[arg(long, value_delimiter = ',')]
    resnet: Option<Vec<u64>>,
    #[arg(long)]
    frames: Option<u64>,
    /// `paper` for the shipped inventory, or a TOML file.
    #[arg(long)]
    power_config: Option<String>,
    /// Output JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    nonlinearity_lsb: Option<f64>,
    #[arg(long)]
    noise_lsb: Option<f64>,
    /// No distortion at all.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Where the regenerated outputs go.
    #[arg(long)]
    out: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_data(d: &mut commands::DataSection, a: DataArgs) {
    set(&mut d.path, a.data);
    if a.eval_data.is_some() {
        d.eval_path = a.eval_data;
    }
    if a.train_count.is_some() {
        d.train_count = a.train_count;
    }
}

fn resolve(command: Command) -> Result<Resolved, CliError> {
    Ok(match command {
        Command::GenData(a) => {
            let mut c = load_config(GenDataConfig::default(), a.config.as_deref())?;
            set(&mut c.spec.num_channels, a.channels);
            set(&mut c.spec.num_classes, a.classes);
            set(&mut c.spec.num_sequences, a.sequences);
            set(&mut c.spec.events_per_burst, a.events_per_burst);
            set(&mut c.spec.event_spacing_us, a.spacing_us);
            set(&mut c.spec.burst_gap_us, a.gap_us);
            set(&mut c.spec.jitter_us, a.jitter_us);
            set(&mut c.seed, a.seed);
            set(&mut c.out, a.out);
            Resolved::GenData(c)
        }
        Command::Train(a) => {
            let mut c = load_config(TrainRunConfig::default(), a.config.as_deref())?;
            apply_data(&mut c.data, a.data);
            set(&mut c.train.lambda_mode, a.lambda_mode);
            set(&mut c.train.max_epochs, a.epochs);
            set(&mut c.train.stage1_max_epochs, a.stage1_epochs);
            set(&mut c.train.learning_rate, a.lr);
            set(&mut c.train.batch_size, a.batch_size);
            set(&mut c.train.seed, a.seed);
            set(&mut c.model.features, a.features);
            set(&mut c.model.state, a.state);
            set(&mut c.model.blocks, a.blocks);
            set(&mut c.out, a.out);
            c.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Resolved::Train(c)
        }
        Command::HwSweep(a) => {
            let mut c = load_config(SweepRunConfig::default(), a.config.as_deref())?;
            set(&mut c.checkpoint, a.checkpoint);
            apply_data(&mut c.data, a.data);
            set(&mut c.noise_lsb, a.noise_lsb);
            set(&mut c.lambda_var, a.lambda_var);
            set(&mut c.repeats, a.repeats);
            set(&mut c.seed, a.seed);
            set(&mut c.out, a.out);
            Resolved::HwSweep(c)
        }
        Command::Analyze(a) => {
            let mut c = load_config(AnalyzeConfig::default(), a.config.as_deref())?;
            if let Some(path) = &a.flops_config {
                c.ssm = Some(load_config(SsmFlopsConfig::two_stage_reference(8), Some(path))?);
            }
            if let Some(w) = a.ssm_width {
                c.ssm = Some(SsmFlopsConfig::two_stage_reference(w));
            }
            if let (Some(ssm), Some(e)) = (&mut c.ssm, a.state_evolution) {
                ssm.state_evolution = match e {
                    EvolutionArg::InputWidth => StateEvolution::InputWidth,
                    EvolutionArg::StateWidth => StateEvolution::StateWidth,
                };
            }
            set(&mut c.resnet, a.resnet);
            set(&mut c.frames, a.frames);
            match a.power_config.as_deref() {
                None => {}
                Some("paper") => c.power = Some(PowerConfig::published_preset()),
                Some(path) => c.power = Some(load_config(PowerConfig::published_preset(), Some(Path::new(path)))?),
            }
            set(&mut c.out, a.out);
            Resolved::Analyze(c)
        }
        Command::CalibrateDemo(a) => {
            let mut c = load_config(CalibrateConfig::default(), a.config.as_deref())?;
            if a.identity {
                c.demo = CalibrationDemoConfig::identity(c.demo.channels, c.demo.samples);
            }
            set(&mut c.demo.channels, a.channels);
            set(&mut c.demo.samples, a.samples);
            set(&mut c.demo.nonlinearity_lsb, a.nonlinearity_lsb);
            set(&mut c.demo.noise_lsb, a.noise_lsb);
            set(&mut c.seed, a.seed);
            set(&mut c.out, a.out);
            Resolved::CalibrateDemo(c)
        }
        Command::Replay(_) => unreachable!("replay is handled before resolution"),
    })
}

fn config_inputs(command: &Command) -> Vec<PathBuf> {
    let mut v: Vec<Option<&PathBuf>> = Vec::new();
    match command {
        Command::GenData(a) => v.push(a.config.as_ref()),
        Command::Train(a) => v.push(a.config.as_ref()),
        Command::HwSweep(a) => v.push(a.config.as_ref()),
        Command::Analyze(a) => {
            v.push(a.config.as_ref());
            v.push(a.flops_config.as_ref());
        }
        Command::CalibrateDemo(a) => v.push(a.config.as_ref()),
        Command::Replay(_) => {}
    }
    let mut out: Vec<PathBuf> = v.into_iter().flatten().cloned().collect();
    if let Command::Analyze(AnalyzeArgs {
        power_config: Some(p), ..
    }) = command
    {
        if p != "paper" {
            out.push(PathBuf::from(p));
        }
    }
    out
}

fn relative_digests(paths: &[PathBuf], root: &Path) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            let mut d = digest_file(p)?;
            d.path = p.strip_prefix(root).unwrap_or(p).to_path_buf();
            Ok(d)
        })
        .collect()
}

/// Runs a resolved command and writes its manifest, also on divergence.
fn execute(mut resolved: Resolved, extra_inputs: &[PathBuf]) -> Result<RunManifest, CliError> {
    let out = resolved.run()?;
    let mut m = RunManifest::new(resolved.command(), resolved.seed(), &resolved.config_value()?)?;
    m.inputs = extra_inputs
        .iter()
        .chain(&out.inputs)
        .map(|p| digest_file(p))
        .collect::<Result<_, _>>()?;
    m.outputs = relative_digests(&out.outputs, &resolved.output_root())?;
    let manifest_path = resolved.manifest_path();
    m.write(&manifest_path)?;
    for line in &out.summary {
        println!("{line}");
    }
    println!("manifest: {}", manifest_path.display());
    if out.diverged {
        return Err(CliError::Diverged(resolved.out().to_path_buf()));
    }
    Ok(m)
}

fn replay(args: ReplayArgs) -> Result<(), CliError> {
    let original = RunManifest::read(&args.manifest)?;
    for input in &original.inputs {
        let now = digest_file(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Other(format!("input {} changed since the run", input.path.display())));
        }
    }
    let mut resolved = Resolved::from_manifest(&original.command, original.config.clone())?;
    resolved.redirect(&args.out);
    let inputs: Vec<PathBuf> = Vec::new();
    let rerun = match execute(resolved, &inputs) {
        Ok(m) => m,
        Err(CliError::Diverged(_)) => RunManifest::read(&{
            let mut r = Resolved::from_manifest(&original.command, original.config.clone())?;
            r.redirect(&args.out);
            r.manifest_path()
        })?,
        Err(e) => return Err(e),
    };
    let mut mismatches = 0;
    for want in &original.outputs {
        let got = rerun.outputs.iter().find(|d| d.path == want.path);
        let same = got.is_some_and(|g| g.sha256 == want.sha256);
        println!("{} {}", if same { "identical" } else { "DIFFERS  " }, want.path.display());
        mismatches += usize::from(!same);
    }
    if mismatches > 0 {
        return Err(CliError::Other(format!("{mismatches} output(s) differ from the manifest")));
    }
    println!("replay reproduced all {} outputs", original.outputs.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(error::EXIT_USAGE as u8);
        }
    }
    let result = match cli.command {
        Command::Replay(args) => replay(args),
        command => {
            let extra = config_inputs(&command);
            resolve(command).and_then(|r| execute(r, &extra)).map(|_| ())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
