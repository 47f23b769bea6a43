//! FLOPs and power accounting.

pub mod flops;
pub mod power;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flops::{
    resnet_flops, resnet_layers, search_ssm_width, ssm_flops, ConvLayerSpec, ResNetDepth, SsmFlopsConfig,
    SsmFlopsReport, SsmStageFlops, StateEvolution,
};
pub use power::{power_breakdown, sn_energy, PowerBreakdown, PowerComponent, PowerConfig};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("every dimension, count and stride must be positive")]
    ZeroDimension,
    #[error("total power is zero; shares are undefined")]
    ZeroTotalPower,
    #[error("component {0} has negative count or unit power")]
    NegativePower(String),
    #[error("conductance must be non-negative, got {0}")]
    NegativeConductance(f64),
    #[error("{pulses} pulse counts but {conductances} conductances")]
    LengthMismatch { pulses: usize, conductances: usize },
}

/// Published headline figures, used only as reconciliation targets.
pub const PUBLISHED_SSM_GFLOPS: f64 = 1.68;
pub const PUBLISHED_RESNET18_GFLOPS: f64 = 104.28;
pub const PUBLISHED_RESNET50_GFLOPS: f64 = 219.80;
pub const PUBLISHED_RATIO_RESNET18: f64 = 62.12;
pub const PUBLISHED_RATIO_RESNET50: f64 = 130.93;
/// Frames of a 6 s recording at 30 fps, each `128 × 128 × 2`.
pub const REFERENCE_FRAMES: u64 = 180;
pub const REFERENCE_FRAME_SIZE: u64 = 128;
pub const REFERENCE_FRAME_CHANNELS: u64 = 2;

/// Value / 1e9 at two decimals.
pub fn gflops(flops: u64) -> f64 {
    (flops as f64 / 1e7).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmSection {
    pub config: SsmFlopsConfig,
    pub flops: SsmFlopsReport,
    pub gflops: f64,
    /// Total under the other state-evolution sizing.
    pub alternate_total: u64,
    pub alternate_state_evolution: StateEvolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetSection {
    pub depth: ResNetDepth,
    pub frames: u64,
    pub layers: Vec<ConvLayerSpec>,
    /// Convolutions including the 1×1 shortcut projections.
    pub flops: u64,
    pub gflops: f64,
    pub flops_without_downsample: u64,
    pub gflops_without_downsample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconciliationEntry {
    pub quantity: String,
    pub published: f64,
    pub computed: f64,
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub ssm: Option<SsmSection>,
    pub resnet: Vec<ResNetSection>,
    /// ResNet FLOPs over SSM FLOPs, per ResNet entry.
    pub ratios: Vec<(String, f64)>,
    pub power: Option<PowerBreakdown>,
    pub reconciliation: Vec<ReconciliationEntry>,
}

pub fn ssm_section(config: &SsmFlopsConfig) -> Result<SsmSection, AnalysisError> {
    let flops = ssm_flops(config)?;
    let alternate = match config.state_evolution {
        StateEvolution::InputWidth => StateEvolution::StateWidth,
        StateEvolution::StateWidth => StateEvolution::InputWidth,
    };
    let alt = ssm_flops(&SsmFlopsConfig {
        state_evolution: alternate,
        ..config.clone()
    })?;
    Ok(SsmSection {
        config: config.clone(),
        gflops: gflops(flops.total),
        flops,
        alternate_total: alt.total,
        alternate_state_evolution: alternate,
    })
}

pub fn resnet_section(depth: ResNetDepth, frames: u64) -> Result<ResNetSection, AnalysisError> {
    let layers = resnet_layers(depth, REFERENCE_FRAME_SIZE, REFERENCE_FRAME_CHANNELS, true);
    let plain = resnet_layers(depth, REFERENCE_FRAME_SIZE, REFERENCE_FRAME_CHANNELS, false);
    let flops = resnet_flops(&layers, frames)?;
    let without = resnet_flops(&plain, frames)?;
    Ok(ResNetSection {
        depth,
        frames,
        layers,
        flops,
        gflops: gflops(flops),
        flops_without_downsample: without,
        gflops_without_downsample: gflops(without),
    })
}

fn resnet_reconciliation(section: &ResNetSection) -> ReconciliationEntry {
    let (name, published) = match section.depth {
        ResNetDepth::R18 => ("ResNet-18", PUBLISHED_RESNET18_GFLOPS),
        ResNetDepth::R50 => ("ResNet-50", PUBLISHED_RESNET50_GFLOPS),
    };
    let macs = section.flops as f64 / 2e9;
    let macs_plain = section.flops_without_downsample as f64 / 2e9;
    ReconciliationEntry {
        quantity: format!("{name} GFLOPs over {} frames", section.frames),
        published,
        computed: section.gflops,
        assumptions: vec![
            format!(
                "input {0}x{0}x{1}, convolution layers only, first convolution adapted to {1} channels",
                REFERENCE_FRAME_SIZE, REFERENCE_FRAME_CHANNELS
            ),
            format!(
                "with shortcut projections: {:.2} GFLOPs ({:.2} G multiply-accumulates)",
                section.gflops, macs
            ),
            format!(
                "without shortcut projections: {:.2} GFLOPs ({:.2} G multiply-accumulates)",
                section.gflops_without_downsample, macs_plain
            ),
            format!(
                "published/computed ratio {:.3}; a value near 0.5 suggests the published figure counts multiply-accumulates",
                published / section.gflops
            ),
        ],
    }
}

fn ssm_reconciliation(section: &SsmSection) -> ReconciliationEntry {
    let target = (PUBLISHED_SSM_GFLOPS * 1e9) as u64;
    let best = search_ssm_width(target, 1..=512, 3);
    let mut assumptions = vec![
        format!(
            "sequence length {}, strides {:?}, state-evolution term sized by {:?}",
            section.config.seq_len,
            section.config.stages.iter().map(|s| s.pool_stride).collect::<Vec<_>>(),
            section.config.state_evolution
        ),
        format!(
            "alternate sizing {:?} gives {:.2} GFLOPs",
            section.alternate_state_evolution,
            gflops(section.alternate_total)
        ),
        "embedding and feature widths are not published; two stages of three blocks with state 128 and 256 and one shared width searched".into(),
    ];
    for (w, total) in best {
        assumptions.push(format!("width {w}: {:.2} GFLOPs", gflops(total)));
    }
    ReconciliationEntry {
        quantity: "event SSM GFLOPs".into(),
        published: PUBLISHED_SSM_GFLOPS,
        computed: section.gflops,
        assumptions,
    }
}

/// Assembles the report; headline comparisons are recorded, never asserted.
pub fn build_report(
    ssm: Option<&SsmFlopsConfig>,
    resnets: &[(ResNetDepth, u64)],
    power: Option<&PowerConfig>,
) -> Result<AnalysisReport, AnalysisError> {
    let ssm = ssm.map(ssm_section).transpose()?;
    let resnet = resnets
        .iter()
        .map(|&(d, f)| resnet_section(d, f))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reconciliation = Vec::new();
    if let Some(s) = &ssm {
        reconciliation.push(ssm_reconciliation(s));
    }
    let mut ratios = Vec::new();
    for r in &resnet {
        reconciliation.push(resnet_reconciliation(r));
        if let Some(s) = &ssm {
            let name = format!("{:?}", r.depth);
            let ratio = r.flops as f64 / s.flops.total as f64;
            ratios.push((name.clone(), ratio));
            let published = match r.depth {
                ResNetDepth::R18 => PUBLISHED_RATIO_RESNET18,
                ResNetDepth::R50 => PUBLISHED_RATIO_RESNET50,
            };
            reconciliation.push(ReconciliationEntry {
                quantity: format!("{name} over event SSM"),
                published,
                computed: ratio,
                assumptions: vec!["both totals computed under the assumptions listed above".into()],
            });
        }
    }
    let power = power.map(power_breakdown).transpose()?;
    if let Some(p) = &power {
        reconciliation.push(ReconciliationEntry {
            quantity: "total power (mW)".into(),
            published: 34.0,
            computed: p.total_mw,
            assumptions: vec![
                "array count, ADC unit power and the state-node and digital totals are solved from the published shares".into(),
                "ADCs and digital logic run continuously at the 40 MHz test clock".into(),
            ],
        });
    }
    Ok(AnalysisReport {
        ssm,
        resnet,
        ratios,
        power,
        reconciliation,
    })
}
