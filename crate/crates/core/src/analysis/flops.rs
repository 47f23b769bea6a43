//! FLOPs of the event SSM and of frame-based ResNet baselines.
//!
//! A multiply-accumulate counts as 2 FLOPs and a normalization as 5 FLOPs
//! per element.

use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// How the state-evolution term is sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEvolution {
    /// `L × H_in × 2`, the published formula.
    InputWidth,
    /// `L × H × 2`, one multiply-add per state dimension.
    StateWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmStageFlops {
    pub blocks: u64,
    pub h_in: u64,
    pub state: u64,
    pub h_out: u64,
    pub pool_stride: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmFlopsConfig {
    pub seq_len: u64,
    pub embed_dim: u64,
    pub stages: Vec<SsmStageFlops>,
    pub state_evolution: StateEvolution,
}

impl SsmFlopsConfig {
    /// Two stages of three blocks with state 128 and 256 over 65 536 events,
    /// pooled by 16 after each stage; `width` is the unstated feature width.
    pub fn two_stage_reference(width: u64) -> Self {
        let stage = |state| SsmStageFlops {
            blocks: 3,
            h_in: width,
            state,
            h_out: width,
            pool_stride: 16,
        };
        Self {
            seq_len: 65_536,
            embed_dim: width,
            stages: vec![stage(128), stage(256)],
            state_evolution: StateEvolution::InputWidth,
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let dims_ok = self.seq_len > 0
            && self.embed_dim > 0
            && !self.stages.is_empty()
            && self
                .stages
                .iter()
                .all(|s| s.blocks > 0 && s.h_in > 0 && s.state > 0 && s.h_out > 0 && s.pool_stride > 0);
        if dims_ok {
            Ok(())
        } else {
            Err(AnalysisError::ZeroDimension)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmLayerFlops {
    pub name: String,
    pub seq_len: u64,
    pub input_projection: u64,
    pub state_evolution: u64,
    pub output_projection: u64,
    pub feedforward: u64,
    pub normalization: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmFlopsReport {
    pub embedding: u64,
    pub layers: Vec<SsmLayerFlops>,
    pub total: u64,
}

pub fn ssm_flops(config: &SsmFlopsConfig) -> Result<SsmFlopsReport, AnalysisError> {
    config.validate()?;
    let mut l = config.seq_len;
    let embedding = l * config.embed_dim * 2;
    let mut layers = Vec::new();
    for (si, st) in config.stages.iter().enumerate() {
        for bi in 0..st.blocks {
            let evolution_width = match config.state_evolution {
                StateEvolution::InputWidth => st.h_in,
                StateEvolution::StateWidth => st.state,
            };
            let mut layer = SsmLayerFlops {
                name: format!("stage{}.block{}", si + 1, bi + 1),
                seq_len: l,
                input_projection: l * st.h_in * st.state * 2,
                state_evolution: l * evolution_width * 2,
                output_projection: l * st.state * st.h_out * 2,
                feedforward: l * st.h_out * st.h_out * 2,
                normalization: l * st.state * 5,
                total: 0,
            };
            layer.total = layer.input_projection
                + layer.state_evolution
                + layer.output_projection
                + layer.feedforward
                + layer.normalization;
            layers.push(layer);
        }
        l = l.div_ceil(st.pool_stride);
    }
    let total = embedding + layers.iter().map(|x| x.total).sum::<u64>();
    Ok(SsmFlopsReport {
        embedding,
        layers,
        total,
    })
}

/// Feature widths whose reference configuration lands closest to `target`.
pub fn search_ssm_width(target: u64, widths: impl IntoIterator<Item = u64>, top: usize) -> Vec<(u64, u64)> {
    let mut hits: Vec<(u64, u64)> = widths
        .into_iter()
        .filter_map(|w| ssm_flops(&SsmFlopsConfig::two_stage_reference(w)).ok().map(|r| (w, r.total)))
        .collect();
    hits.sort_by_key(|&(w, total)| (total.abs_diff(target), w));
    hits.truncate(top);
    hits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub name: String,
    pub h_out: u64,
    pub w_out: u64,
    pub c_out: u64,
    pub c_in: u64,
    pub kernel: u64,
}

impl ConvLayerSpec {
    pub fn new(name: impl Into<String>, h_out: u64, w_out: u64, c_out: u64, c_in: u64, kernel: u64) -> Self {
        Self {
            name: name.into(),
            h_out,
            w_out,
            c_out,
            c_in,
            kernel,
        }
    }

    pub fn macs(&self) -> u64 {
        self.h_out * self.w_out * self.c_out * self.kernel * self.kernel * self.c_in
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

/// Conv FLOPs of one frame times the frame count.
pub fn resnet_flops(layers: &[ConvLayerSpec], frames: u64) -> Result<u64, AnalysisError> {
    if layers
        .iter()
        .any(|l| l.h_out == 0 || l.w_out == 0 || l.c_out == 0 || l.c_in == 0 || l.kernel == 0)
    {
        return Err(AnalysisError::ZeroDimension);
    }
    Ok(layers.iter().map(ConvLayerSpec::flops).sum::<u64>() * frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResNetDepth {
    R18,
    R50,
}

impl std::str::FromStr for ResNetDepth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "18" => Ok(Self::R18),
            "50" => Ok(Self::R50),
            other => Err(format!("unsupported ResNet depth {other:?} (18 or 50)")),
        }
    }
}

/// Convolution layers of a standard ResNet on a square `input × input`
/// image with `in_channels` channels. Fully connected and pooling layers are
/// not counted. Strided 3×3 convolutions carry the downsampling.
pub fn resnet_layers(depth: ResNetDepth, input: u64, in_channels: u64, downsample: bool) -> Vec<ConvLayerSpec> {
    let mut layers = Vec::new();
    let mut hw = input.div_ceil(2);
    layers.push(ConvLayerSpec::new("conv1", hw, hw, 64, in_channels, 7));
    hw = hw.div_ceil(2);
    let widths = [64u64, 128, 256, 512];
    let (counts, expansion): ([usize; 4], u64) = match depth {
        ResNetDepth::R18 => ([2, 2, 2, 2], 1),
        ResNetDepth::R50 => ([3, 4, 6, 3], 4),
    };
    let mut c = 64;
    for (s, (&w, &n)) in widths.iter().zip(&counts).enumerate() {
        for b in 0..n {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let out_hw = hw.div_ceil(stride);
            let p = format!("layer{}.{}", s + 1, b);
            match depth {
                ResNetDepth::R18 => {
                    layers.push(ConvLayerSpec::new(format!("{p}.conv1"), out_hw, out_hw, w, c, 3));
                    layers.push(ConvLayerSpec::new(format!("{p}.conv2"), out_hw, out_hw, w, w, 3));
                }
                ResNetDepth::R50 => {
                    layers.push(ConvLayerSpec::new(format!("{p}.conv1"), hw, hw, w, c, 1));
                    layers.push(ConvLayerSpec::new(format!("{p}.conv2"), out_hw, out_hw, w, w, 3));
                    layers.push(ConvLayerSpec::new(format!("{p}.conv3"), out_hw, out_hw, w * expansion, w, 1));
                }
            }
            if downsample && b == 0 && (stride != 1 || c != w * expansion) {
                layers.push(ConvLayerSpec::new(format!("{p}.downsample"), out_hw, out_hw, w * expansion, c, 1));
            }
            c = w * expansion;
            hw = out_hw;
        }
    }
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(stages: Vec<SsmStageFlops>, l: u64) -> SsmFlopsConfig {
        SsmFlopsConfig {
            seq_len: l,
            embed_dim: 1,
            stages,
            state_evolution: StateEvolution::InputWidth,
        }
    }

    fn ones(blocks: u64, stride: u64) -> SsmStageFlops {
        SsmStageFlops {
            blocks,
            h_in: 1,
            state: 1,
            h_out: 1,
            pool_stride: stride,
        }
    }

    #[test]
    fn single_block_hand_case() {
        assert_eq!(ssm_flops(&unit(vec![ones(1, 1)], 1)).unwrap().total, 15);
    }

    #[test]
    fn linear_in_length() {
        let a = ssm_flops(&unit(vec![ones(2, 1)], 37)).unwrap().total;
        let b = ssm_flops(&unit(vec![ones(2, 1)], 74)).unwrap().total;
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn pooling_shrinks_length() {
        let cfg = SsmFlopsConfig::two_stage_reference(8);
        let r = ssm_flops(&cfg).unwrap();
        assert_eq!(r.layers[0].seq_len, 65_536);
        assert_eq!(r.layers[3].seq_len, 4_096);
        let odd = ssm_flops(&unit(vec![ones(1, 16), ones(1, 1)], 17)).unwrap();
        assert_eq!(odd.layers[1].seq_len, 2);
    }

    #[test]
    fn state_width_variant() {
        let mut cfg = SsmFlopsConfig::two_stage_reference(8);
        let a = ssm_flops(&cfg).unwrap();
        cfg.state_evolution = StateEvolution::StateWidth;
        let b = ssm_flops(&cfg).unwrap();
        assert_eq!(b.layers[0].state_evolution, 65_536 * 128 * 2);
        assert_eq!(a.layers[0].state_evolution, 65_536 * 8 * 2);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(ssm_flops(&unit(vec![ones(1, 0)], 1)).is_err());
        assert!(resnet_flops(&[ConvLayerSpec::new("x", 1, 1, 1, 0, 1)], 1).is_err());
    }

    #[test]
    fn micro_conv() {
        let l = ConvLayerSpec::new("c", 1, 1, 1, 1, 1);
        assert_eq!(resnet_flops(&[l], 1).unwrap(), 2);
    }

    #[test]
    fn resnet_shapes() {
        let r18 = resnet_layers(ResNetDepth::R18, 224, 3, true);
        assert_eq!(r18.len(), 1 + 16 + 3);
        let r50 = resnet_layers(ResNetDepth::R50, 224, 3, true);
        assert_eq!(r50.len(), 1 + 48 + 4);
        // Published ImageNet conv MAC counts: about 1.81 G and 4.09 G.
        let m18: u64 = r18.iter().map(ConvLayerSpec::macs).sum();
        let m50: u64 = r50.iter().map(ConvLayerSpec::macs).sum();
        assert!((1.78e9..1.84e9).contains(&(m18 as f64)), "{m18}");
        assert!((4.0e9..4.15e9).contains(&(m50 as f64)), "{m50}");
    }
}
