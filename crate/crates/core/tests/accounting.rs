use evssm::analysis::{
    resnet_flops, ssm_flops, ConvLayerSpec, SsmFlopsConfig, SsmStageFlops, StateEvolution,
};

/// Walks the items through every layer one at a time, adding 2 per
/// multiply-accumulate and 5 per normalized element.
fn naive_ssm_flops(cfg: &SsmFlopsConfig) -> u64 {
    let mut items: Vec<()> = vec![(); cfg.seq_len as usize];
    let mut flops = 0u64;
    for _ in &items {
        for _ in 0..cfg.embed_dim {
            flops += 2;
        }
    }
    for st in &cfg.stages {
        for _ in 0..st.blocks {
            for _ in &items {
                for _ in 0..st.h_in * st.state {
                    flops += 2;
                }
                let evolution = match cfg.state_evolution {
                    StateEvolution::InputWidth => st.h_in,
                    StateEvolution::StateWidth => st.state,
                };
                for _ in 0..evolution {
                    flops += 2;
                }
                for _ in 0..st.state * st.h_out {
                    flops += 2;
                }
                for _ in 0..st.h_out * st.h_out {
                    flops += 2;
                }
                for _ in 0..st.state {
                    flops += 5;
                }
            }
        }
        items = items.chunks(st.pool_stride as usize).map(|_| ()).collect();
    }
    flops
}

fn stage(blocks: u64, h: u64, state: u64, stride: u64) -> SsmStageFlops {
    SsmStageFlops {
        blocks,
        h_in: h,
        state,
        h_out: h,
        pool_stride: stride,
    }
}

#[test]
fn ssm_flops_match_per_event_count() {
    for evo in [StateEvolution::InputWidth, StateEvolution::StateWidth] {
        for (l, stages) in [
            (1, vec![stage(1, 1, 1, 1)]),
            (7, vec![stage(2, 3, 5, 2)]),
            (33, vec![stage(1, 2, 4, 4), stage(3, 2, 6, 3)]),
            (100, vec![stage(2, 4, 3, 16), stage(1, 4, 8, 16)]),
        ] {
            let cfg = SsmFlopsConfig {
                seq_len: l,
                embed_dim: stages[0].h_in,
                stages,
                state_evolution: evo,
            };
            assert_eq!(ssm_flops(&cfg).unwrap().total, naive_ssm_flops(&cfg), "{cfg:?}");
        }
    }
}

#[test]
fn ssm_flops_additive_over_blocks() {
    let one = SsmFlopsConfig {
        seq_len: 50,
        embed_dim: 3,
        stages: vec![stage(1, 3, 4, 1)],
        state_evolution: StateEvolution::InputWidth,
    };
    let three = SsmFlopsConfig {
        stages: vec![stage(3, 3, 4, 1)],
        ..one.clone()
    };
    let a = ssm_flops(&one).unwrap();
    let b = ssm_flops(&three).unwrap();
    assert_eq!(b.total - b.embedding, 3 * (a.total - a.embedding));
}

/// Brute-force MAC count over every output element and kernel tap.
fn naive_conv_flops(l: &ConvLayerSpec) -> u64 {
    let mut flops = 0;
    for _y in 0..l.h_out {
        for _x in 0..l.w_out {
            for _co in 0..l.c_out {
                for _ky in 0..l.kernel {
                    for _kx in 0..l.kernel {
                        for _ci in 0..l.c_in {
                            flops += 2;
                        }
                    }
                }
            }
        }
    }
    flops
}

#[test]
fn conv_flops_match_brute_force() {
    let layers = vec![
        ConvLayerSpec::new("a", 1, 1, 1, 1, 1),
        ConvLayerSpec::new("b", 3, 2, 4, 2, 3),
        ConvLayerSpec::new("c", 5, 5, 2, 3, 7),
    ];
    for l in &layers {
        assert_eq!(resnet_flops(std::slice::from_ref(l), 1).unwrap(), naive_conv_flops(l));
    }
    let per_frame: u64 = layers.iter().map(naive_conv_flops).sum();
    assert_eq!(resnet_flops(&layers, 180).unwrap(), 180 * per_frame);
}
