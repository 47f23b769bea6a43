mod common;

use evssm::analysis::{sn_energy, PowerConfig};
use evssm::hardware::{
    hardware_forward, hardware_inference, inject_noise, quantize_model, sample_lambda_variation, NoiseModel,
    PulseModel, QuantScheme, StateNodeArray,
};
use evssm::trainer::{train, LambdaMode, TrainConfig};
use evssm::EventSsm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn sn_energy_matches_state_node_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rates: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..2.0)).collect();
    let mut nodes = StateNodeArray::new(0.5, rates, PulseModel::default()).unwrap().record_pulses();
    let mut t = 0;
    for _ in 0..200 {
        t += rng.random_range(0..5_000);
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-20.0..20.0)).collect();
        nodes.update_at(t, &v).unwrap();
    }
    let log = nodes.pulse_log.as_ref().unwrap();
    let pulses: Vec<u64> = log.iter().map(|r| r.pulses).collect();
    let g: Vec<f64> = log.iter().map(|r| r.conductance_s).collect();
    let e = sn_energy(&pulses, &g, &PowerConfig::published_preset()).unwrap();
    assert!(nodes.energy_j > 0.0);
    assert!((e - nodes.energy_j).abs() <= 1e-12 * e, "{e:e} vs {:e}", nodes.energy_j);
    assert_eq!(pulses.iter().sum::<u64>(), nodes.total_pulses);
}

#[test]
fn injected_noise_has_requested_moments() {
    let scheme = QuantScheme::with_scale(0.02);
    let noise = NoiseModel {
        mean_lsb: 1.5,
        ..NoiseModel::gaussian(4.6)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = inject_noise(&vec![0.0; 1_000_000], &noise, &scheme, &mut rng);
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n / scheme.scale;
    let var = out.iter().map(|v| (v / scheme.scale - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 1.5).abs() <= 0.01 * 1.5, "{mean}");
    assert!((var.sqrt() - 4.6).abs() <= 0.01 * 4.6, "{}", var.sqrt());
}

#[test]
fn lambda_variation_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nominal = vec![0.35; 100_000];
    let realized = sample_lambda_variation(&nominal, 0.1, &mut rng).unwrap();
    let n = realized.len() as f64;
    let mean = realized.iter().sum::<f64>() / n;
    let sd = (realized.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 0.35).abs() <= 0.01 * 0.35);
    assert!((sd - 0.035).abs() <= 0.02 * 0.035, "{sd}");
    let wide = sample_lambda_variation(&nominal, 0.5, &mut rng).unwrap();
    assert!(wide.iter().all(|r| *r >= 0.01 * 0.35));
}

#[test]
fn noise_and_variation_are_reproducible_and_bite() {
    let spec = evssm::event_io::SyntheticSpec {
        num_sequences: 60,
        ..Default::default()
    };
    let data = evssm::event_io::generate_synthetic(&spec, 2).unwrap();
    let (tr, te) = data.split_at(40);
    let init = EventSsm::init(desk_model_config(), 2).unwrap();
    let cfg = TrainConfig {
        max_epochs: 3,
        ..desk_train_config(2, LambdaMode::Free)
    };
    let (model, _) = train(&init, &tr, &te, &cfg).unwrap();
    let qm = quantize_model(&model, &tr).unwrap();

    let a = hardware_inference(&qm, &te, &NoiseModel::gaussian(8.0), 0.2, 4, 9).unwrap();
    let b = hardware_inference(&qm, &te, &NoiseModel::gaussian(8.0), 0.2, 4, 9).unwrap();
    assert_eq!(a, b);

    let rates: Vec<Vec<f64>> = qm.model.blocks.iter().map(|b| b.rates.expand(b.state_dim())).collect();
    let seq = &te.sequences[0];
    let clean = hardware_forward(&qm, seq, &NoiseModel::none(), &rates, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let noisy = hardware_forward(&qm, seq, &NoiseModel::gaussian(4.6), &rates, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_ne!(clean.logits, noisy.logits);
    assert!(clean.sn_pulses > 0 && clean.sn_energy_j > 0.0);
}
