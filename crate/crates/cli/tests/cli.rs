use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evssm::event_io::EventDataset;
use evssm::model::checkpoint::Checkpoint;
use evssm::model::ModelConfig;
use evssm::EventSsm;
use serde_json::Value;

fn evssm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evssm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evssm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn output_digests(path: PathBuf) -> Vec<String> {
    json(path)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["sha256"].as_str().unwrap().to_owned())
        .collect()
}

fn small_data(dir: &Path) {
    ok(dir, &["gen-data", "--sequences", "140", "--seed", "5", "--out", "d.evs"]);
}

#[test]
fn gen_data_is_deterministic_and_valid() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-data", "--seed", "3", "--out", "a.evs"]);
    ok(t.path(), &["gen-data", "--seed", "3", "--out", "b.evs"]);
    let a = std::fs::read(t.path().join("a.evs")).unwrap();
    assert_eq!(a, std::fs::read(t.path().join("b.evs")).unwrap());
    let ds = EventDataset::from_bytes(&a).unwrap();
    ds.validate().unwrap();
    assert_eq!((ds.len(), ds.num_channels, ds.num_classes), (700, 8, 2));
    assert_eq!(
        output_digests(t.path().join("a.evs.manifest.json")),
        output_digests(t.path().join("b.evs.manifest.json"))
    );

    ok(t.path(), &["gen-data", "--sequences", "0", "--out", "empty.evs"]);
    let empty = std::fs::read(t.path().join("empty.evs")).unwrap();
    assert_eq!(empty.len(), evssm::event_io::HEADER_LEN);
    assert!(EventDataset::from_bytes(&empty).unwrap().is_empty());
}

#[test]
fn fixed_mode_learns_the_synthetic_task() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["gen-data", "--seed", "1", "--out", "d.evs"]);
    let stdout = ok(t.path(), &["train", "--data", "d.evs", "--lambda-mode", "fixed", "--seed", "0", "--out", "run"]);
    assert!(stdout.contains("final eval accuracy"));
    let report = json(t.path().join("run/train_report.json"));
    assert!(report["final_eval_acc"].as_f64().unwrap() >= 0.9, "{report}");
    let ck = Checkpoint::from_json(&std::fs::read_to_string(t.path().join("run/checkpoint.json")).unwrap()).unwrap();
    assert!(ck.model.blocks.iter().all(|b| b.rates.is_shared() && b.rates_frozen));
    let csv = std::fs::read_to_string(t.path().join("run/train_curve.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,eval_loss,eval_acc\n"));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    ok(t.path(), &["train", "--data", "d.evs", "--epochs", "0", "--seed", "9", "--out", "run"]);
    let ck = Checkpoint::from_json(&std::fs::read_to_string(t.path().join("run/checkpoint.json")).unwrap()).unwrap();
    let init = EventSsm::init(ModelConfig::single_stage(8, 2, 8, 8, 2), 9).unwrap();
    assert_eq!(ck.model, init);
}

#[test]
fn outputs_do_not_depend_on_thread_count_and_replay_reproduces() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    let common = ["train", "--data", "d.evs", "--epochs", "4", "--stage1-epochs", "2", "--seed", "2"];
    let mut one = common.to_vec();
    one.extend(["--threads", "1", "--out", "one"]);
    let mut four = common.to_vec();
    four.extend(["--threads", "4", "--out", "four"]);
    ok(t.path(), &one);
    ok(t.path(), &four);
    for f in ["checkpoint.json", "train_report.json", "train_curve.csv"] {
        assert_eq!(
            std::fs::read(t.path().join("one").join(f)).unwrap(),
            std::fs::read(t.path().join("four").join(f)).unwrap(),
            "{f}"
        );
    }
    let stdout = ok(t.path(), &["replay", "one/manifest.json", "--out", "again"]);
    assert!(stdout.contains("replay reproduced all 3 outputs"), "{stdout}");

    ok(
        t.path(),
        &["hw-sweep", "--checkpoint", "one/checkpoint.json", "--data", "d.evs", "--noise-lsb", "0,4.6", "--lambda-var", "0,10%", "--repeats", "3", "--seed", "4", "--threads", "1", "--out", "sw1"],
    );
    ok(
        t.path(),
        &["hw-sweep", "--checkpoint", "one/checkpoint.json", "--data", "d.evs", "--noise-lsb", "0,4.6", "--lambda-var", "0,10%", "--repeats", "3", "--seed", "4", "--threads", "4", "--out", "sw4"],
    );
    assert_eq!(
        std::fs::read(t.path().join("sw1/sweep.csv")).unwrap(),
        std::fs::read(t.path().join("sw4/sweep.csv")).unwrap()
    );
    ok(t.path(), &["replay", "sw1/manifest.json", "--out", "sw-again"]);
}

#[test]
fn hw_sweep_grid_shape_and_clean_point() {
    let t = tempfile::tempdir().unwrap();
    small_data(t.path());
    ok(t.path(), &["train", "--data", "d.evs", "--epochs", "3", "--seed", "1", "--out", "run"]);
    ok(
        t.path(),
        &["hw-sweep", "--checkpoint", "run/checkpoint.json", "--data", "d.evs", "--lambda-var", "5%,10%,15%,20%", "--seed", "1", "--out", "grid"],
    );
    let csv = std::fs::read_to_string(t.path().join("grid/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 40);

    ok(
        t.path(),
        &["hw-sweep", "--checkpoint", "run/checkpoint.json", "--data", "d.evs", "--noise-lsb", "0", "--lambda-var", "0", "--repeats", "2", "--out", "clean"],
    );
    let s = json(t.path().join("clean/sweep.json"));
    let clean = s["quantized_accuracy"].as_f64().unwrap();
    for row in s["sweep"]["rows"].as_array().unwrap() {
        assert_eq!(row["accuracy"].as_f64().unwrap(), clean);
    }
}

#[test]
fn analyze_reports() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("micro.toml"),
        "seq_len = 1\nembed_dim = 1\nstages = [{ blocks = 1, h_in = 1, state = 1, h_out = 1, pool_stride = 1 }]\n",
    )
    .unwrap();
    ok(t.path(), &["analyze", "--flops-config", "micro.toml", "--out", "micro.json"]);
    assert_eq!(json(t.path().join("micro.json"))["ssm"]["flops"]["total"], 15);

    ok(t.path(), &["analyze", "--resnet", "18", "--frames", "180", "--out", "r18.json"]);
    let r = json(t.path().join("r18.json"));
    let rec = r["reconciliation"].as_array().unwrap();
    assert_eq!(rec[0]["published"].as_f64().unwrap(), 104.28);
    assert!(!rec[0]["assumptions"].as_array().unwrap().is_empty());

    ok(t.path(), &["analyze", "--power-config", "paper", "--out", "p.json"]);
    let p = json(t.path().join("p.json"));
    assert!((p["power"]["total_mw"].as_f64().unwrap() - 34.0).abs() < 0.05);
}

#[test]
fn calibrate_demo_reports() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["calibrate-demo", "--seed", "1", "--out", "lin.json"]);
    let lin = json(t.path().join("lin.json"));
    assert!(lin["post_nrmse"].as_f64().unwrap() < 1e-3);
    assert!(lin["fused_vs_sequential_max_diff"].as_f64().unwrap() <= 1e-12);

    ok(t.path(), &["calibrate-demo", "--identity", "--out", "id.json"]);
    for ch in json(t.path().join("id.json"))["coeffs"]["channels"].as_array().unwrap() {
        for (k, want) in [("g_pos", 1.0), ("g_neg", 1.0), ("o_diff", 0.0)] {
            assert!((ch[k].as_f64().unwrap() - want).abs() < 1e-9, "{k}: {}", ch[k]);
        }
    }
}

#[test]
fn config_file_with_flag_override() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("gen.toml"), "seed = 11\n[spec]\nnum_sequences = 20\nnum_channels = 6\n").unwrap();
    ok(t.path(), &["gen-data", "--config", "gen.toml", "--channels", "4", "--out", "d.evs"]);
    let ds = EventDataset::from_bytes(&std::fs::read(t.path().join("d.evs")).unwrap()).unwrap();
    assert_eq!((ds.len(), ds.num_channels), (20, 4));
    let m = json(t.path().join("d.evs.manifest.json"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["config"]["spec"]["num_channels"], 4);
    assert_eq!(m["inputs"][0]["path"], "gen.toml");

    std::fs::write(t.path().join("bad.toml"), "[spec]\nno_such_key = 1\n").unwrap();
    assert_eq!(evssm(t.path(), &["gen-data", "--config", "bad.toml", "--out", "x.evs"]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| evssm(t.path(), args).status.code();
    assert_eq!(code(&["train", "--no-such-flag"]), Some(2));
    assert_eq!(code(&["gen-data", "--seed", "1"]), Some(2));
    assert_eq!(code(&["gen-data", "--classes", "1", "--out", "x.evs"]), Some(2));
    assert_eq!(code(&["train", "--data", "missing.evs", "--out", "run"]), Some(3));
    assert_eq!(code(&["hw-sweep", "--checkpoint", "missing.json", "--out", "sw"]), Some(3));

    small_data(t.path());
    assert_eq!(code(&["train", "--data", "d.evs", "--lr", "1e300", "--epochs", "3", "--out", "boom"]), Some(4));
    let report = json(t.path().join("boom/train_report.json"));
    assert!(report["diverged"].as_bool().unwrap() || report["stage1_diverged"].as_bool().unwrap());

    ok(t.path(), &["train", "--data", "d.evs", "--epochs", "1", "--out", "run"]);
    small_data(t.path());
    std::fs::write(t.path().join("d.evs"), b"tampered").unwrap();
    assert_eq!(code(&["replay", "run/manifest.json", "--out", "again"]), Some(5));
}
