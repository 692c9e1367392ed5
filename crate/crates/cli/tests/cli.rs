use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use piaug_core::bins::BinSpec;
use piaug_core::dataset::{read_dataset, DatasetTag};
use piaug_core::nn::checkpoint::{load_checkpoint, save_checkpoint};

const TINY: &str = r#"
seed = 5
[world.terrain]
size = 320
[world.train_policy]
n_sequences = 32
horizon = 10
seed = 3
[world.eval_policy]
n_sequences = 30
horizon = 10
balanced = true
speed_cap = 7.0
seed = 4
[train]
epochs = 3
horizon = 10
batch_size = 16
[mppi]
n_samples = 16
horizon = 8
[nav]
trials = 1
time_budget = 3.0
[bench]
sample_counts = [1, 8]
horizon = 8
repetitions = 2
"#;

fn piaug(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_piaug"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("PIAUG_OUT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = piaug(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let root = tmp.path().join("runs");
    ok(tmp.path(), &["gen-data", "-c", "tiny.toml"]);
    (tmp, root)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    String::from_utf8(read(p))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = piaug(tmp.path(), &["gen-data", "-c", "nope.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
    let out = piaug(tmp.path(), &["train", "--mode", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_and_guarded() {
    let (tmp, root) = setup();
    let first = (read(&root.join("data/train.ds")), read(&root.join("data/eval.ds")));
    let out = piaug(tmp.path(), &["gen-data", "-c", "tiny.toml"]);
    assert_eq!(out.status.code(), Some(2), "overwrite without --force must be refused");
    ok(tmp.path(), &["gen-data", "-c", "tiny.toml", "--force", "--threads", "1"]);
    assert!(first == (read(&root.join("data/train.ds")), read(&root.join("data/eval.ds"))));

    let bins = BinSpec::default();
    let train = read_dataset(&root.join("data/train.ds"), DatasetTag::Train).unwrap();
    let eval = read_dataset(&root.join("data/eval.ds"), DatasetTag::Eval).unwrap();
    let vbin = |s: &piaug_core::dataset::DataSequence| {
        let a = piaug_core::bins::sequence_attributes(&s.x0, &s.labels, 0.1).unwrap();
        bins.velocity_bin(a.mean_speed)
    };
    assert!(train.sequences.iter().all(|s| vbin(s) == 0));
    for b in 0..3 {
        assert!(eval.sequences.iter().any(|s| vbin(s) == b), "eval set lacks velocity bin {b}");
    }
    assert_eq!(train.header.config_hash.len(), 64);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_piaug"))
        .args(["gen-data", "-c", "tiny.toml"])
        .current_dir(tmp.path())
        .env("PIAUG_OUT", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("elsewhere/data/train.ds").exists());
}

#[test]
fn train_logs_and_resume() {
    let (tmp, root) = setup();
    let d = tmp.path();
    ok(d, &["train", "-c", "tiny.toml", "--mode", "vanilla"]);
    let rows = csv_rows(&root.join("models/vanilla_loss.csv"));
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r[4], "0", "vanilla must log a zero physics weight");
        assert_eq!(r[1], r[3], "vanilla total equals its data term");
    }

    ok(d, &["train", "-c", "tiny.toml", "--mode", "piaug"]);
    assert_eq!(csv_rows(&root.join("models/piaug_speed_hist.csv")).len(), 32);
    for r in csv_rows(&root.join("models/piaug_steps.csv")) {
        let f: Vec<f64> = r[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0] + f[3] * f[1], f[2]);
    }
    let full_ckpt = read(&root.join("models/piaug.ckpt"));
    let full_steps = read(&root.join("models/piaug_steps.csv"));

    // interrupted after one epoch, then resumed
    ok(d, &["train", "-c", "tiny.toml", "--mode", "piaug", "--force", "--stop-after", "1"]);
    assert_eq!(csv_rows(&root.join("models/piaug_loss.csv")).len(), 1);
    ok(d, &["train", "-c", "tiny.toml", "--mode", "piaug", "--resume"]);
    assert!(full_steps == read(&root.join("models/piaug_steps.csv")), "resumed loss log differs");
    assert!(full_ckpt == read(&root.join("models/piaug.ckpt")), "resumed weights differ");

    let out = piaug(d, &["train", "-c", "tiny.toml", "--mode", "piaug"]);
    assert_eq!(out.status.code(), Some(2), "existing checkpoint needs --force or --resume");
}

#[test]
fn eval_navigate_bench_plot() {
    let (tmp, root) = setup();
    let d = tmp.path();
    ok(d, &["train", "-c", "tiny.toml", "--mode", "pinn"]);
    ok(d, &["eval", "-c", "tiny.toml"]);
    let heat = csv_rows(&root.join("eval/heatmap_pinn.csv"));
    assert_eq!(heat.len(), 27);
    let shift = read(&root.join("eval/domain_shift.csv"));
    ok(d, &["eval", "-c", "tiny.toml"]);
    assert!(shift == read(&root.join("eval/domain_shift.csv")));
    let models: Vec<String> = csv_rows(&root.join("eval/domain_shift.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert!(models.contains(&"kbm".to_string()) && models.contains(&"pinn".to_string()));

    ok(d, &["navigate", "-c", "tiny.toml", "--model", "kbm", "--radius", "1e9"]);
    let nav: serde_json::Value = serde_json::from_slice(&read(&root.join("nav/kbm_r1000000000.json"))).unwrap();
    assert_eq!(nav["successes"], 1);
    assert_eq!(nav["model"], "kbm");
    assert_eq!(nav["config_hash"].as_str().unwrap().len(), 64);
    ok(d, &["navigate", "-c", "tiny.toml", "--model", "pinn", "--radius", "4"]);
    let trace = read(&root.join("nav/pinn_r4_trial0.csv"));
    ok(d, &["navigate", "-c", "tiny.toml", "--model", "pinn", "--radius", "4", "--force"]);
    assert!(trace == read(&root.join("nav/pinn_r4_trial0.csv")));

    ok(d, &["bench", "-c", "tiny.toml", "--model", "pinn"]);
    let bench = csv_rows(&root.join("bench/bench.csv"));
    assert_eq!(bench.len(), 6);
    assert!(bench.iter().all(|r| r[2].parse::<f64>().unwrap() >= 0.0));

    ok(d, &["plot-data", "-c", "tiny.toml"]);
    let long = csv_rows(&root.join("plots/heatmap_long.csv"));
    assert_eq!(long.len(), 2 * 27 * 4);
    let loss = csv_rows(&root.join("plots/loss_long.csv"));
    assert_eq!(loss.len(), 3 * 4);
}

#[test]
fn bad_checkpoints() {
    let (tmp, root) = setup();
    let d = tmp.path();
    ok(d, &["train", "-c", "tiny.toml", "--mode", "vanilla"]);
    let ckpt = root.join("models/vanilla.ckpt");

    // weights blown up so that predictions leave the finite range
    let (mut params, _, meta) = load_checkpoint(&ckpt).unwrap();
    let w: Vec<f64> = params.flat().iter().map(|x| x * 1e306).collect();
    params.set_flat(&w).unwrap();
    let huge = root.join("models/huge.ckpt");
    save_checkpoint(&huge, &params, None, &meta).unwrap();
    let out = piaug(d, &["eval", "-c", "tiny.toml", "--checkpoint", huge.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let mut bytes = read(&ckpt);
    bytes[8] = 99;
    let odd = root.join("models/odd.ckpt");
    std::fs::write(&odd, bytes).unwrap();
    std::fs::copy(root.join("models/vanilla.ckpt.json"), root.join("models/odd.ckpt.json")).unwrap();
    let out = piaug(d, &["eval", "-c", "tiny.toml", "--checkpoint", odd.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
