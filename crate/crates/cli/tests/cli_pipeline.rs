//! Drives the installed binary end to end on a miniature config: world
//! generation, training, and the byte-reproducibility contract on `eval`.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_metanav")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY_CONFIG: &str = r#"
master_seed = 5
out_dir = "out"
n_worlds = 1
world_seed = 3
task_family = "Height"

[world]
width = 6.0
height = 6.0
rooms = 2
min_door = 0.8

[ppo]
gamma = 0.99
gae_lambda = 0.95
clip = 0.2
epochs = 2
minibatches = 2
value_coef = 0.5
entropy_coef = 0.01
lr = 2.5e-4
max_grad_norm = 0.5
rollout_length = 8
num_envs = 2
total_steps = 16
train_episodes = 4
val_episodes = 2
eval_every_updates = 0
max_steps_per_episode = 16

[eval]
n_episodes = 3
max_steps = 16
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), TINY_CONFIG).unwrap();
    run_ok(dir.path(), &["gen-worlds", "--config", "cfg.toml", "--run-id", "w"]);
    run_ok(
        dir.path(),
        &[
            "train-baseline",
            "--config",
            "cfg.toml",
            "--run-id",
            "b",
            "--worlds",
            "out/gen-worlds/w",
        ],
    );
    dir
}

#[test]
fn eval_twice_produces_byte_identical_metrics() {
    let dir = setup();
    for id in ["e1", "e2"] {
        run_ok(
            dir.path(),
            &[
                "eval",
                "--config",
                "cfg.toml",
                "--run-id",
                id,
                "--worlds",
                "out/gen-worlds/w",
                "--ckpt",
                "out/train-baseline/b/baseline",
                "--split",
                "nominal",
                "--single-thread",
            ],
        );
    }
    let a = fs::read(dir.path().join("out/eval/e1/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("out/eval/e2/metrics.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "metrics.csv must be byte-identical across reruns");
}

#[test]
fn resolved_config_round_trips_with_overrides() {
    let dir = setup();
    // --seed overrides the file's master_seed; the resolved copy written next
    // to the outputs must reflect what actually ran.
    run_ok(
        dir.path(),
        &[
            "eval",
            "--config",
            "cfg.toml",
            "--seed",
            "77",
            "--run-id",
            "es",
            "--worlds",
            "out/gen-worlds/w",
            "--ckpt",
            "out/train-baseline/b/baseline",
        ],
    );
    let text = fs::read_to_string(dir.path().join("out/eval/es/resolved.toml")).unwrap();
    let resolved = metanav::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(resolved.master_seed, 77);
    assert_eq!(resolved.n_worlds, 1);
    assert_eq!(resolved.ppo.total_steps, 16);
}

#[test]
fn missing_worlds_dir_exits_nonzero_with_one_line_error() {
    let dir = setup();
    let out = run(
        dir.path(),
        &[
            "eval",
            "--config",
            "cfg.toml",
            "--run-id",
            "bad",
            "--worlds",
            "no/such/dir",
            "--ckpt",
            "out/train-baseline/b/baseline",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
}

#[test]
fn run_id_defaults_to_fingerprint_and_timestamp() {
    let dir = setup();
    run_ok(
        dir.path(),
        &[
            "eval",
            "--config",
            "cfg.toml",
            "--worlds",
            "out/gen-worlds/w",
            "--ckpt",
            "out/train-baseline/b/baseline",
        ],
    );
    let runs: Vec<_> = fs::read_dir(dir.path().join("out/eval"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(runs.len(), 1);
    // <16 hex chars of config fingerprint>-<unix seconds>
    let (fp, ts) = runs[0].split_once('-').expect("run id has a dash");
    assert_eq!(fp.len(), 16);
    assert!(fp.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(ts.parse::<u64>().is_ok(), "timestamp suffix: {ts}");
}
