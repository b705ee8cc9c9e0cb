use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]
checkpoint_every = 2

[benchmark.config]
name = "tiny"

[benchmark.config.pretrain]
id = 0
n_samples = 120
shape = [128, 2, 2]
fs = 30.0
hr_dist = { kind = "uniform", support = [55.0, 100.0] }
bias = { row_gain_sigma = 0.1, noise_sigma = 0.5, drift_amp = 0.2, drift_freq = 0.15, harmonic_ratio = 0.2, interference = { amp = 1.0, band = [2.2, 3.0] } }

[[benchmark.config.clients]]
id = 1
n_samples = 20
shape = [128, 2, 2]
fs = 30.0
hr_dist = { kind = "truncated-lognormal", median = 75.0, sigma = 0.2, support = [45.0, 170.0] }
bias = { row_gain_sigma = 0.1, noise_sigma = 1.0, drift_amp = 0.5, drift_freq = 0.15, harmonic_ratio = 0.3 }

[[benchmark.config.clients]]
id = 2
n_samples = 20
shape = [128, 2, 2]
fs = 30.0
hr_dist = { kind = "truncated-lognormal", median = 110.0, sigma = 0.2, support = [60.0, 180.0] }
bias = { row_gain_sigma = 0.5, noise_sigma = 3.0, drift_amp = 1.0, drift_freq = 0.15, harmonic_ratio = 0.4 }

[benchmark.config.target]
id = 9
n_samples = 30
shape = [128, 2, 2]
fs = 30.0
hr_dist = { kind = "uniform", support = [50.0, 150.0] }
bias = { row_gain_sigma = 0.3, noise_sigma = 1.5, drift_amp = 1.0, drift_freq = 0.15, harmonic_ratio = 0.3 }

[model]
n_filters = 3
taps = 15

[pretrain]
epochs = 8
batch_size = 16

[federation]
rounds = 4
lr = 0.01
batch_size = 10
eval_every = 1
gdlc = { sigma = 5.0, gamma = 1.0, calibration = { first_active_quantile = { q = 0.9 } } }
"#;

fn fedhug(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhug"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn fedhug")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn gen_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(fedhug(d, &["gen", "-c", "tiny.toml", "--output-dir", "a"]));
    ok(fedhug(d, &["gen", "-c", "tiny.toml", "--output-dir", "b"]));
    let a = fs::read(d.join("a/data/seed_0/manifest.json")).unwrap();
    let b = fs::read(d.join("b/data/seed_0/manifest.json")).unwrap();
    assert_eq!(a, b);
    for sub in ["pretrain", "client_1", "client_2", "target"] {
        assert!(d.join("a/data/seed_0").join(sub).is_dir(), "{sub}");
    }
}

#[test]
fn preset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("r.toml"), "benchmark = { preset = \"rppg-4\" }\n").unwrap();
    ok(fedhug(d, &["gen", "-c", "r.toml"]));
    let mut subs: Vec<String> = fs::read_dir(d.join("runs/data/seed_0"))
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    subs.sort();
    assert_eq!(
        subs,
        ["client_1", "client_2", "client_3", "client_4", "pretrain", "target"]
    );
}

#[test]
fn unknown_key_is_named() {
    let dir = setup();
    let d = dir.path();
    let bad = TINY.replace("rounds = 4", "roundz = 4");
    fs::write(d.join("bad.toml"), bad).unwrap();
    let out = fedhug(d, &["gen", "-c", "bad.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("roundz"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn reserved_beta_warns() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("beta.toml"), format!("beta = 0.3\n{TINY}")).unwrap();
    let out = ok(fedhug(d, &["gen", "-c", "beta.toml"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));
}

#[test]
fn missing_inputs_fail_with_path() {
    let dir = setup();
    let d = dir.path();
    let out = fedhug(d, &["pretrain", "-c", "tiny.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed_0"));
    ok(fedhug(d, &["gen", "-c", "tiny.toml"]));
    let out = fedhug(d, &["run", "-c", "tiny.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain"));
    let out = fedhug(d, &["gen", "-c", "nope.toml"]);
    assert!(!out.status.success());
}

#[test]
fn zero_lr_pretrain_fails_to_converge() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("z.toml"), TINY.replace("epochs = 8", "epochs = 8\nlr = 0.0")).unwrap();
    ok(fedhug(d, &["gen", "-c", "z.toml"]));
    let out = fedhug(d, &["pretrain", "-c", "z.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("did not improve"));
}

#[test]
fn full_pipeline_resume_and_report() {
    let dir = setup();
    let d = dir.path();
    ok(fedhug(d, &["gen", "-c", "tiny.toml", "--seeds", "2"]));
    ok(fedhug(d, &["pretrain", "-c", "tiny.toml", "--seeds", "2"]));
    let model = d.join("runs/pretrain/seed_0/model.bin");
    let before = fs::metadata(&model).unwrap().modified().unwrap();
    let bytes = fs::read(&model).unwrap();
    let out = ok(fedhug(d, &["-v", "pretrain", "-c", "tiny.toml", "--seeds", "2"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to do"));
    assert_eq!(fs::read(&model).unwrap(), bytes);
    assert_eq!(fs::metadata(&model).unwrap().modified().unwrap(), before);

    ok(fedhug(d, &["run", "-c", "tiny.toml", "--seeds", "2"]));
    ok(fedhug(
        d,
        &[
            "run",
            "-c",
            "tiny.toml",
            "--seeds",
            "2",
            "--policy",
            "fedavg",
            "--gdlc",
            "off",
            "--sequential",
        ],
    ));
    for name in ["fedhug", "fedavg"] {
        for seed in 0..2 {
            let run = d.join(format!("runs/runs/{name}/seed_{seed}"));
            for f in [
                "manifest.json",
                "history.jsonl",
                "summary.csv",
                "final_eval.json",
                "model.bin",
            ] {
                assert!(run.join(f).exists(), "{name} {seed} {f}");
            }
            let lines = fs::read_to_string(run.join("history.jsonl")).unwrap().lines().count();
            assert_eq!(lines, 4);
        }
        let agg = fs::read_to_string(d.join(format!("runs/runs/{name}/aggregate.csv"))).unwrap();
        assert_eq!(agg.lines().count(), 4, "{agg}");
        assert!(agg.lines().last().unwrap().starts_with("mean,"));
    }

    // Interrupted run: stop after 2 rounds, then resume from the checkpoint.
    ok(fedhug(
        d,
        &["run", "-c", "tiny.toml", "--name", "split", "--rounds", "2"],
    ));
    ok(fedhug(d, &["run", "-c", "tiny.toml", "--name", "split", "--resume"]));
    let full = fs::read(d.join("runs/runs/fedhug/seed_0/history.jsonl")).unwrap();
    let resumed = fs::read(d.join("runs/runs/split/seed_0/history.jsonl")).unwrap();
    assert_eq!(full, resumed);

    ok(fedhug(
        d,
        &["report", "runs/runs/fedhug", "runs/runs/fedavg", "--out", "rep"],
    ));
    for f in [
        "metrics.csv",
        "per_seed.csv",
        "tail_intervals.csv",
        "paired.csv",
        "paired_summary.csv",
        "report.md",
    ] {
        assert!(d.join("rep").join(f).exists(), "{f}");
    }
    let paired = fs::read_to_string(d.join("rep/paired_summary.csv")).unwrap();
    assert!(
        paired.lines().nth(1).unwrap().starts_with("fedavg,fedhug,2,"),
        "{paired}"
    );
    assert!(fs::read_dir(d.join("rep/s_distributions")).unwrap().count() >= 4);

    ok(fedhug(d, &["report", "runs/runs/fedhug/seed_1", "--out", "one"]));
    let m = fs::read_to_string(d.join("one/metrics.csv")).unwrap();
    assert!(m.lines().nth(1).unwrap().starts_with("fedhug,1,"));
}

#[test]
fn shipped_configs_use_tuned_settings() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["rppg-4", "mmwave-3"] {
        let text = fs::read_to_string(root.join(format!("{name}.toml"))).unwrap();
        let cfg: fedhug::config::ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        let preset = fedhug::config::ExperimentConfig::for_preset(name);
        assert_eq!(cfg.federation, fedhug::pipeline::tuned_fed_config(), "{name}");
        assert_eq!(cfg.benchmark.resolve().unwrap(), preset.benchmark.resolve().unwrap());
        assert_eq!(cfg.seeds, [0, 1, 2, 3, 4]);
    }
}
