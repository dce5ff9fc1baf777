use std::path::Path;
use std::process::{Command, Output};

use drkrnet_core::experiment::ExperimentConfig;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.grid.height = 8;
    c.grid.width = 8;
    c.data.length_scales = vec![0.3, 0.4];
    c.data.per_scale = 10;
    c.data.test_per_scale = 2;
    c.data.truth_length_scale = 0.3;
    c.observations.per_axis = 4;
    c.observations.start = 0.125;
    c.observations.step = 0.25;
    c.vae.latent_dim = 4;
    c.vae.encoder_hidden = vec![16];
    c.vae.decoder_hidden = vec![16];
    c.vae.epochs = 2;
    c.vae.batch_size = 5;
    c.surrogate.hidden = vec![16];
    c.surrogate.epochs = 2;
    c.surrogate.batch_size = 5;
    c.flow.n_groups = 2;
    c.flow.layers_per_stage = 2;
    c.flow.hidden_width = 8;
    c.inference.n_train = 40;
    c.inference.epochs = 2;
    c.inference.batch_size = 20;
    c.inference.n_samples = 30;
    c.mcmc.steps = 200;
    c.mcmc.keep = 50;
    c.mcmc.pilot_steps = 40;
    c.mcmc.max_tuning_rounds = 3;
    c
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn drkrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drkrnet"))
        .args(args)
        .output()
        .unwrap()
}

fn stage(name: &str, config: &Path, out: &Path) -> Output {
    drkrnet(&[
        name,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const STAGES: [&str; 5] = [
    "generate-data",
    "train-vae",
    "train-surrogate",
    "infer-krnet",
    "infer-mcmc",
];

fn run_all(config: &Path, out: &Path) {
    for s in STAGES {
        assert_ok(&stage(s, config, out));
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_data_counts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    assert_ok(&stage("generate-data", &cfg, &out));
    let manifest = std::fs::read_to_string(out.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 20);
    let summary = json(&out.join("data/data.json"));
    assert_eq!(summary["n_samples"], 20);
    assert_eq!(summary["n_sensors"], 16);
}

#[test]
fn pipeline_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all(&cfg, &a);
    run_all(&cfg, &b);
    for entry in walk(&a) {
        let rel = entry.strip_prefix(&a).unwrap();
        if rel.file_name().unwrap() == "timing.json" {
            continue;
        }
        assert_eq!(
            std::fs::read(&entry).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_and_report_agree_with_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    run_all(&cfg, &out);

    let krnet = json(&out.join("infer-krnet/summary.json"));
    let mcmc = json(&out.join("infer-mcmc/summary.json"));
    assert!(krnet["relative_error"].as_f64().unwrap().is_finite());
    let accepted = mcmc["acceptance_rate"].as_f64().unwrap() * mcmc["n_steps"].as_f64().unwrap();
    assert!((accepted - accepted.round()).abs() < 1e-9);

    assert_ok(&drkrnet(&["report", "--out", out.to_str().unwrap()]));
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "method,d,relative_error,wall_time,acceptance_rate"
    );
    assert_eq!(lines.len(), 3);
    for (line, summary) in lines[1..].iter().zip([&krnet, &mcmc]) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], summary["method"].as_str().unwrap());
        assert_eq!(
            cols[1].parse::<u64>().unwrap(),
            summary["d"].as_u64().unwrap()
        );
        assert_eq!(
            cols[2].parse::<f64>().unwrap(),
            summary["relative_error"].as_f64().unwrap()
        );
        match summary["acceptance_rate"].as_f64() {
            Some(a) => assert_eq!(cols[4].parse::<f64>().unwrap(), a),
            None => assert_eq!(cols[4], ""),
        }
    }
}

#[test]
fn report_sorts_runs_by_method_and_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let mut big = tiny();
    big.vae.latent_dim = 6;
    big.flow.n_groups = 3;
    let (a, b) = (dir.path().join("d6"), dir.path().join("d4"));
    for (cfg, out) in [(big, &a), (tiny(), &b)] {
        let path = write_config(dir.path(), &cfg);
        for s in &STAGES[..4] {
            assert_ok(&stage(s, &path, out));
        }
    }
    let table_dir = dir.path().join("table");
    std::fs::create_dir_all(&table_dir).unwrap();
    assert_ok(&drkrnet(&[
        "report",
        "--out",
        table_dir.to_str().unwrap(),
        a.to_str().unwrap(),
        b.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(table_dir.join("comparison.csv")).unwrap();
    let ds: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(ds, vec!["4", "6"]);
}

#[test]
fn missing_prerequisite_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dir.path().join("run");
    assert_ok(&stage("generate-data", &cfg, &out));
    let o = stage("infer-krnet", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing prerequisite"));
}

#[test]
fn changed_config_between_stages_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &tiny());
    assert_ok(&stage("generate-data", &cfg, &out));
    let mut other = tiny();
    other.vae.epochs = 3;
    let cfg = write_config(dir.path(), &other);
    let o = stage("train-vae", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(
        &p,
        tiny().to_toml().replace("[vae]", "[vae]\nlatnet_dim = 3"),
    )
    .unwrap();
    let o = stage("generate-data", &p, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("latnet_dim"));
}

#[test]
fn seed_override_is_deterministic_and_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let cfg = cfg.to_str().unwrap();
    let gen = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert_ok(&drkrnet(&[
            "generate-data",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
            "--seed-override",
            seed,
        ]));
        std::fs::read(out.join("data/prior.bin")).unwrap()
    };
    let (a, b, c) = (gen("a", "5"), gen("b", "5"), gen("c", "6"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn numerical_failure_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny();
    c.surrogate.learning_rate = 1e200;
    c.surrogate.epochs = 20;
    let cfg = write_config(dir.path(), &c);
    let out = dir.path().join("run");
    assert_ok(&stage("generate-data", &cfg, &out));
    assert_ok(&stage("train-vae", &cfg, &out));
    let o = stage("train-surrogate", &cfg, &out);
    assert_eq!(
        o.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}
