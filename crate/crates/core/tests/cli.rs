//! End-to-end checks of the `fedsim` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use fedsim::results::parse_results;
use tempfile::TempDir;

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_RUN: &str = r#"
rounds = 6
local_steps = 5
[dataset]
kind = "synthetic"
train_size = 1000
test_size = 400
[aggregator]
kind = "loss_cluster"
[attack]
kind = "sign_flip"
start_round = 3
"#;

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = fedsim(&["run", "--config", path_str(&cfg), "--out", path_str(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read(&a).unwrap();
    assert_eq!(csv, fs::read(&b).unwrap());
    assert_eq!(
        fs::read(a.with_extension("json")).unwrap(),
        fs::read(b.with_extension("json")).unwrap()
    );

    let parsed = parse_results(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert!(parsed.header.starts_with("# fedsim "));
    assert!(parsed.header.ends_with("seed=1"));
    assert_eq!(parsed.rows.len(), 6);
    for (t, row) in parsed.rows.iter().enumerate() {
        assert_eq!(row.round, t);
        assert_eq!(row.attack_active, t >= 3);
        assert_eq!(row.per_client_loss.len(), 10);
        assert!(row.per_client_loss.iter().all(Option::is_some));
        assert_eq!(row.k_t, row.selected_ids.len());
    }

    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(a.with_extension("json")).unwrap()).unwrap();
    let hand: f64 = parsed.rows[3..].iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    let reported = summary["post_attack_mean_accuracy"].as_f64().unwrap();
    assert!((reported - hand).abs() < 1e-12);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let out = dir.path().join("r.csv");
    let o = fedsim(&[
        "run",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--seed",
        "42",
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().next().unwrap().ends_with("seed=42"));
}

#[test]
fn invalid_config_fails_without_output() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "[dataset]\nkind = \"synthetic\"\n[aggregator]\nkind = \"trimmed_mean\"\nbeta = 0.6\n",
    )
    .unwrap();
    let out = dir.path().join("out.csv");
    let o = fedsim(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta in [0, 0.5)"));
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(left.len(), 1, "only the config file may remain");

    let o = fedsim(&["validate", "--config", path_str(&cfg)]);
    assert!(!o.status.success());
}

#[test]
fn validate_lists_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("typo.toml");
    fs::write(
        &cfg,
        "roundz = 3\n[dataset]\nkind = \"synthetic\"\n[aggregator]\nkind = \"mean\"\nbta = 0.1\n",
    )
    .unwrap();
    let o = fedsim(&["validate", "--config", path_str(&cfg)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("roundz") && err.contains("bta"), "{err}");

    fs::write(&cfg, SMALL_RUN).unwrap();
    let o = fedsim(&["validate", "--config", path_str(&cfg)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok"));
}

#[test]
fn thirty_round_run_is_fast() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "rounds = 30\n[dataset]\nkind = \"synthetic\"\n[aggregator]\nkind = \"loss_cluster\"\n[attack]\nkind = \"sign_flip\"\n",
    )
    .unwrap();
    let started = Instant::now();
    let o = fedsim(&[
        "run",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&dir.path().join("r.csv")),
    ]);
    assert!(o.status.success());
    assert!(started.elapsed() < Duration::from_secs(60));
}

const GRID: &str = r#"
repeats = 2
seed = 3
[base]
rounds = 5
local_steps = 4
[base.dataset]
kind = "synthetic"
train_size = 800
test_size = 300
[base.attack]
start_round = 2
[[defenses]]
kind = "mean"
[[defenses]]
kind = "trimmed_mean"
[[defenses]]
kind = "median"
[[defenses]]
kind = "krum"
f = 2
[[defenses]]
kind = "multi_krum"
f = 2
[[defenses]]
kind = "loss_cluster"
[[attacks]]
kind = "none"
[[attacks]]
kind = "sign_flip"
[[attacks]]
kind = "label_flip"
[[attacks]]
kind = "gaussian_noise"
"#;

/// Sample standard deviation written out longhand.
fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn grid_writes_table_recomputable_from_results() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(&cfg, GRID).unwrap();
    let out = dir.path().join("out");
    let o = fedsim(&["grid", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "defense,attack,dataset,mean,std,runs,status");
    assert_eq!(lines.len(), 1 + 24);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 24);

    let defenses = [
        "mean",
        "trimmed_mean",
        "median",
        "krum",
        "multi_krum",
        "loss_cluster",
    ];
    let attacks = ["none", "sign_flip", "label_flip", "gaussian_noise"];
    for (k, line) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], defenses[k / 4]);
        assert_eq!(f[1], attacks[k % 4]);
        assert_eq!(f[2], "synthetic");
        assert_eq!(f[5], "2");
        assert_eq!(f[6], "ok");

        let mut per_seed = Vec::new();
        for seed in [3, 4] {
            let name = format!("{}__{}__synthetic__seed{seed}.csv", f[0], f[1]);
            let parsed = parse_results(&fs::read_to_string(out.join(name)).unwrap()).unwrap();
            assert!(parsed.header.ends_with(&format!("seed={seed}")));
            let tail: Vec<f64> = parsed
                .rows
                .iter()
                .filter(|r| r.round >= 2)
                .map(|r| r.accuracy)
                .collect();
            per_seed.push(tail.iter().sum::<f64>() / tail.len() as f64);
        }
        let mean: f64 = f[3].parse().unwrap();
        let std: f64 = f[4].parse().unwrap();
        assert!(
            (mean - (per_seed[0] + per_seed[1]) / 2.0).abs() < 1e-12,
            "{line}"
        );
        assert!((std - sample_std(&per_seed)).abs() < 1e-12, "{line}");
    }
}

#[test]
fn single_repeat_has_zero_std() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(
        &cfg,
        "[base]\nrounds = 3\n[base.attack]\nstart_round = 1\n[base.dataset]\nkind = \"synthetic\"\ntrain_size = 600\ntest_size = 200\n[[defenses]]\nkind = \"median\"\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = fedsim(&[
        "grid",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&out),
        "--repeats",
        "1",
    ]);
    assert!(o.status.success());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[5], "1");
}

#[test]
fn grid_partial_failure_keeps_valid_results() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(
        &cfg,
        r#"
repeats = 1
[base]
rounds = 3
[base.dataset]
kind = "synthetic"
train_size = 600
test_size = 200
[[defenses]]
kind = "krum"
f = 8
[[defenses]]
kind = "mean"
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = fedsim(&["grid", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("N-f-2"));
    let valid = out.join("mean__none__synthetic__seed1.csv");
    assert_eq!(
        parse_results(&fs::read_to_string(valid).unwrap())
            .unwrap()
            .rows
            .len(),
        3
    );
    assert!(!out.join("krum__none__synthetic__seed1.csv").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().contains(",failed: "));
    assert!(summary.lines().nth(2).unwrap().ends_with(",ok"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["run_loss_cluster.toml", "mnist.toml"] {
        let o = fedsim(&["validate", "--config", path_str(&dir.join(name))]);
        assert!(
            o.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let grid = fedsim::cli::parse_grid(&dir.join("grid_synthetic.toml")).unwrap();
    assert_eq!(grid.cells.len(), 24);
    assert_eq!(grid.seeds, vec![1, 2, 3]);
    assert!(grid.cells.iter().all(|c| c.config.is_ok()));
}
