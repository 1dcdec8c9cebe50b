use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgehml::disk_pool::DiskPool;

/// Keeps each run to a fraction of a second.
const FAST: &[&str] = &[
    "--override",
    "iters_per_task=20",
    "--override",
    "unlabeled_per_class=120",
    "--override",
    "test_per_class=20",
    "--override",
    "disk_capacity=2000",
];

fn edgehml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgehml"))
        .args(args)
        .env("EDGEHML_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn fast(command: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--out", out.to_str().unwrap()];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    let o = edgehml(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Data rows of a results file, header lines stripped.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# edgehml results v1"));
    assert_eq!(
        lines.next(),
        Some("axis,value,variant,seed,average_accuracy,unsup_fraction,iteration_time_s")
    );
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn sample_dataset() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample_features.txt")
}

#[test]
fn run_writes_one_report_and_row() {
    let dir = tempfile::tempdir().unwrap();
    fast("run", dir.path(), &["--variant", "edgehml", "--seed", "1"]);
    let rows = rows(&dir.path().join("results.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][..4], ["", "", "edgehml", "1"]);
    let r = report(&dir.path().join("edgehml-seed1.json"));
    assert_eq!(r["variant"], "edgehml");
    assert_eq!(r["disk_eviction"], "fifo");
    assert!(dir.path().join("models/edgehml-seed1.model").exists());
    assert!(edgehml::Model::load(&dir.path().join("models/edgehml-seed1.model")).is_ok());
}

#[test]
fn later_onset_reports_forty_percent() {
    let dir = tempfile::tempdir().unwrap();
    fast(
        "run",
        dir.path(),
        &["--variant", "edgehml", "--override", "v1_frac=0.6", "--override", "v2_frac=0.7"],
    );
    let r = report(&dir.path().join("edgehml-seed0.json"));
    assert_eq!(r["unsup_fraction"], 0.4);
}

#[test]
fn onset_after_saturation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = edgehml(&["run", "--out", dir.path().to_str().unwrap(), "--override", "v1_frac=0.6"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("v1 > v2"));
}

#[test]
fn sft_row_has_no_unsupervised_share() {
    let dir = tempfile::tempdir().unwrap();
    fast("run", dir.path(), &["--variant", "sft"]);
    let rows = rows(&dir.path().join("results.csv"));
    assert_eq!(rows[0][2], "sft");
    assert_eq!(rows[0][5], "0");
    assert!(!dir.path().join("pools/sft-seed0.pool").exists());
}

#[test]
fn labels_sweep_has_a_row_per_point_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    fast(
        "sweep",
        dir.path(),
        &[
            "--axis",
            "labels_per_class=5,25,100",
            "--variant",
            "sft",
            "--variant",
            "edgehml",
            "--seed",
            "1",
            "--seed",
            "2",
            "--jobs",
            "4",
        ],
    );
    let rows = rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 3 * 2 * 2);
    for labels in ["5", "25", "100"] {
        for variant in ["sft", "edgehml"] {
            for seed in ["1", "2"] {
                let n = rows
                    .iter()
                    .filter(|r| r[0] == "labels_per_class" && r[1] == labels && r[2] == variant && r[3] == seed)
                    .count();
                assert_eq!(n, 1, "{labels} {variant} {seed}");
            }
        }
    }
    // rows arrive in job order whatever the worker count
    assert_eq!(rows[0][1], "5");
    assert_eq!(rows[11][1], "100");
}

#[test]
fn capacity_sweep_applies_both_capacities() {
    let dir = tempfile::tempdir().unwrap();
    fast("sweep", dir.path(), &["--axis", "capacity=200+10000,500+12000,2000+15000"]);
    let rows = rows(&dir.path().join("sweep.csv"));
    let values: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(values, ["200+10000", "500+12000", "2000+15000"]);
    let r = report(&dir.path().join("edgehml-seed0-capacity500+12000.json"));
    assert_eq!(r["config_echo"]["mem_capacity"], 500);
    assert_eq!(r["config_echo"]["disk_capacity"], 12000);
}

#[test]
fn onset_sweep_keeps_the_ramp_width() {
    let dir = tempfile::tempdir().unwrap();
    fast("sweep", dir.path(), &["--axis", "v1_frac=0.2,0.6"]);
    let rows = rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows[0][5], "0.8");
    assert_eq!(rows[1][5], "0.4");
}

#[test]
fn empty_axis_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = edgehml(&["sweep", "--out", out.to_str().unwrap(), "--axis", "labels_per_class="]);
    assert!(o.status.success());
    assert!(!out.join("sweep.csv").exists());
}

#[test]
fn unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(!edgehml(&["run", "--out", out, "--override", "gamma=1"]).status.success());
    assert!(!edgehml(&["sweep", "--out", out, "--axis", "gamma=1,2"]).status.success());
    assert!(!edgehml(&["run", "--out", out, "--variant", "der"]).status.success());
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "tau = 0.9\nwarmup = 3\n").unwrap();
    assert!(!edgehml(&["run", "--out", out, "--config", config.to_str().unwrap()]).status.success());
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("h.toml");
    std::fs::write(&config, "tau = 0.9\niters_per_task = 7\n").unwrap();
    fast("run", dir.path(), &["--config", config.to_str().unwrap(), "--override", "iters_per_task=10"]);
    let r = report(&dir.path().join("edgehml-seed0.json"));
    assert_eq!(r["config_echo"]["tau"], 0.9);
    assert_eq!(r["total_iterations"], 50);
}

#[test]
fn repeated_runs_agree_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        fast("run", out, &["--variant", "labeled-replay", "--variant", "edgehml", "--seed", "3"]);
    }
    let strip = |rows: Vec<Vec<String>>| -> Vec<Vec<String>> {
        rows.into_iter().map(|r| r[..6].to_vec()).collect()
    };
    assert_eq!(strip(rows(&a.join("results.csv"))), strip(rows(&b.join("results.csv"))));
}

#[test]
fn results_file_from_another_version_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("results.csv"), "# edgehml results v0\n").unwrap();
    let mut args = vec!["run", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(FAST);
    assert!(!edgehml(&args).status.success());
}

#[test]
fn runs_on_a_feature_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = sample_dataset();
    fast(
        "run",
        dir.path(),
        &[
            "--dataset",
            dataset.to_str().unwrap(),
            "--override",
            "tasks=2",
            "--override",
            "test_fraction=0.2",
        ],
    );
    let r = report(&dir.path().join("edgehml-seed0.json"));
    assert_eq!(r["acc_matrix"].as_array().unwrap().len(), 2);
}

fn inspect(path: &Path) -> Output {
    edgehml(&["inspect-pool", path.to_str().unwrap()])
}

fn field(stdout: &str, name: &str) -> u64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(name))
        .unwrap_or_else(|| panic!("no {name} in {stdout}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn inspect_fresh_pool() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fresh.pool");
    drop(DiskPool::create(&path, 4, 50, 3).unwrap());
    let o = inspect(&path);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(field(&stdout, "count"), 0);
    assert_eq!(field(&stdout, "capacity"), 50);
}

#[test]
fn inspect_rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.pool");
    drop(DiskPool::create(&path, 4, 50, 3).unwrap());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let o = inspect(&path);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn inspect_after_run_histogram_sums_to_count() {
    let dir = tempfile::tempdir().unwrap();
    fast("run", dir.path(), &["--override", "iters_per_task=100"]);
    let o = inspect(&dir.path().join("pools/edgehml-seed0.pool"));
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let count = field(&stdout, "count");
    let histogram: u64 = stdout
        .lines()
        .skip_while(|l| !l.starts_with("class"))
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert!(count > 0);
    assert_eq!(histogram, count);
}
