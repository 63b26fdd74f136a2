//! End-to-end runs of the `mixbart` binary on a bundled smoke fixture.

use std::path::Path;
use std::process::Command;

fn mixbart() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mixbart"))
}

/// Writes a small 4-region x 20-day dataset, its adjacency, and a fast run
/// config into `dir`.
fn write_fixture(dir: &Path) -> (String, String, String) {
    // Deterministic synthetic panel; a simple LCG keeps the fixture
    // self-contained.
    let mut state = 88172645463325252u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut csv = String::from("region_id,date_index,count,population,x1,z1,z2,z3\n");
    for (r, region) in ["A", "B", "C", "D"].iter().enumerate() {
        for d in 0..20 {
            let z1 = next();
            let z2 = next();
            let z3 = next();
            let x1 = next();
            let rate: f64 = 0.08 * (1.0 + z1 + 0.5 * x1 + 0.1 * r as f64);
            let count = (rate * 50.0 * next() * 2.0).floor().max(0.0) as u64;
            csv.push_str(&format!(
                "{region},{d},{count},50,{x1:.6},{z1:.6},{z2:.6},{z3:.6}\n"
            ));
        }
    }
    let data_path = dir.join("data.csv");
    std::fs::write(&data_path, csv).unwrap();

    let adjacency = "A,B\nB,C\nC,D\n";
    let adjacency_path = dir.join("adjacency.txt");
    std::fs::write(&adjacency_path, adjacency).unwrap();

    let config = r#"
[data]
confounders = ["x1"]
exposures = ["z1", "z2", "z3"]

[bart]
trees = 4

[run]
burnin = 60
samples = 30
thin = 1
seed = 11
"#;
    let config_path = dir.join("run.toml");
    std::fs::write(&config_path, config).unwrap();
    (
        data_path.display().to_string(),
        adjacency_path.display().to_string(),
        config_path.display().to_string(),
    )
}

fn run_fit(dir: &Path, out: &str, extra: &[&str]) -> std::process::Output {
    let (data, adjacency, config) = write_fixture(dir);
    let mut cmd = mixbart();
    cmd.args([
        "fit",
        "--data",
        &data,
        "--adjacency",
        &adjacency,
        "--config",
        &config,
        "--out",
        &dir.join(out).display().to_string(),
    ])
    .args(extra)
    .env("MIXBART_THREADS", "1");
    cmd.output().unwrap()
}

#[test]
fn fit_writes_store_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let output = run_fit(dir.path(), "store", &[]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(start.elapsed().as_secs() < 60, "smoke fit exceeded budget");
    let store_dir = dir.path().join("store");
    for file in [
        "meta.json",
        "beta.bin",
        "nu.bin",
        "tau2.bin",
        "rho.bin",
        "xi.bin",
        "split_probs.bin",
        "trees.jsonl",
        "summary.csv",
        "manifest.json",
    ] {
        assert!(store_dir.join(file).exists(), "{file} missing");
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("parameter,mean,lo95,hi95"));
    assert!(stdout.contains("beta[x1]"));
}

#[test]
fn fit_flag_overrides_echo_into_meta() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_fit(
        dir.path(),
        "store",
        &["--trees", "25", "--soft", "true", "--sparse", "true"],
    );
    assert!(output.status.success());
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("store/meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["config"]["bart"]["trees"], 25);
    assert_eq!(meta["config"]["bart"]["soft"], true);
    assert_eq!(meta["config"]["bart"]["sparse"], true);
}

#[test]
fn seeded_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = run_fit(dir.path(), "store1", &[]);
    assert!(out1.status.success());
    let out2 = run_fit(dir.path(), "store2", &[]);
    assert!(out2.status.success());
    for file in [
        "beta.bin",
        "nu.bin",
        "tau2.bin",
        "rho.bin",
        "xi.bin",
        "split_probs.bin",
        "trees.jsonl",
        "meta.json",
    ] {
        let a = std::fs::read(dir.path().join("store1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("store2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs across seeded reruns");
    }
}

#[test]
fn ale_and_waic_consume_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let output = run_fit(dir.path(), "store", &[]);
    assert!(output.status.success());
    let store = dir.path().join("store").display().to_string();
    let data = dir.path().join("data.csv").display().to_string();

    // decile: 9 rows, RR = 1 at the median decile
    let out = mixbart()
        .args(["ale", "--store", &store, "--data", &data, "--mode", "decile"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = mixbart_rows(&out.stdout);
    assert_eq!(rows.len(), 9);
    let median_row: Vec<&str> = rows[4].split(',').collect();
    assert_eq!(median_row[3], "0.5");
    assert_eq!(median_row[5], "1");

    // ale1 with trimming emits a parsable CSV
    let ale_path = dir.path().join("ale.csv");
    let out = mixbart()
        .args([
            "ale", "--store", &store, "--data", &data, "--mode", "ale1", "--exposure", "z1",
            "--bins", "10", "--trim", "0.95", "--out",
            &ale_path.display().to_string(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&ale_path).unwrap();
    let parsed = mixbart::interpret::parse_tidy_csv(&text).unwrap();
    assert!(!parsed.is_empty());
    assert_eq!(mixbart::interpret::tidy_csv(&parsed), text);

    // ale2 emits a surface with the flags column
    let out = mixbart()
        .args([
            "ale", "--store", &store, "--data", &data, "--mode", "ale2", "--exposure", "z1",
            "--exposure2", "z3", "--bins", "5",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = mixbart_rows(&out.stdout);
    assert!(rows.iter().all(|r| r.starts_with("ale2,z1,z3,")));

    // unknown exposure lists valid names and exits 3
    let out = mixbart()
        .args(["ale", "--store", &store, "--data", &data, "--mode", "ale1", "--exposure", "bogus"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("z1") && stderr.contains("z3"), "{stderr}");

    // waic prints the decomposition and writes contributions
    let out = mixbart()
        .args(["waic", "--store", &store, "--data", &data])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("waic,"));
    assert!(stdout.contains("lppd,"));
    assert!(stdout.contains("p_waic,"));
    assert!(dir.path().join("store/waic_contributions.csv").exists());
}

#[test]
fn config_errors_exit_2_data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (data, adjacency, _) = write_fixture(dir.path());
    // trees = 0 is a config error
    let bad_config = dir.path().join("bad.toml");
    std::fs::write(&bad_config, "[data]\nexposures=[\"z1\"]\n[bart]\ntrees = 0\n").unwrap();
    let out = mixbart()
        .args([
            "fit", "--data", &data, "--adjacency", &adjacency, "--config",
            &bad_config.display().to_string(), "--out",
            &dir.path().join("o1").display().to_string(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // unknown region in the adjacency is a data error
    let bad_adj = dir.path().join("bad_adj.txt");
    std::fs::write(&bad_adj, "A,Z\n").unwrap();
    let (_, _, config) = write_fixture(dir.path());
    let out = mixbart()
        .args([
            "fit", "--data", &data, "--adjacency", &bad_adj.display().to_string(), "--config",
            &config, "--out", &dir.path().join("o2").display().to_string(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn manifest_digest_mismatch_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = run_fit(dir.path(), "store", &[]);
    assert!(out1.status.success());
    // mutate the dataset, rerun into the same directory
    let data_path = dir.path().join("data.csv");
    let mut text = std::fs::read_to_string(&data_path).unwrap();
    text.push_str("A,20,1,50,0.5,0.5,0.5,0.5\n");
    std::fs::write(&data_path, text).unwrap();
    let (_, adjacency, config) = (
        data_path.display().to_string(),
        dir.path().join("adjacency.txt").display().to_string(),
        dir.path().join("run.toml").display().to_string(),
    );
    let out = mixbart()
        .args([
            "fit", "--data", &data_path.display().to_string(), "--adjacency", &adjacency,
            "--config", &config, "--out", &dir.path().join("store").display().to_string(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("different inputs"), "{stderr}");
}

#[test]
fn simulate_smoke_grid_emits_metric_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sim_config = r#"
days = 8
replicates = 2
seed = 3

[lattice]
rows = 2
cols = 2

[schedule]
burnin = 30
samples = 20
thin = 1

[[settings]]
trees = 3
soft = true
sparse = true

[[settings]]
trees = 3
soft = false
sparse = true
"#;
    let config_path = dir.path().join("sim.toml");
    std::fs::write(&config_path, sim_config).unwrap();
    let out = mixbart()
        .args([
            "simulate",
            "--config",
            &config_path.display().to_string(),
            "--out",
            &dir.path().join("sim").display().to_string(),
        ])
        .env("MIXBART_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("sim/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.trim().lines().collect();
    assert_eq!(lines.len(), 3, "{metrics}");
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        let coverage: f64 = cells[5].parse().unwrap();
        assert!((0.0..=1.0).contains(&coverage));
        for c in &cells[3..] {
            assert!(c.parse::<f64>().unwrap().is_finite());
        }
    }
    let params = std::fs::read_to_string(dir.path().join("sim/parameters.csv")).unwrap();
    assert!(params.contains("beta1") && params.contains("xi") && params.contains("nu"));

    // T = 0 grid is a config error
    let bad = sim_config.replace("trees = 3", "trees = 0");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = mixbart()
        .args([
            "simulate",
            "--config",
            &dir.path().join("bad.toml").display().to_string(),
            "--out",
            &dir.path().join("sim2").display().to_string(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn mixbart_rows(stdout: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(stdout)
        .lines()
        .skip(1)
        .map(str::to_string)
        .collect()
}
