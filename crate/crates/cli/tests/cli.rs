//! End-to-end tests driving the installed binary through its subcommands.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_perturbhom"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    binary()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).expect("csv readable");
    text.lines()
        .map(|line| line.split(',').map(str::to_string).collect())
        .collect()
}

const TWO_POINT: &str = r#"{"kind":"two_point","a":1.0,"b":2.0,"prob_a":0.5}"#;

#[test]
fn constant_media_row_is_exact() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "ahom",
            "--d",
            "2",
            "--n",
            "2",
            "--dist0",
            r#"{"kind":"point_mass","value":1.5}"#,
            "--p",
            "0.4",
            "--samples",
            "3",
            "--seed",
            "7",
            "--output-path",
            "rows.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("rows.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(
        rows[0],
        vec!["label", "d", "n", "p", "mean", "std_error", "n_samples", "seed", "wall_time_s"]
    );
    let row = &rows[1];
    assert_eq!(row[4], "1.5000000000000000e0");
    assert_eq!(row[5], "0.0000000000000000e0");
    assert_eq!(row[6], "3");
    assert_eq!(row[7], "7");
    let json = stdout_json(&out);
    assert_eq!(json["results"]["estimates"][0]["mean"], 1.5);
    assert_eq!(json["results"]["estimates"][0]["std_error"], 0.0);
}

#[test]
fn one_dimensional_mean_matches_harmonic_law() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "ahom",
            "--d",
            "1",
            "--n",
            "2",
            "--dist0",
            TWO_POINT,
            "--p",
            "0.3",
            "--samples",
            "600",
            "--seed",
            "41",
            "--output-path",
            "rows.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    let mean = json["results"]["estimates"][0]["mean"].as_f64().unwrap();
    let se = json["results"]["estimates"][0]["std_error"].as_f64().unwrap();

    // Five i.i.d. edges valued 1 or 2 with equal odds; the ring conducts at
    // the harmonic mean, so the expectation is a binomial sum.
    let length = 5.0;
    let choose = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0];
    let exact: f64 = choose
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let inv_sum = k as f64 + (length - k as f64) / 2.0;
            c * 0.5f64.powi(5) * (length / inv_sum)
        })
        .sum();
    assert!(
        (mean - exact).abs() <= 3.0 * se,
        "mean {mean} vs exact {exact} with se {se}"
    );
}

#[test]
fn rerun_reproduces_outputs() {
    let dir_a = TempDir::new().unwrap();
    let dir_b = TempDir::new().unwrap();
    let args = [
        "a1",
        "--d",
        "1",
        "--n",
        "2",
        "--dist0",
        TWO_POINT,
        "--p-bar",
        "0.2",
        "--samples",
        "8",
        "--seed",
        "13",
        "--output-path",
        "rows.csv",
    ];
    let out_a = run_in(dir_a.path(), &args);
    let out_b = run_in(dir_b.path(), &args);
    assert!(out_a.status.success());
    assert!(out_b.status.success());
    assert_eq!(out_a.stdout, out_b.stdout, "summaries must be byte-identical");

    let rows_a = read_csv(&dir_a.path().join("rows.csv"));
    let rows_b = read_csv(&dir_b.path().join("rows.csv"));
    assert_eq!(rows_a.len(), rows_b.len());
    for (ra, rb) in rows_a.iter().zip(&rows_b) {
        assert_eq!(ra[..8], rb[..8], "all fields except wall time must match");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir_a = TempDir::new().unwrap();
    let dir_b = TempDir::new().unwrap();
    let args = [
        "sweep",
        "--d",
        "1",
        "--n",
        "2",
        "--dist0",
        TWO_POINT,
        "--dist1",
        r#"{"kind":"point_mass","value":2.0}"#,
        "--p-grid",
        "0.1,0.2,0.4",
        "--samples",
        "12",
        "--seed",
        "29",
        "--output-path",
        "rows.csv",
    ];
    let out_a = run_in(dir_a.path(), &[&args[..], &["--threads", "1"]].concat());
    let out_b = run_in(dir_b.path(), &[&args[..], &["--threads", "3"]].concat());
    assert!(out_a.status.success());
    assert!(out_b.status.success());
    assert_eq!(out_a.stdout, out_b.stdout);
    let rows_a = read_csv(&dir_a.path().join("rows.csv"));
    let rows_b = read_csv(&dir_b.path().join("rows.csv"));
    for (ra, rb) in rows_a.iter().zip(&rows_b) {
        assert_eq!(ra[..8], rb[..8]);
    }
}

#[test]
fn cross_check_passes_on_a_small_box() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "a1",
            "--d",
            "2",
            "--n",
            "2",
            "--dist0",
            r#"{"kind":"point_mass","value":1.0}"#,
            "--dist1",
            r#"{"kind":"point_mass","value":2.0}"#,
            "--samples",
            "2",
            "--seed",
            "3",
            "--output-path",
            "rows.csv",
            "--cross-check",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    let dev = json["results"]["cross_check"]["max_box_local_dev"]
        .as_f64()
        .unwrap();
    assert!(dev <= 1e-6, "box/local deviation {dev}");
    let series_dev = json["results"]["cross_check"]["series"]["deviation"]
        .as_f64()
        .unwrap();
    assert!(series_dev <= 1e-6, "series deviation {series_dev}");
}

#[test]
fn config_file_errors_exit_two_with_a_position() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        "{\n  \"d\": 1,\n  \"n\": 3,\n  \"wibble\": true\n}\n",
    )
    .unwrap();
    let out = run_in(dir.path(), &["ahom", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("wibble"), "stderr: {err}");
    assert!(err.contains("bad.json:4"), "stderr: {err}");
}

#[test]
fn degenerate_sweep_grid_exits_two() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "sweep",
            "--d",
            "1",
            "--n",
            "3",
            "--dist0",
            r#"{"kind":"point_mass","value":1.0}"#,
            "--p-grid",
            "0.1",
            "--samples",
            "4",
            "--seed",
            "1",
            "--output-path",
            "rows.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn selftest_passes_and_catches_a_corrupted_tolerance() {
    let dir = TempDir::new().unwrap();
    let good = run_in(dir.path(), &["selftest"]);
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stderr));
    let table = String::from_utf8_lossy(&good.stdout);
    assert!(table.lines().all(|l| l.starts_with("PASS")), "{table}");

    let bad = run_in(dir.path(), &["selftest", "--tolerance", "1e-4"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("selftest failed at:"));
}

#[test]
fn environment_cache_round_trips() {
    let dir = TempDir::new().unwrap();
    let args = [
        "a1",
        "--d",
        "1",
        "--n",
        "2",
        "--dist0",
        TWO_POINT,
        "--p-bar",
        "0.2",
        "--samples",
        "5",
        "--seed",
        "11",
        "--cache-dir",
        "cache",
    ];
    let first = run_in(
        dir.path(),
        &[&args[..], &["--output-path", "a.csv"]].concat(),
    );
    assert!(first.status.success());
    let cache_files = std::fs::read_dir(dir.path().join("cache")).unwrap().count();
    assert_eq!(cache_files, 5);
    let second = run_in(
        dir.path(),
        &[&args[..], &["--output-path", "b.csv"]].concat(),
    );
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
}
