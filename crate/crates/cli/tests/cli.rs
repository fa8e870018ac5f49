//! End-to-end tests of the `brwre` binary: exit codes, artifact shapes,
//! config precedence and cross-invocation identities.

use std::path::PathBuf;
use std::process::{Command, Output};

fn brwre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brwre"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("brwre_cli_{}_{name}", std::process::id()))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Parses a green CSV into (source, site) -> value.
fn parse_green(text: &str) -> std::collections::BTreeMap<Vec<i64>, f64> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines().skip(2) {
        let fields: Vec<&str> = line.split(',').collect();
        let coords: Vec<i64> =
            fields[..fields.len() - 1].iter().map(|c| c.parse().unwrap()).collect();
        map.insert(coords, fields.last().unwrap().parse().unwrap());
    }
    map
}

#[test]
fn env_roundtrip_and_verify() {
    let path = tmp("env.brw");
    let out = brwre(&[
        "env", "sample", "--d", "2", "--box-radius", "4", "--kind", "traps", "--env-seed", "7",
        "--save", path.to_str().unwrap(), "--explicit-arrays",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = stdout(&out);
    assert!(summary.contains("\"pi_origin\""));

    let verify = brwre(&["env", "verify", "--file", path.to_str().unwrap()]);
    assert!(verify.status.success(), "{}", stderr(&verify));

    let load = brwre(&["env", "load", "--file", path.to_str().unwrap()]);
    assert!(load.status.success());
    assert!(stdout(&load).contains("\"seed\": 7"));

    // Corrupt one payload byte: verification must fail with exit 2.
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0x80;
    std::fs::write(&path, &bytes).unwrap();
    let bad = brwre(&["env", "verify", "--file", path.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("\"error\""));
    std::fs::remove_file(&path).ok();
}

#[test]
fn green_traps_equals_homogeneous_table() {
    // Cross-binary identity: a traps Green table matches the homogeneous
    // one entrywise within 1e-9.
    let traps_csv = tmp("traps.csv");
    let hom_csv = tmp("hom.csv");
    let out = brwre(&[
        "green", "--d", "3", "--box-radius", "4", "--kind", "traps", "--env-seed", "7",
        "--m", "4", "--sources", "0,0,0;2,0,0", "--csv", traps_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = brwre(&[
        "green", "--d", "3", "--box-radius", "4", "--kind", "constant",
        "--m", "4", "--sources", "0,0,0;2,0,0", "--csv", hom_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let a = parse_green(&std::fs::read_to_string(&traps_csv).unwrap());
    let b = parse_green(&std::fs::read_to_string(&hom_csv).unwrap());
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (k, va) in &a {
        worst = worst.max((va - b[k]).abs());
    }
    assert!(worst <= 1e-9, "tables differ by {worst:.3e}");
    std::fs::remove_file(&traps_csv).ok();
    std::fs::remove_file(&hom_csv).ok();
}

#[test]
fn snake_csv_is_deterministic_across_worker_counts() {
    let run = |workers: &str| -> String {
        let csv = tmp(&format!("snake_{workers}.csv"));
        let out = Command::new(env!("CARGO_BIN_EXE_brwre"))
            .env("BRWRE_WORKERS", workers)
            .args([
                "snake", "--d", "2", "--box-radius", "4", "--m", "4", "--replicates", "200",
                "--master-seed", "5", "--csv", csv.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        let text = std::fs::read_to_string(&csv).unwrap();
        std::fs::remove_file(&csv).ok();
        text
    };
    let a = run("1");
    let b = run("4");
    assert_eq!(a, b, "snake CSV must not depend on worker count");
    assert_eq!(a.lines().count(), 202); // comment + header + 200 rows
    assert!(a.lines().nth(1).unwrap().starts_with("replicate,value"));
}

#[test]
fn experiment_report_passes_and_embeds_config() {
    let json = tmp("scaling.json");
    let out = brwre(&[
        "experiment", "scaling", "--d", "5", "--kind", "homogeneous", "--m-grid", "2,4",
        "--replicates", "400", "--master-seed", "3", "--out", json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(doc["config"]["subcommand"], "experiment_scaling");
    assert_eq!(doc["config"]["master_seed"], "3");
    assert!(doc["config"]["tool_version"].is_string());
    assert_eq!(doc["report"]["experiment"], "scaling");
    let verdicts = doc["report"]["verdicts"].as_array().unwrap();
    assert!(verdicts.iter().all(|v| v["pass"].as_bool().unwrap()));
    std::fs::remove_file(&json).ok();
}

#[test]
fn config_file_merges_and_cli_wins() {
    let cfg = tmp("run.cfg");
    std::fs::write(
        &cfg,
        "schema_version = 1\nd = 2\nbox_radius = 3\nkind = traps\nenv_seed = 9\n",
    )
    .unwrap();
    // File supplies everything.
    let out = brwre(&["--config", cfg.to_str().unwrap(), "env", "sample"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("\"d\": 2"));
    // The command line overrides d.
    let out = brwre(&["--config", cfg.to_str().unwrap(), "env", "sample", "--d", "1"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("\"d\": 1"));
    // Missing schema_version is a config error: exit 2.
    std::fs::write(&cfg, "d = 2\n").unwrap();
    let out = brwre(&["--config", cfg.to_str().unwrap(), "env", "sample"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("schema_version"));
    std::fs::remove_file(&cfg).ok();
}

#[test]
fn invalid_flags_give_machine_readable_exit_2() {
    let out = brwre(&["env", "sample", "--kind", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_str(stderr(&out).trim()).unwrap();
    assert_eq!(err["error"], "config");

    let out = brwre(&["experiment", "scaling", "--d", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn conductance_csv_shape() {
    let csv = tmp("cond.csv");
    let out = brwre(&[
        "conductance", "--d", "1", "--kind", "conductances", "--edge-dist", "constant",
        "--edge-a", "1.0", "--box-radius", "8", "--m-grid", "2,4,8",
        "--csv", csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert!(rows[0].starts_with("# {"));
    assert_eq!(rows[1], "m,c_value,residual");
    // Unit conductances: C_m = 2/(m+1).
    for (row, m) in rows[2..].iter().zip([2i64, 4, 8]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], m.to_string());
        let c: f64 = fields[1].parse().unwrap();
        assert!((c - 2.0 / (m as f64 + 1.0)).abs() <= 1e-10);
    }
    std::fs::remove_file(&csv).ok();
}

#[test]
fn series_and_reroot_demo_run() {
    let out = brwre(&["series", "--d", "1", "--box-radius", "8", "--n-max", "8"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().nth(1).unwrap().starts_with("n,p_diag"));
    assert_eq!(text.lines().count(), 2 + 9);

    let out = brwre(&[
        "reroot-demo", "--d", "2", "--box-radius", "8", "--m", "4", "--steps", "2",
        "--law", "geometric",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("\"stages\""));
}
