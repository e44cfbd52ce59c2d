//! End-to-end checks of the binary: artifact layout, exit codes, rerun
//! determinism, and the diagnostic subcommands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adobs_core::experiments::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adobs"))
}

/// Fresh scratch directory unique to this test.
fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("adobs-cli-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process must exit, not signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_artifacts_and_reruns_bit_identically() {
    let dir = scratch("run");
    let out_dir = dir.join("out");

    let out = bin().args(["run", "duffing-fixed", "--out"]).arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    for name in ["trajectory.csv", "summary.json", "summary.schema.json", "manifest.json"] {
        assert!(out_dir.join(name).is_file(), "missing {name}");
    }

    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["experiment"], "duffing-fixed");
    assert_eq!(summary["grid"]["decimation"], 100);
    assert!(summary["terminal"]["theta_rel_error"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v.as_f64().unwrap() < 0.05));
    assert!(summary["convergence"]["theta_within_5pct"].as_f64().unwrap() <= 600.0);

    let manifest = read_json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["config"], "builtin:duffing-fixed");
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));

    let csv = std::fs::read(out_dir.join("trajectory.csv")).unwrap();
    let header = csv.split(|&b| b == b'\n').next().unwrap();
    assert!(std::str::from_utf8(header).unwrap().starts_with("t,x0,x0_hat,theta_hat_1"));

    // Occupied directory refuses to overwrite without --force...
    let out = bin().args(["run", "duffing-fixed", "--out"]).arg(&out_dir).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"), "{}", stderr(&out));

    // ...and a forced rerun reproduces the trajectory byte for byte.
    let out = bin()
        .args(["run", "duffing-fixed", "--force", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv, std::fs::read(out_dir.join("trajectory.csv")).unwrap());

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn output_dir_env_var_is_honored() {
    let dir = scratch("env");
    let out = bin()
        .args(["run", "duffing-fixed"])
        .env("ADOBS_OUT", &dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.join("duffing-fixed").join("summary.json").is_file());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bad_configs_exit_with_usage_code() {
    let dir = scratch("badcfg");

    // Missing file.
    let out = bin().args(["run"]).arg(dir.join("nope.ini")).output().unwrap();
    assert_eq!(code(&out), 2);

    // Present but malformed: the message must name the offending field.
    let empty = dir.join("empty.ini");
    std::fs::write(&empty, "").unwrap();
    let out = bin().args(["run"]).arg(&empty).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("name"), "{}", stderr(&out));

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn excitation_check_passes_on_the_forced_oscillator() {
    let dir = scratch("pe");
    let out = bin()
        .args(["check-pe", "duffing", "--grid", "3", "--t-end", "700", "--stride", "50", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.join("pe_report.json"));
    assert_eq!(report["pe"]["verdict"], true);
    assert!(report["pe"]["mu_uniform"].as_f64().unwrap() > 0.0);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn excitation_check_rejects_too_short_horizons() {
    let dir = scratch("peshort");
    // window 100 + L 500 needs t_end >= 600
    let out = bin()
        .args(["check-pe", "duffing", "--t-end", "300", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn single_point_grid_warns_that_it_is_too_coarse() {
    let dir = scratch("pecoarse");
    let out = bin()
        .args(["check-pe", "duffing", "--grid", "1", "--t-end", "700", "--stride", "50", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.join("pe_report.json"));
    let warnings = report["warnings"].as_array().unwrap();
    assert!(
        warnings.iter().any(|w| w.as_str().unwrap().contains("too coarse")),
        "{warnings:?}"
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unexcited_plant_fails_the_excitation_check() {
    let dir = scratch("penone");

    // Emit the stock bioreactor config and switch its feed off.
    let out = bin().args(["list-examples", "--emit"]).arg(&dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let path = dir.join("bioreactor.ini");
    let text = std::fs::read_to_string(&path).unwrap();
    let patched = text.replace("u_amp = 40", "u_amp = 0").replace("u_offset = 1.5", "u_offset = 0");
    assert_ne!(patched, text, "patch must hit both feed parameters");
    std::fs::write(&path, patched).unwrap();

    let out = bin()
        .args(["check-pe"])
        .arg(&path)
        .args(["--grid", "2", "--t-end", "700", "--stride", "50", "--out"])
        .arg(dir.join("report"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bounds_report_carries_a_positive_search_speed_cap() {
    let dir = scratch("bounds");
    let out = bin()
        .args(["bounds", "duffing", "--grid", "3", "--t-end", "650", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = read_json(&dir.join("bounds.json"));
    assert!(report["bounds"]["gamma_star"]["value"].as_f64().unwrap() > 0.0);
    assert!(report["bounds"]["delta_total"].as_f64().unwrap() > 0.0);
    assert!(report["constants"]["mu"]["value"].as_f64().unwrap() > 0.0);
    // The stock run uses a search speed far above the certified cap, which
    // must surface as an advisory rather than an error.
    assert!(report["advisories"].as_array().is_some_and(|a| !a.is_empty()));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn bounds_without_excitation_has_no_constant() {
    let dir = scratch("nope5");
    let out =
        bin().args(["bounds", "duffing", "--no-pe", "--out"]).arg(&dir).output().unwrap();
    assert_eq!(code(&out), 5);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn listed_examples_round_trip_through_the_parser() {
    let dir = scratch("list");

    let out = bin().args(["list-examples"]).output().unwrap();
    assert_eq!(code(&out), 0);
    let listing = String::from_utf8_lossy(&out.stdout).into_owned();
    for name in ["duffing", "duffing-fixed", "bioreactor", "lotka-volterra"] {
        assert!(listing.contains(name), "missing {name} in listing:\n{listing}");
    }

    let out = bin().args(["list-examples", "--emit"]).arg(&dir).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ["duffing", "duffing-fixed", "bioreactor", "lotka-volterra"] {
        let text = std::fs::read_to_string(dir.join(format!("{name}.ini"))).unwrap();
        let cfg = ExperimentConfig::parse(&text)
            .unwrap_or_else(|e| panic!("{name}.ini must re-parse: {e}"));
        assert_eq!(cfg.name, name);
        cfg.build().unwrap_or_else(|e| panic!("{name}.ini must build: {e}"));
    }

    let _ = std::fs::remove_dir_all(&dir);
}
