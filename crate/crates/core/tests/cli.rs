//! End-to-end runs of the `geosae` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "regions = \"regions.geojson\"\nsurvey = \"survey.csv\"\ncensus = \"census.csv\"\n\
                     grid = \"grid.csv\"\nscenario_nx = 4\nscenario_ny = 4\nscenario_grid_per_cell = 2\n\
                     bootstrap_b = 20\nlr_b = 19\nn_sim_points = 60\nq = 8\n";

fn geosae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosae"))
        .current_dir(dir)
        .args(["--config", "config.toml", "--seed", "5"])
        .args(args)
        .output()
        .unwrap()
}

fn scenario(dir: &Path) {
    std::fs::write(dir.join("config.toml"), SMALL).unwrap();
    let out = geosae(dir, &["--out", ".", "simulate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_then_fit_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    scenario(dir.path());
    for f in ["regions.geojson", "survey.csv", "census.csv", "grid.csv", "truth.csv", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let out = geosae(dir.path(), &["--out", "run", "fit"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["direct.csv", "variogram.json", "block_means.csv", "fit_sar.json", "predictions_sar.csv"] {
        assert!(dir.path().join("run").join(f).is_file(), "missing {f}");
    }
    let fit: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("run/fit_sar.json")).unwrap()).unwrap();
    assert_eq!(fit["provenance"]["master_seed"], 5);
    let preds = std::fs::read_to_string(dir.path().join("run/predictions_sar.csv")).unwrap();
    assert!(preds.starts_with('#'));
}

#[test]
fn missing_input_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    scenario(dir.path());
    std::fs::remove_file(dir.path().join("census.csv")).unwrap();
    let out = geosae(dir.path(), &["--out", "run", "direct"]);
    assert!(!out.status.success());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn grid_outside_buffer_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    scenario(dir.path());
    let grid = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let moved: String = grid
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            match f[0].parse::<f64>() {
                Ok(x) => format!("{},{},{}\n", x + 1e6, f[1], f[2]),
                Err(_) => format!("{l}\n"),
            }
        })
        .collect();
    std::fs::write(dir.path().join("grid.csv"), moved).unwrap();
    let out = geosae(dir.path(), &["--out", "run", "upscale"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no usable grid points"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.toml"), "bootstrap_bb = 3\n").unwrap();
    let out = geosae(dir.path(), &["simulate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bootstrap_bb"));
}
