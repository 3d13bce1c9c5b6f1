use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn landuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_landuse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = landuse(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

const SIM: &str = "seed = 5\noutput_dir = \"data\"\n[scenario]\ngrid_side = 10\nn_train = 150\n";

const FIT: &str = r#"seed = 2
output_dir = "fit"
[paths]
ratings = "data/ratings.csv"
grid = "data/grid.csv"
draws = "fit/draws.bin"
map_fit = "fit/map_fit.json"
[chain]
n_iter = 120
burn_in = 60
thin = 5
pilot_iter = 60
"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("sim.toml"), SIM).unwrap();
    fs::write(dir.path().join("fit.toml"), FIT).unwrap();
    ok(dir.path(), &["--config", "sim.toml", "simulate"]);
    dir
}

#[test]
fn unknown_flags_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = landuse(dir.path(), &["--bogus", "simulate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = landuse(dir.path(), &["--config", "absent.toml", "simulate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    fs::write(dir.path().join("bad.toml"), "seed = 1\nno_such_key = 2\n").unwrap();
    assert!(!landuse(dir.path(), &["--config", "bad.toml", "simulate"]).status.success());
}

#[test]
fn map_fit_round_trips_through_predict() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "fit.toml", "fit-map"]);
    ok(d, &["--config", "fit.toml", "--out", "pred", "predict", "--source", "map"]);
    let fitted = fs::read(d.join("fit/surface.csv")).unwrap();
    assert!(!fitted.is_empty());
    assert_eq!(fitted, fs::read(d.join("pred/surface.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("pred/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "predict");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn chain_outputs_feed_prediction_and_waic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "fit.toml", "fit-mcmc"]);
    ok(d, &["--config", "fit.toml", "--out", "pred", "predict", "--source", "mcmc"]);
    ok(d, &["--config", "fit.toml", "--out", "w", "waic"]);
    let rows = fs::read_to_string(d.join("pred/surface.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 100);
    let waic: serde_json::Value = serde_json::from_slice(&fs::read(d.join("w/waic.json")).unwrap()).unwrap();
    let (w, l, p) = (waic["waic"].as_f64().unwrap(), waic["lppd"].as_f64().unwrap(), waic["p_waic"].as_f64().unwrap());
    assert_eq!(w, -2.0 * (l - p));
    assert_eq!(waic["draws"], 12);

    // Text and binary draws decode to the same values.
    let csv = landuse_core::io::read_draws_csv(fs::File::open(d.join("fit/draws.csv")).unwrap()).unwrap();
    let bin = landuse_core::io::read_draws_bin(fs::File::open(d.join("fit/draws.bin")).unwrap()).unwrap();
    assert_eq!(csv, bin);
}

#[test]
fn reruns_are_byte_identical() {
    let a = setup();
    let b = setup();
    for dir in [a.path(), b.path()] {
        ok(dir, &["--config", "fit.toml", "fit-mcmc"]);
    }
    for f in ["data/ratings.csv", "data/grid.csv", "data/truth.csv", "fit/draws.csv", "fit/draws.bin", "fit/run_config.toml"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let out = landuse(a.path(), &["--config", "sim.toml", "--seed", "6", "--out", "other", "simulate"]);
    assert!(out.status.success());
    assert_ne!(fs::read(a.path().join("data/ratings.csv")).unwrap(), fs::read(a.path().join("other/ratings.csv")).unwrap());
}
