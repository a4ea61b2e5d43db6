use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const TINY: &str = r#"{
  "datagen": {
    "num_classes": 3, "dim": 24, "norm": 1.0, "norm_grid": [0.0, 2.0],
    "ncr": 20.0, "ncr_grid": [1.0, 20.0],
    "train_counts": [12, 12, 12], "test_counts": [10, 10, 10]
  },
  "model": { "width": 6, "sigma0": 0.01 },
  "optimizer": { "batch": 8, "epochs": 3, "eta": 0.05 }
}"#;

fn dptail(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptail"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn runs_are_byte_identical_across_invocations_and_workers() {
    let tmp = tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    for (sub, file) in [("dynamics", "dynamics_dp.csv"), ("sweep", "sweep.csv"), ("longtail", "longtail.csv"), ("diag", "conditions.csv")] {
        let mut bodies = Vec::new();
        for (i, workers) in ["1", "4", "1"].into_iter().enumerate() {
            let out = tmp.path().join(format!("{sub}{i}"));
            let o = dptail(&[sub, "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--workers", workers]);
            assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
            let listed = String::from_utf8(o.stdout).unwrap();
            assert!(listed.lines().any(|l| l.ends_with(file)), "{sub} listed {listed}");
            bodies.push(read(&out, file));
        }
        assert_eq!(bodies[0], bodies[1], "{sub}: workers 1 vs 4");
        assert_eq!(bodies[0], bodies[2], "{sub}: repeat");
        assert!(bodies[0].starts_with("# dptail "));
    }
}

#[test]
fn flags_override_the_config() {
    let tmp = tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("o");
    let o = dptail(&["dynamics", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--seed", "7", "--mode", "clean"]);
    assert!(o.status.success());
    assert!(read(&out, "dynamics_clean.csv").lines().next().unwrap().ends_with("seed=7"));
    assert!(!out.join("dynamics_dp.csv").exists());
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let tmp = tempdir().unwrap();
    let o = dptail(&["dynamics", "--config", tmp.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing-file"));

    let cfg = write_config(tmp.path(), r#"{"optimiser": {"eta": 1}}"#);
    let o = dptail(&["dynamics", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[config]"));

    let cfg = write_config(tmp.path(), &TINY.replace("[12, 12, 12]", "[12, 11, 12]"));
    assert_eq!(dptail(&["dynamics", "--config", &cfg]).status.code(), Some(2));

    let o = dptail(&["mnist", "--config", &cfg, "--mnist-dir", tmp.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn render_turns_a_grid_csv_into_svg() {
    let tmp = tempdir().unwrap();
    let csv = tmp.path().join("grid.csv");
    fs::write(&csv, "norm,ncr,accuracy\n0,1,0.5\n0,10,0.75\n1,1,1\n1,10,\n").unwrap();
    let svg = tmp.path().join("grid.svg");
    let o = dptail(&["render", csv.to_str().unwrap(), svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"));
    assert!(text.lines().filter(|l| l.starts_with("<rect")).count() >= 4);
    assert!(text.contains("n/a"));

    let o = dptail(&["render", tmp.path().join("none.csv").to_str().unwrap(), svg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
