use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use platoon_core::config::Config;

fn platoon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_platoon")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn run_writes_trajectory_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "short.toml", "[scenario]\nduration = 8.0\n");
    let out = dir.path().join("run");
    let res = platoon(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--trust-horizon", "5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let rows = read_csv(&out.join("trajectory.csv"));
    assert_eq!(rows.len(), 4 * 80);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    for f in manifest["outputs"].as_array().unwrap() {
        assert!(out.join(f.as_str().unwrap()).exists(), "{f} missing");
    }
    let echoed = Config::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed.mpc.trust, 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap(), echoed.hash());
    assert_eq!(manifest["version"].as_str().unwrap(), env!("CARGO_PKG_VERSION"));
    assert!(manifest["timings"]["simulation"].as_f64().unwrap() > 0.0);

    // The echoed config reproduces the run exactly.
    let again = dir.path().join("again");
    let echoed_path = out.join("config.toml");
    let res = platoon(&["run", "--config", echoed_path.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(res.status.success());
    assert_eq!(
        std::fs::read(out.join("trajectory.csv")).unwrap(),
        std::fs::read(again.join("trajectory.csv")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = platoon(&["run", "--config", "/nonexistent/platoon.toml", "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));

    let tight = write(dir.path(), "tight.toml", "[scenario]\nspacing = 5.0\n");
    let res = platoon(&["run", "--config", tight.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("h_min"));

    let typo = write(dir.path(), "typo.toml", "[mpc]\nhorizon = 20\nhorizn = 3\n");
    let res = platoon(&["run", "--config", typo.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3"));

    let res = platoon(&["run", "--out", out.to_str().unwrap(), "--trust-horizon", "21"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // Nobody reaches a measurement line 10 km away.
    let far = write(dir.path(), "far.toml", "[scenario]\nduration = 3.0\nell = 10000.0\n");
    let out = dir.path().join("o");
    let res = platoon(&["sweep", "--config", far.to_str().unwrap(), "--out", out.to_str().unwrap(), "--trust-horizon", "0"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("never reaches"));
}

#[test]
fn sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let cache = dir.path().join("sets.cache");
    let res = platoon(&["sweep", "--out", out.to_str().unwrap(), "--cache", cache.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(cache.exists());
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with("F,t_L,t_last,vph\n"));
    let rows = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 5);
    let vph: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(vph.windows(2).all(|w| w[1] >= w[0]), "{vph:?}");

    let single = dir.path().join("single");
    let res = platoon(&[
        "sweep",
        "--out",
        single.to_str().unwrap(),
        "--trust-horizon",
        "10",
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let rows1 = read_csv(&single.join("sweep.csv"));
    assert_eq!(rows1.len(), 1);
    assert_eq!(rows1[0], rows[2]);
}

#[test]
fn empty_trust_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = platoon(&["sweep", "--out", out.to_str().unwrap(), "--trust-horizon", ""]);
    assert_eq!(res.status.code(), Some(2));
    let empty = write(dir.path(), "empty.toml", "[scenario]\ntrust_values = []\n");
    let res = platoon(&["sweep", "--config", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn safeset_exports() {
    let dir = tempfile::tempdir().unwrap();
    let sym = write(dir.path(), "sym.toml", "[mpc]\na_min = -3.218\na_follower = -3.218\n");
    let export = |v0: &str| {
        let path = dir.path().join(format!("set_{v0}.csv"));
        let res = platoon(&["safeset", "--config", sym.to_str().unwrap(), "--v0", v0, "--out", path.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        read_csv(&path)
            .into_iter()
            .map(|r| (r[0].parse::<f64>().unwrap(), r[1].parse::<f64>().unwrap()))
            .collect::<Vec<_>>()
    };
    let b = export("7.5");
    let near = |v: f64, h: f64| b.iter().any(|&(bv, bh)| (bv - v).abs() <= 0.01 && (bh - h).abs() <= 0.01);
    assert!(near(7.4014, 6.5) && near(7.7232, 7.2562));

    assert_eq!(export("0")[0], (0.0, 6.5));
    let top = export("30");
    assert_eq!(top.last().unwrap().0, 30.0);
    assert!(top.iter().all(|(v, h)| v.is_finite() && h.is_finite()));

    let res = platoon(&["safeset", "--v0", "31", "--out", dir.path().join("x.csv").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
}
