use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SIM: &str = "seed = 21\nsim.n_days = 30\nsim.ticks_per_day = 200\nsim.euler_substeps_per_tick = 2\n";

fn rgito(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rgito"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RGITO_")) {
        cmd.env_remove(k);
    }
    cmd.current_dir(dir).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn end_to_end_simulate_measure_fit_backtest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sim.cfg", SIM);
    write(d, "measure.cfg", "data.ticks = sim/ticks.csv\ndata.options = sim/options.csv\n");
    write(d, "fit.cfg", "data.daily = meas/daily.csv\nfit.mode = hlo\nfit.n_starts = 2\n");
    write(d, "bt.cfg", "data.daily = meas/daily.csv\nbacktest.origins = 24\nfit.n_starts = 2\n");
    for (sub, cfg, out) in [
        ("simulate", "sim.cfg", "sim"),
        ("measure", "measure.cfg", "meas"),
        ("fit", "fit.cfg", "fit"),
        ("backtest", "bt.cfg", "bt"),
    ] {
        let o = rgito(d, &[sub, "--config", cfg, "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("wrote"), "{sub}");
        assert!(d.join(out).join("run_manifest.txt").is_file(), "{sub}");
    }
    let daily = fs::read_to_string(d.join("meas/daily.csv")).unwrap();
    assert_eq!(daily.lines().count(), 2 + 30);
    let bt = fs::read_to_string(d.join("bt/mspe_report.csv")).unwrap();
    assert!(bt.lines().nth(1).unwrap().starts_with("origin,"), "{bt}");
}

#[test]
fn check_flag_exits_zero_on_match_and_two_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sim.cfg", SIM);
    assert_eq!(rgito(d, &["simulate", "--config", "sim.cfg", "--out", "o"]).status.code(), Some(0));
    let ok = rgito(d, &["simulate", "--config", "sim.cfg", "--out", "o", "--check"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("verified"));
    let bad = rgito(d, &["simulate", "--config", "sim.cfg", "--out", "o", "--check", "--seed", "22"]);
    assert_eq!(bad.status.code(), Some(2), "{}", stderr(&bad));
}

#[test]
fn hlo_without_options_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sim.cfg", SIM);
    write(d, "measure.cfg", "data.ticks = sim/ticks.csv\n");
    write(d, "fit.cfg", "data.daily = meas/daily.csv\nfit.mode = hlo\n");
    assert_eq!(rgito(d, &["simulate", "--config", "sim.cfg", "--out", "sim"]).status.code(), Some(0));
    assert_eq!(rgito(d, &["measure", "--config", "measure.cfg", "--out", "meas"]).status.code(), Some(0));
    let o = rgito(d, &["fit", "--config", "fit.cfg", "--out", "fit"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.options"), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "bad.cfg", "sim.n_days = -3\n");
    let o = rgito(d, &["simulate", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sim.n_days"), "{}", stderr(&o));

    let o = rgito(d, &["simulate", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(1));

    let o = rgito(d, &["explode", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn environment_overrides_config_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sim.cfg", SIM);
    let o = Command::new(env!("CARGO_BIN_EXE_rgito"))
        .current_dir(d)
        .env("RGITO_SIM__N_DAYS", "4")
        .args(["simulate", "--config", "sim.cfg", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let truth = fs::read_to_string(d.join("o/truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 2 + 4);
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!(
        "{SIM}omega1 = 5.816\nomega2 = 1.228\nalpha = 0.765\nbeta = 0.482\nnu = 0\ngamma = 0.225\nrho = -0.6\n\
         lambda = 0\nomega_L = 0.005\nzeta2 = 1e-6\n"
    );
    write(d, "sim.cfg", &cfg);
    let o = rgito(d, &["simulate", "--config", "sim.cfg", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
