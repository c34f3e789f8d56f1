use std::fs;
use std::path::Path;

use rgito::config::Config;
use rgito::error::Error;
use rgito::io::{self, Calendar, MANIFEST_FILE};
use rgito::options::black_scholes_chain;
use rgito::pipeline::{run, RunOptions, Settings, Subcommand};
use rgito::simulator::simulate;

const SIM: &str = "seed = 5\nsim.n_days = 6\nsim.ticks_per_day = 120\nsim.euler_substeps_per_tick = 4\n";

fn opts(out: &Path) -> RunOptions {
    RunOptions {
        out: out.to_path_buf(),
        seed: None,
        check: false,
    }
}

fn cfg(text: &str, dir: &Path) -> Config {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    Config::load(&path).unwrap()
}

#[test]
fn simulated_panel_survives_export_and_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(SIM, dir.path());
    run(Subcommand::Simulate, &c, &opts(dir.path())).unwrap();
    let settings = Settings::from_config(&c, None).unwrap();
    let truth = simulate(&settings.sim).unwrap();

    let ticks = io::read_ticks(&dir.path().join("ticks.csv")).unwrap();
    assert_eq!(ticks.days.len(), 6);
    for (got, want) in ticks.days.iter().zip(&truth.ticks) {
        assert_eq!(got.fractions, want.fractions);
        assert_eq!(got.prices, want.prices);
    }
    let rows = io::read_truth(&dir.path().join("truth.csv")).unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.true_iv.to_bits(), truth.true_iv[i].to_bits());
        assert_eq!(r.true_jv.to_bits(), truth.true_jv[i].to_bits());
        assert_eq!(r.true_h.to_bits(), truth.true_h[i].to_bits());
        assert_eq!(r.nv.to_bits(), truth.nv[i].to_bits());
    }
    assert_eq!(ticks.dates, rows.iter().map(|r| r.date).collect::<Vec<_>>());

    let chains = io::read_options(&dir.path().join("options.csv"), &Calendar::default()).unwrap();
    assert_eq!(chains.dropped, 0);
    assert_eq!(chains.chains.len(), 6);
    for (i, chain) in chains.chains.values().enumerate() {
        let want = black_scholes_chain(truth.ticks[i].prices[0], truth.nv[i].max(1e-8), 1.0, 200, 6.0).unwrap();
        assert_eq!(chain.log_strikes, want.log_strikes);
        assert_eq!(chain.prices, want.prices);
        assert_eq!(chain.underlying_logprice, want.underlying_logprice);
        assert_eq!(chain.expiry_t, 1.0);
    }
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != MANIFEST_FILE && p.extension().is_none_or(|e| e != "cfg"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn manifest_without_timings(dir: &Path) -> String {
    fs::read_to_string(dir.join(MANIFEST_FILE))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("timing.") && !l.starts_with("input."))
        .collect::<Vec<_>>()
        .join("\n")
}

fn chain(dir: &Path) {
    let sim = dir.join("sim");
    let meas = dir.join("meas");
    let fit = dir.join("fit");
    let bt = dir.join("bt");
    run(Subcommand::Simulate, &cfg(SIM, dir), &opts(&sim)).unwrap();
    let measure = format!("{SIM}data.ticks = sim/ticks.csv\ndata.options = sim/options.csv\n");
    run(Subcommand::Measure, &cfg(&measure, dir), &opts(&meas)).unwrap();
    let daily = "seed = 5\ndata.daily = meas/daily.csv\nfit.n_starts = 2\n";
    run(Subcommand::Fit, &cfg(&format!("{daily}fit.mode = hlo\n"), dir), &opts(&fit)).unwrap();
    let backtest = format!("{daily}backtest.origins = 3, 4\nbacktest.predictors = HL, RV\n");
    run(Subcommand::Backtest, &cfg(&backtest, dir), &opts(&bt)).unwrap();
}

#[test]
fn identical_configs_give_byte_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    chain(a.path());
    chain(b.path());
    for sub in ["sim", "meas", "fit", "bt"] {
        let (x, y) = (a.path().join(sub), b.path().join(sub));
        let (ox, oy) = (outputs(&x), outputs(&y));
        assert!(!ox.is_empty());
        assert_eq!(ox.len(), oy.len(), "{sub}");
        for ((nx, bx), (ny, by)) in ox.iter().zip(&oy) {
            assert_eq!(nx, ny);
            assert!(bx == by, "{sub}/{nx} differs between runs");
        }
        assert_eq!(manifest_without_timings(&x), manifest_without_timings(&y));
    }
}

#[test]
fn every_csv_starts_with_a_manifest_reference_and_header() {
    let dir = tempfile::tempdir().unwrap();
    chain(dir.path());
    for sub in ["sim", "meas", "fit", "bt"] {
        let d = dir.path().join(sub);
        let manifest = io::read_key_values(&d.join(MANIFEST_FILE)).unwrap();
        for (name, bytes) in outputs(&d) {
            let text = String::from_utf8(bytes).unwrap();
            let mut lines = text.lines();
            let first = lines.next().unwrap();
            assert!(first.starts_with("# rgito ") && first.contains("manifest=run_manifest.txt"), "{sub}/{name}");
            assert!(first.contains(&format!("config_sha256={}", manifest["config_sha256"])));
            if name.ends_with(".csv") {
                let header = lines.next().unwrap();
                assert!(!header.is_empty() && header.split(',').all(|c| c.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')), "{sub}/{name}: {header}");
            }
            let path = d.join(&name);
            assert_eq!(manifest[&format!("output.{name}.sha256")], io::sha256_file(&path).unwrap());
        }
    }
}

#[test]
fn failed_run_leaves_no_staging_or_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let c = cfg("data.daily = missing.csv\n", dir.path());
    let err = run(Subcommand::Fit, &c, &opts(&out)).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("sim.n_dayz = 3\n", dir.path());
    let err = run(Subcommand::Simulate, &c, &opts(&dir.path().join("o"))).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("sim.n_dayz"), "{err}");
}

#[test]
fn check_verifies_hashes_and_reports_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(SIM, dir.path());
    let out = dir.path().join("sim");
    run(Subcommand::Simulate, &c, &opts(&out)).unwrap();
    let before = fs::read(out.join(MANIFEST_FILE)).unwrap();

    let ok = run(Subcommand::Simulate, &c, &RunOptions { check: true, ..opts(&out) }).unwrap();
    assert!(ok.checked);

    let err = run(
        Subcommand::Simulate,
        &c,
        &RunOptions {
            check: true,
            seed: Some(6),
            ..opts(&out)
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::CheckMismatch(_))), "{err}");
    assert_eq!(fs::read(out.join(MANIFEST_FILE)).unwrap(), before);
    assert!(!out.join(".staging-simulate").exists());

    let empty = dir.path().join("empty");
    let err = run(Subcommand::Simulate, &c, &RunOptions { check: true, ..opts(&empty) }).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn mc_study_writes_tables_in_grid_layout() {
    let dir = tempfile::tempdir().unwrap();
    let text = "seed = 3\nmc.ns = 40, 50\nmc.ms = 60, 90\nmc.replications = 2\nmc.forecast_days = 5\nfit.n_starts = 2\n";
    run(Subcommand::McStudy, &cfg(text, dir.path()), &opts(dir.path())).unwrap();
    let read = |name: &str| -> Vec<Vec<String>> {
        fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    };
    let t1 = read("table1.csv");
    assert_eq!(t1[0][..4], ["n", "m", "replications", "failures"]);
    let cells: Vec<(String, String)> = t1[1..].iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    assert_eq!(cells, [("40", "60"), ("40", "90"), ("50", "60"), ("50", "90")].map(|(a, b)| (a.into(), b.into())));
    let t2 = read("table2.csv");
    assert_eq!(t2[0][..3], ["n", "m", "estimator"]);
    assert_eq!(t2.len() - 1, 8);
    assert!(t2[1..].iter().all(|r| r[2] == "HL" || r[2] == "HLO"));
    let t3 = read("table3.csv");
    assert_eq!(t3[0], ["n", "m", "predictor", "mspe"]);
    assert_eq!(t3.len() - 1, 12);
    let reps = read("replications.csv");
    assert_eq!(reps.len() - 1, 8);
}
