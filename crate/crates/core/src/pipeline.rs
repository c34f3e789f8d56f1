//! Batch subcommands: simulate, measure, fit, backtest and mc-study.
//!
//! Outputs are written to a staging directory inside the output directory
//! and moved into place only when every stage succeeds. Each run writes
//! `run_manifest.txt` with the effective configuration, input fingerprints,
//! output hashes and stage timings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{Config, ParamSet};
use crate::error::{Error, Result};
use crate::forecast::{rolling_backtest, BacktestConfig, Predictor, Truth};
use crate::io::{self, Calendar, CsvOut, DailyRow, TickWriter, MANIFEST_FILE};
use crate::mc::{run_study, McConfig};
use crate::model::{derive_garch_params, reference_design, JumpParams};
use crate::optim::NelderMeadConfig;
use crate::options::{
    black_scholes_chain, nv_for_day, selected_normalization, NvConfig, NvNormalization, OptionChain,
};
use crate::qmle::{fit, param_names, EstimationInput, FitConfig, FitResult, Mode, ParamBoxes};
use crate::realized::{estimate_jump_params, measure_day, JumpDetectConfig, JumpDetection, MeasureConfig};
use crate::simulator::{default_substeps, SimConfig, Simulator};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Measure,
    Fit,
    Backtest,
    McStudy,
}

impl Subcommand {
    pub const ALL: [Subcommand; 5] = [
        Self::Simulate,
        Self::Measure,
        Self::Fit,
        Self::Backtest,
        Self::McStudy,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subcommand '{s}'")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Measure => "measure",
            Self::Fit => "fit",
            Self::Backtest => "backtest",
            Self::McStudy => "mc-study",
        }
    }
}

/// Input file locations (`data.*`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub ticks: Option<PathBuf>,
    pub options: Option<PathBuf>,
    pub daily: Option<PathBuf>,
    pub jump_params: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
}

/// Synthetic option quotes written by `simulate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptionSettings {
    pub enabled: bool,
    pub strikes: usize,
    /// Half-width of the strike grid in standard deviations.
    pub width: f64,
    /// Relative standard deviation of multiplicative price noise.
    pub price_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestSettings {
    pub origins: Option<Vec<usize>>,
    pub forecast_days: usize,
    pub refit_every: usize,
    pub predictors: Option<Vec<Predictor>>,
    pub truth: Truth,
    pub warm_start: bool,
    pub ewma_lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSettings {
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub replications: usize,
    pub estimate_hl: bool,
    pub estimate_hlo: bool,
    pub standard_errors: bool,
    pub backtest: bool,
    pub forecast_days: usize,
}

/// Typed view of a [`Config`] with every default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub params: ParamSet,
    pub sim: SimConfig,
    pub sim_options: SimOptionSettings,
    pub start_date: NaiveDate,
    pub data: DataPaths,
    pub measure: MeasureConfig,
    pub nv: NvConfig<f64>,
    pub mode: Mode,
    pub fit: FitConfig,
    pub backtest: BacktestSettings,
    pub mc: McSettings,
}

fn get_box(cfg: &Config, name: &str, default: (f64, f64)) -> Result<(f64, f64)> {
    match cfg.get_list::<f64>(&format!("fit.box.{name}"))? {
        None => Ok(default),
        Some(v) if v.len() == 2 => Ok((v[0], v[1])),
        Some(_) => Err(Error::Config(format!("fit.box.{name}: expected `lo, hi`"))),
    }
}

impl Settings {
    /// Reads every known key; unknown keys are an error. `seed_override`
    /// replaces the configured seed.
    pub fn from_config(cfg: &Config, seed_override: Option<u64>) -> Result<Self> {
        let configured_seed = cfg.get::<u64>("seed")?;
        let seed = seed_override.or(configured_seed).unwrap_or(0);
        let params = ParamSet::from_config(cfg)?;
        let design = reference_design();

        let n_days = cfg.get_or("sim.n_days", 125usize)?;
        let m = cfg.get_or("sim.ticks_per_day", 390usize)?;
        let sim = SimConfig {
            structural: params.structural.unwrap_or(design.structural),
            jumps: params.jumps.unwrap_or(design.jumps),
            link: params.link.unwrap_or(design.link),
            n_days,
            ticks_per_day: m,
            noise_sd: cfg.get_or("sim.noise_sd", design.noise_sd)?,
            x0: cfg.get_or("sim.x0", design.x0)?,
            sigma0_sq: cfg.get_or("sim.sigma0_sq", design.sigma0_sq)?,
            seed,
            euler_substeps_per_tick: cfg.get_or("sim.euler_substeps_per_tick", default_substeps(m))?,
        };
        let sim_options = SimOptionSettings {
            enabled: cfg.get_bool("sim.options")?.unwrap_or(true),
            strikes: cfg.get_or("sim.option_strikes", 200usize)?,
            width: cfg.get_or("sim.option_width", 6.0)?,
            price_noise: cfg.get_or("sim.option_price_noise", 0.0)?,
        };
        let start_date = match cfg.raw("sim.start_date") {
            None => io::simulation_start_date(),
            Some(s) => io::parse_date(s)
                .ok_or_else(|| Error::Config(format!("sim.start_date: bad date `{s}`")))?,
        };
        let data = DataPaths {
            ticks: cfg.get_path("data.ticks"),
            options: cfg.get_path("data.options"),
            daily: cfg.get_path("data.daily"),
            jump_params: cfg.get_path("data.jump_params"),
            truth: cfg.get_path("data.truth"),
            holidays: cfg.get_path("data.holidays"),
        };
        let jd = JumpDetectConfig::default();
        let measure = MeasureConfig {
            jump: JumpDetectConfig {
                c: cfg.get_or("measure.c", jd.c)?,
                exponent: cfg.get_or("measure.exponent", jd.exponent)?,
                block: cfg.get_or("measure.block", jd.block)?,
                segments: cfg.get_or("measure.segments", jd.segments)?,
            },
            msrv_scales: cfg.get("measure.msrv_scales")?,
        };
        let nv = NvConfig {
            u: cfg.get("measure.nv_u")?,
            normalization: cfg
                .raw("measure.nv_normalization")
                .map(NvNormalization::parse)
                .transpose()?,
        };
        let mode = cfg.raw("fit.mode").map(Mode::parse).transpose()?.unwrap_or(Mode::Hl);
        let b = ParamBoxes::default();
        let boxes = ParamBoxes {
            omega_g: get_box(cfg, "omega_g", b.omega_g)?,
            alpha_g: get_box(cfg, "alpha_g", b.alpha_g)?,
            beta_g: get_box(cfg, "beta_g", b.beta_g)?,
            gamma: get_box(cfg, "gamma", b.gamma)?,
            a: get_box(cfg, "a", b.a)?,
            b: get_box(cfg, "b", b.b)?,
            sigma_e2: get_box(cfg, "sigma_e2", b.sigma_e2)?,
            persistence_cap: cfg.get_or("fit.persistence_cap", b.persistence_cap)?,
        };
        let fd = FitConfig::default();
        let nm = NelderMeadConfig::default();
        let mut starts = Vec::new();
        if let Some(theta) = params.theta {
            let mut s = theta.to_array().to_vec();
            if let Some(l) = params.link {
                s.extend([l.a, l.b, l.sigma_e2]);
            }
            starts.push(s);
        }
        let fit = FitConfig {
            boxes,
            n_starts: cfg.get_or("fit.n_starts", fd.n_starts)?,
            jitter_sd: cfg.get_or("fit.jitter_sd", fd.jitter_sd)?,
            seed,
            optimizer: NelderMeadConfig {
                tol: cfg.get_or("fit.tol", nm.tol)?,
                max_evals: cfg.get_or("fit.max_evals", nm.max_evals)?,
                initial_step: cfg.get_or("fit.initial_step", nm.initial_step)?,
                restarts: cfg.get_or("fit.restarts", nm.restarts)?,
            },
            starts,
            agreement_tol: cfg.get_or("fit.agreement_tol", fd.agreement_tol)?,
            compute_se: cfg.get_bool("fit.compute_se")?.unwrap_or(fd.compute_se),
        };
        let backtest = BacktestSettings {
            origins: cfg.get_list("backtest.origins")?,
            forecast_days: cfg.get_or("backtest.forecast_days", 20usize)?,
            refit_every: cfg.get_or("backtest.refit_every", 1usize)?,
            predictors: cfg
                .get_list::<String>("backtest.predictors")?
                .map(|v| v.iter().map(|s| Predictor::parse(s)).collect::<Result<Vec<_>>>())
                .transpose()?,
            truth: cfg
                .raw("backtest.truth")
                .map(Truth::parse)
                .transpose()?
                .unwrap_or(Truth::Proxy),
            warm_start: cfg.get_bool("backtest.warm_start")?.unwrap_or(true),
            ewma_lambda: cfg.get_or("backtest.ewma_lambda", 0.94)?,
        };
        let mc = McSettings {
            ns: cfg.get_list("mc.ns")?.unwrap_or_else(|| vec![125, 250, 500, 1000]),
            ms: cfg.get_list("mc.ms")?.unwrap_or_else(|| vec![390, 780, 2340, 23400]),
            replications: cfg.get_or("mc.replications", 100usize)?,
            estimate_hl: cfg.get_bool("mc.estimate_hl")?.unwrap_or(true),
            estimate_hlo: cfg.get_bool("mc.estimate_hlo")?.unwrap_or(true),
            standard_errors: cfg.get_bool("mc.standard_errors")?.unwrap_or(false),
            backtest: cfg.get_bool("mc.backtest")?.unwrap_or(true),
            forecast_days: cfg.get_or("mc.forecast_days", 20usize)?,
        };
        cfg.reject_unused()?;
        let settings = Self {
            seed,
            params,
            sim,
            sim_options,
            start_date,
            data,
            measure,
            nv,
            mode,
            fit,
            backtest,
            mc,
        };
        settings.fit.boxes.validate()?;
        Ok(settings)
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            ns: self.mc.ns.clone(),
            ms: self.mc.ms.clone(),
            replications: self.mc.replications,
            base_seed: self.seed,
            design: self.sim.clone(),
            measure: self.measure,
            fit: FitConfig {
                compute_se: self.mc.standard_errors,
                ..self.fit.clone()
            },
            estimate_hl: self.mc.estimate_hl,
            estimate_hlo: self.mc.estimate_hlo,
            standard_errors: self.mc.standard_errors,
            backtest: self.mc.backtest,
            forecast_days: self.mc.forecast_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Recompute into a scratch directory and compare output hashes with
    /// the manifest already in `out`, leaving `out` untouched.
    pub check: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    /// `(file name, sha256)` of every output except the manifest.
    pub outputs: Vec<(String, String)>,
    pub checked: bool,
}

/// Artifacts accumulated while a run executes.
struct Run {
    dir: PathBuf,
    reference: String,
    manifest: BTreeMap<String, String>,
    outputs: Vec<String>,
    timings: Vec<(&'static str, f64)>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn note(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.insert(key.into(), value.to_string());
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(name));
        self.timings.push((name, start.elapsed().as_secs_f64()));
        out
    }

    fn input(&mut self, label: &str, path: &Path, rows: usize, dates: Option<(NaiveDate, NaiveDate)>) -> Result<()> {
        self.note(format!("input.{label}.path"), path.display());
        self.note(format!("input.{label}.rows"), rows);
        self.note(format!("input.{label}.sha256"), io::sha256_file(path)?);
        if let Some((a, b)) = dates {
            self.note(format!("input.{label}.first_date"), io::format_date(a));
            self.note(format!("input.{label}.last_date"), io::format_date(b));
        }
        Ok(())
    }
}

/// Executes a subcommand and writes its artifacts under `opts.out`.
pub fn run(sub: Subcommand, cfg: &Config, opts: &RunOptions) -> Result<RunSummary> {
    let settings = Settings::from_config(cfg, opts.seed).map_err(|e| e.in_stage("config"))?;
    let mut echo = cfg.clone();
    echo.set("seed", settings.seed);
    let config_text = echo.to_text();
    let config_hash = io::sha256_hex(config_text.as_bytes());

    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e).in_stage("output"))?;
    let staging = opts.out.join(format!(".staging-{}", sub.name()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e).in_stage("output"))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e).in_stage("output"))?;

    let mut run = Run {
        dir: staging.clone(),
        reference: format!(
            "rgito {VERSION} {} manifest={MANIFEST_FILE} config_sha256={config_hash}",
            sub.name()
        ),
        manifest: BTreeMap::new(),
        outputs: Vec::new(),
        timings: Vec::new(),
    };
    let result = execute(sub, &settings, &mut run).and_then(|_| {
        let mut hashes = Vec::new();
        for name in &run.outputs {
            hashes.push((name.clone(), io::sha256_file(&run.dir.join(name))?));
        }
        Ok(hashes)
    });
    let hashes = match result {
        Ok(h) => h,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            return Err(e);
        }
    };

    if opts.check {
        let outcome = check_against(&opts.out, &hashes);
        let _ = std::fs::remove_dir_all(&staging);
        outcome?;
        return Ok(RunSummary {
            out: opts.out.clone(),
            outputs: hashes,
            checked: true,
        });
    }

    let manifest = render_manifest(sub, &settings, &echo, &config_hash, &run, &hashes);
    let finish = || -> Result<()> {
        let mpath = staging.join(MANIFEST_FILE);
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        for name in run.outputs.iter().map(String::as_str).chain([MANIFEST_FILE]) {
            let dest = opts.out.join(name);
            std::fs::rename(staging.join(name), &dest).map_err(|e| Error::io(&dest, e))?;
        }
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))
    };
    if let Err(e) = finish() {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e.in_stage("output"));
    }
    Ok(RunSummary {
        out: opts.out.clone(),
        outputs: hashes,
        checked: false,
    })
}

fn check_against(out: &Path, hashes: &[(String, String)]) -> Result<()> {
    let mpath = out.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::MissingInput(format!(
            "{}: no manifest to check against",
            mpath.display()
        ))
        .in_stage("check"));
    }
    let previous = io::read_key_values(&mpath).map_err(|e| e.in_stage("check"))?;
    let mut bad = Vec::new();
    for (name, h) in hashes {
        match previous.get(&format!("output.{name}.sha256")) {
            Some(p) if p == h => {}
            Some(_) => bad.push(format!("{name} differs")),
            None => bad.push(format!("{name} not in manifest")),
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckMismatch(bad.join("; ")).in_stage("check"))
    }
}

fn render_manifest(
    sub: Subcommand,
    settings: &Settings,
    echo: &Config,
    config_hash: &str,
    run: &Run,
    hashes: &[(String, String)],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# rgito run manifest");
    let _ = writeln!(s, "tool = rgito");
    let _ = writeln!(s, "version = {VERSION}");
    let _ = writeln!(s, "subcommand = {}", sub.name());
    let _ = writeln!(s, "seed = {}", settings.seed);
    let _ = writeln!(s, "config_sha256 = {config_hash}");
    match selected_normalization() {
        Ok(cal) => {
            let _ = writeln!(s, "nv_normalization = {}", cal.selected);
            for (n, est, err) in &cal.candidates {
                let _ = writeln!(s, "nv_calibration.{n} = {est} (relative error {err:.3e})");
            }
        }
        Err(e) => {
            let _ = writeln!(s, "nv_normalization = unavailable ({e})");
        }
    }
    if let Some(n) = settings.nv.normalization {
        let _ = writeln!(s, "nv_normalization_override = {n}");
    }
    for (k, v) in echo.entries() {
        let _ = writeln!(s, "config.{k} = {v}");
    }
    for (k, v) in &run.manifest {
        let _ = writeln!(s, "{k} = {v}");
    }
    for (name, h) in hashes {
        let _ = writeln!(s, "output.{name}.sha256 = {h}");
    }
    for (stage, secs) in &run.timings {
        let _ = writeln!(s, "timing.{stage}_seconds = {secs:.3}");
    }
    s
}

fn execute(sub: Subcommand, s: &Settings, run: &mut Run) -> Result<()> {
    match sub {
        Subcommand::Simulate => simulate_cmd(s, run),
        Subcommand::Measure => measure_cmd(s, run),
        Subcommand::Fit => fit_cmd(s, run),
        Subcommand::Backtest => backtest_cmd(s, run),
        Subcommand::McStudy => mc_cmd(s, run),
    }
}

fn calendar(s: &Settings, run: &mut Run) -> Result<Calendar> {
    match &s.data.holidays {
        None => Ok(Calendar::default()),
        Some(p) => {
            let cal = Calendar::load(p)?;
            run.input("holidays", p, cal.holidays.len(), None)?;
            Ok(cal)
        }
    }
}

fn simulate_cmd(s: &Settings, run: &mut Run) -> Result<()> {
    let cal = run.stage("calendar", |run| calendar(s, run))?;
    run.stage("simulate", |run| {
        s.sim.validate()?;
        let dates = cal.business_days(s.start_date, s.sim.n_days);
        let reference = run.reference.clone();
        let mut ticks = TickWriter::create(&run.path("ticks.csv"), &reference)?;
        let mut truth = CsvOut::create(&run.path("truth.csv"), &reference, &io::TRUTH_COLUMNS)?;
        let mut jumps = CsvOut::create(&run.path("jumps.csv"), &reference, &["date", "time", "tick_interval", "size"])?;
        let mut options = if s.sim_options.enabled {
            Some(CsvOut::create(&run.path("options.csv"), &reference, &io::OPTION_COLUMNS)?)
        } else {
            None
        };
        let mut noise_rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x6f70_7469_6f6e_7321);
        let m = s.sim.ticks_per_day;
        let mut floored = 0;
        for (day, date) in Simulator::new(s.sim.clone())?.zip(&dates) {
            let day = day?;
            floored += day.floored_substeps;
            ticks.day(*date, &day.ticks)?;
            let d = io::format_date(*date);
            truth.row([
                d.clone(),
                day.true_iv.to_string(),
                day.true_jv.to_string(),
                day.true_h.to_string(),
                day.nv.to_string(),
                day.jumps.len().to_string(),
            ])?;
            for j in &day.jumps {
                jumps.row([
                    d.clone(),
                    j.time.to_string(),
                    j.tick_interval(m).to_string(),
                    j.size.to_string(),
                ])?;
            }
            if let Some(w) = options.as_mut() {
                let o = &s.sim_options;
                let mut chain =
                    black_scholes_chain(day.ticks.prices[0], day.nv.max(1e-8), 1.0, o.strikes, o.width)?;
                if o.price_noise > 0.0 {
                    for p in chain.prices.iter_mut() {
                        let z: f64 = noise_rng.sample(StandardNormal);
                        *p = (*p * (1.0 + o.price_noise * z)).max(0.0);
                    }
                }
                io::write_option_chain(w, *date, cal.next_business_day(*date), &chain)?;
            }
        }
        run.note("rows.ticks", ticks.finish()?);
        run.note("rows.truth", truth.finish()?);
        run.note("rows.jumps", jumps.finish()?);
        if let Some(w) = options {
            run.note("rows.options", w.finish()?);
        }
        run.note("sim.floored_substeps", floored);
        run.note("sim.substeps_per_day", s.sim.substeps_per_day());
        let theta = derive_garch_params(&s.sim.structural, &s.sim.jumps)?;
        let params = ParamSet {
            structural: Some(s.sim.structural),
            jumps: Some(s.sim.jumps),
            theta: Some(theta),
            link: Some(s.sim.link),
        };
        let path = run.path("params.txt");
        std::fs::write(&path, format!("# {}\n{}", run.reference, params.to_text())).map_err(|e| Error::io(&path, e))
    })
}

/// Daily measures paired with their dates.
struct Measured {
    rows: Vec<DailyRow>,
    jump_params: JumpParams<f64>,
    detections: Vec<Vec<JumpDetection<f64>>>,
}

fn measure_ticks(s: &Settings, run: &mut Run) -> Result<Measured> {
    let cal = run.stage("calendar", |run| calendar(s, run))?;
    let ticks_path = s
        .data
        .ticks
        .clone()
        .ok_or_else(|| Error::MissingInput("data.ticks is not set".into()).in_stage("ingest"))?;
    let (ticks, options) = run.stage("ingest", |run| {
        let ticks = io::read_ticks(&ticks_path)?;
        let rows: usize = ticks.days.iter().map(|d| d.prices.len()).sum();
        let span = (ticks.dates[0], *ticks.dates.last().expect("non-empty"));
        run.input("ticks", &ticks_path, rows, Some(span))?;
        let options = match &s.data.options {
            None => None,
            Some(p) => {
                let o = io::read_options(p, &cal)?;
                let rows = o.chains.values().map(OptionChain::len).sum();
                let first = *o.chains.keys().next().expect("non-empty");
                let last = *o.chains.keys().next_back().expect("non-empty");
                run.input("options", p, rows, Some((first, last)))?;
                run.note("warning.option_dates_dropped", o.dropped);
                Some(o)
            }
        };
        Ok((ticks, options))
    })?;
    run.stage("measure", |run| {
        let measured: Vec<_> = ticks
            .days
            .par_iter()
            .map(|d| measure_day(d, &s.measure))
            .collect::<Result<Vec<_>>>()?;
        let mut nv_missing = 0;
        let mut rows = Vec::with_capacity(measured.len());
        let mut detections = Vec::with_capacity(measured.len());
        for ((date, day), (meas, det)) in ticks.dates.iter().zip(&ticks.days).zip(measured) {
            let nv = options.as_ref().and_then(|o| {
                let mut chain = o.chains.get(date)?.clone();
                chain.quote_day = day.day_index;
                nv_for_day(&chain, &s.nv).ok()
            });
            if options.is_some() && nv.is_none() {
                nv_missing += 1;
            }
            rows.push(DailyRow {
                date: *date,
                rv: meas.rv,
                jv: meas.jv,
                nv,
                jump_count: meas.jump_count,
                noise_var: meas.noise_var,
            });
            detections.push(det);
        }
        if options.is_some() {
            run.note("warning.nv_missing_days", nv_missing);
        }
        let jump_params = estimate_jump_params(&detections);
        Ok(Measured {
            rows,
            jump_params,
            detections,
        })
    })
}

fn jump_params_text(j: &JumpParams<f64>) -> String {
    ParamSet {
        jumps: Some(*j),
        ..Default::default()
    }
    .to_text()
}

fn measure_cmd(s: &Settings, run: &mut Run) -> Result<()> {
    let measured = measure_ticks(s, run)?;
    run.stage("write", |run| {
        let reference = run.reference.clone();
        let n = io::write_daily(&run.path("daily.csv"), &reference, &measured.rows)?;
        run.note("rows.daily", n);
        let mut w = CsvOut::create(&run.path("detections.csv"), &reference, &["date", "interval", "size"])?;
        for (row, det) in measured.rows.iter().zip(&measured.detections) {
            let d = io::format_date(row.date);
            for j in det {
                w.row([d.clone(), j.interval.to_string(), j.size.to_string()])?;
            }
        }
        run.note("rows.detections", w.finish()?);
        let path = run.path("jump_params.txt");
        std::fs::write(&path, format!("# {}\n{}", reference, jump_params_text(&measured.jump_params)))
            .map_err(|e| Error::io(&path, e))
    })
}

/// Estimation input and dates, from a daily file or measured from ticks.
fn load_input(s: &Settings, run: &mut Run) -> Result<(Vec<NaiveDate>, EstimationInput<f64>)> {
    let (rows, jump_params) = match &s.data.daily {
        Some(path) => run.stage("ingest", |run| {
            let rows = io::read_daily(path)?;
            run.input("daily", path, rows.len(), Some((rows[0].date, rows[rows.len() - 1].date)))?;
            let jp_path = s.data.jump_params.clone().unwrap_or_else(|| {
                path.parent().unwrap_or(Path::new(".")).join("jump_params.txt")
            });
            if !jp_path.exists() {
                return Err(Error::MissingInput(format!(
                    "jump parameters not found at {} (set data.jump_params)",
                    jp_path.display()
                )));
            }
            let text = std::fs::read_to_string(&jp_path).map_err(|e| Error::io(&jp_path, e))?;
            let jumps = ParamSet::parse(&text)?
                .jumps
                .ok_or_else(|| Error::MissingInput(format!("{}: no jump parameters", jp_path.display())))?;
            run.input("jump_params", &jp_path, 1, None)?;
            Ok((rows, jumps))
        })?,
        None => {
            if s.data.ticks.is_none() {
                return Err(Error::MissingInput("set data.daily or data.ticks".into()).in_stage("ingest"));
            }
            let m = measure_ticks(s, run)?;
            (m.rows, m.jump_params)
        }
    };
    let dates = rows.iter().map(|r| r.date).collect();
    let has_nv = rows.iter().any(|r| r.nv.is_some());
    let input = EstimationInput::new(
        rows.iter().map(|r| r.rv).collect(),
        rows.iter().map(|r| r.jv).collect(),
        has_nv.then(|| rows.iter().map(|r| r.nv).collect()),
        jump_params,
    )
    .map_err(|e| e.in_stage("ingest"))?;
    run.note("data.days", input.n());
    run.note("data.nv_availability", input.nv_availability());
    Ok((dates, input))
}

fn refuse_hlo_without_options(input: &EstimationInput<f64>, stage: &'static str) -> Result<()> {
    if input.nv.is_none() {
        return Err(Error::MissingInput(
            "QMLE-HLO needs option-implied variances: set data.options (or a daily file with an nv column)".into(),
        )
        .in_stage(stage));
    }
    Ok(())
}

fn fit_report(r: &FitResult, input: &EstimationInput<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode = {}", r.mode.name());
    let _ = writeln!(s, "days = {}", input.n());
    let _ = writeln!(s, "loglik = {}", r.loglik);
    let _ = writeln!(s, "converged = {}", r.converged);
    let _ = writeln!(s, "n_evals = {}", r.n_evals);
    let _ = writeln!(s, "starts_used = {}", r.starts_used);
    let _ = writeln!(s, "start_gap = {}", r.start_gap);
    for (name, v) in param_names(r.mode).iter().zip(r.params()) {
        let _ = writeln!(s, "{name} = {v}");
    }
    if let Some(sw) = &r.sandwich {
        for (name, v) in param_names(r.mode).iter().zip(&sw.std_errors) {
            let _ = writeln!(s, "se.{name} = {v}");
        }
        let _ = writeln!(s, "pseudo_inverse = {}", sw.pseudo_inverse);
    }
    let j = &input.jump_params;
    let _ = writeln!(s, "jumps.lambda = {}", j.lambda);
    let _ = writeln!(s, "jumps.omega_L = {}", j.omega_l);
    let _ = writeln!(s, "jumps.zeta2 = {}", j.zeta2);
    s
}

fn fit_cmd(s: &Settings, run: &mut Run) -> Result<()> {
    let (_, input) = load_input(s, run)?;
    if s.mode == Mode::Hlo {
        refuse_hlo_without_options(&input, "fit")?;
    }
    let result = run.stage("fit", |_| fit(&input, s.mode, &s.fit))?;
    run.stage("write", |run| {
        let path = run.path("fit_report.txt");
        std::fs::write(&path, format!("# {}\n{}", run.reference, fit_report(&result, &input)))
            .map_err(|e| Error::io(&path, e))?;
        if let Some(sw) = &result.sandwich {
            let names = param_names(result.mode);
            let header: Vec<&str> = std::iter::once("param").chain(names.iter().copied()).collect();
            let reference = run.reference.clone();
            let mut w = CsvOut::create(&run.path("covariance.csv"), &reference, &header)?;
            for (i, name) in names.iter().enumerate() {
                let row: Vec<String> = std::iter::once(name.to_string())
                    .chain((0..names.len()).map(|j| sw.covariance[(i, j)].to_string()))
                    .collect();
                w.row(row)?;
            }
            w.finish()?;
        }
        Ok(())
    })
}

fn backtest_cmd(s: &Settings, run: &mut Run) -> Result<()> {
    let (dates, input) = load_input(s, run)?;
    let n = input.n();
    let predictors = match &s.backtest.predictors {
        Some(p) => p.clone(),
        None => {
            let mut p = vec![Predictor::Model(Mode::Hl)];
            if input.nv.is_some() {
                p.push(Predictor::Model(Mode::Hlo));
            }
            p.push(Predictor::RvBaseline);
            p
        }
    };
    if predictors.contains(&Predictor::Model(Mode::Hlo)) {
        refuse_hlo_without_options(&input, "backtest")?;
    }
    let true_h = match s.backtest.truth {
        Truth::Proxy => None,
        Truth::Oracle => Some(run.stage("ingest", |run| {
            let path = s.data.truth.clone().ok_or_else(|| {
                Error::MissingInput("backtest.truth = oracle needs data.truth (simulation truth.csv)".into())
            })?;
            let rows = io::read_truth(&path)?;
            run.input("truth", &path, rows.len(), None)?;
            let by_date: BTreeMap<NaiveDate, f64> = rows.iter().map(|r| (r.date, r.true_h)).collect();
            dates
                .iter()
                .map(|d| {
                    by_date.get(d).copied().ok_or_else(|| {
                        Error::InvalidInput(format!("truth file has no row for {}", io::format_date(*d)))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })?),
    };
    let cfg = BacktestConfig {
        origins: s
            .backtest
            .origins
            .clone()
            .unwrap_or_else(|| vec![n.saturating_sub(s.backtest.forecast_days)]),
        refit_every: s.backtest.refit_every,
        predictors,
        truth: s.backtest.truth,
        fit: FitConfig {
            compute_se: false,
            ..s.fit.clone()
        },
        warm_start: s.backtest.warm_start,
        ewma_lambda: s.backtest.ewma_lambda,
    };
    let report = run.stage("backtest", |_| rolling_backtest(&cfg, &input, true_h.as_deref()))?;
    run.stage("write", |run| {
        let reference = run.reference.clone();
        let mut w = CsvOut::create(
            &run.path("mspe_report.csv"),
            &reference,
            &["origin", "mode", "mspe", "scored", "excluded", "fallbacks", "truth"],
        )?;
        for r in &report.rows {
            w.row([
                r.origin.to_string(),
                r.predictor.name().to_string(),
                r.mspe.to_string(),
                r.scored.to_string(),
                r.excluded.to_string(),
                r.fallbacks.to_string(),
                report.truth.name().to_string(),
            ])?;
        }
        run.note("rows.mspe_report", w.finish()?);
        let mut w = CsvOut::create(
            &run.path("predictions.csv"),
            &reference,
            &["origin", "day", "date", "mode", "h_hat", "actual", "fallback", "excluded"],
        )?;
        for p in &report.predictions {
            w.row([
                p.origin.to_string(),
                p.day.to_string(),
                io::format_date(dates[p.day - 1]),
                p.predictor.name().to_string(),
                p.predicted.to_string(),
                p.actual.to_string(),
                p.fallback.to_string(),
                p.excluded.to_string(),
            ])?;
        }
        run.note("rows.predictions", w.finish()?);
        Ok(())
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    io::opt_field(v.filter(|x| x.is_finite()))
}

fn mc_cmd(s: &Settings, run: &mut Run) -> Result<()> {
    let cfg = s.mc_config();
    let study = run.stage("mc", |_| run_study(&cfg))?;
    run.stage("write", |run| {
        let reference = run.reference.clone();
        let mut t1 = CsvOut::create(
            &run.path("table1.csv"),
            &reference,
            &[
                "n",
                "m",
                "replications",
                "failures",
                "mean_lambda_hat",
                "mse_lambda",
                "mse_omega_L",
                "rv_rmse",
                "jump_recall",
                "spurious_per_day",
            ],
        )?;
        let mut t2 = CsvOut::create(
            &run.path("table2.csv"),
            &reference,
            &[
                "n",
                "m",
                "estimator",
                "mse_omega_g",
                "mse_alpha_g",
                "mse_beta_g",
                "mse_gamma",
                "mse_a",
                "mse_b",
                "mse_sigma_e",
                "coverage_gamma",
            ],
        )?;
        let mut t3 = CsvOut::create(&run.path("table3.csv"), &reference, &["n", "m", "predictor", "mspe"])?;
        for c in &study.cells {
            let (n, m) = (c.n.to_string(), c.m.to_string());
            t1.row([
                n.clone(),
                m.clone(),
                c.replications.to_string(),
                c.failures.to_string(),
                c.mean_lambda_hat.to_string(),
                c.mse_lambda.to_string(),
                c.mse_omega_l.to_string(),
                c.rv_rmse.to_string(),
                fmt_opt(Some(c.recall)),
                c.spurious_per_day.to_string(),
            ])?;
            for (label, mse, cov) in [
                ("HL", &c.mse_hl, c.coverage_gamma_hl),
                ("HLO", &c.mse_hlo, None),
            ] {
                if let Some(mse) = mse {
                    let mut row = vec![n.clone(), m.clone(), label.to_string()];
                    row.extend((0..7).map(|j| fmt_opt(mse.get(j).copied())));
                    row.push(fmt_opt(cov));
                    t2.row(row)?;
                }
            }
            for (p, v) in &c.mspe {
                t3.row([n.clone(), m.clone(), p.name().to_string(), v.to_string()])?;
            }
        }
        t1.finish()?;
        t2.finish()?;
        t3.finish()?;

        let mut reps = CsvOut::create(
            &run.path("replications.csv"),
            &reference,
            &[
                "n",
                "m",
                "rep",
                "seed",
                "status",
                "lambda_hat",
                "omega_L_hat",
                "hl_params",
                "hlo_params",
            ],
        )?;
        let failures: usize = study.outcomes.iter().filter(|o| o.is_err()).count();
        for o in &study.outcomes {
            match o {
                Ok(o) => {
                    let join = |f: &Option<crate::mc::FitSummary>| {
                        f.as_ref()
                            .map(|f| f.params.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
                            .unwrap_or_default()
                    };
                    reps.row([
                        o.n.to_string(),
                        o.m.to_string(),
                        o.rep.to_string(),
                        o.seed.to_string(),
                        "ok".to_string(),
                        o.lambda_hat.to_string(),
                        o.omega_l_hat.to_string(),
                        join(&o.hl),
                        join(&o.hlo),
                    ])?;
                }
                Err(e) => {
                    reps.row(["", "", "", "", &format!("error: {e}"), "", "", "", ""])?;
                }
            }
        }
        reps.finish()?;
        run.note("mc.failed_replications", failures);
        run.note("mc.tasks", study.outcomes.len());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommand_names_round_trip() {
        for c in Subcommand::ALL {
            assert_eq!(Subcommand::parse(c.name()).unwrap(), c);
        }
        assert!(Subcommand::parse("plot").is_err());
    }

    #[test]
    fn defaults_and_overrides() {
        let cfg = Config::parse("seed = 5\nsim.n_days = 30\nfit.box.gamma = 0.01, 0.9\nalpha = 0.5\n").unwrap();
        assert!(Settings::from_config(&cfg, None).is_err(), "incomplete structural group");
        let cfg = Config::parse("seed = 5\nsim.n_days = 30\nfit.box.gamma = 0.01, 0.9\nfit.mode = HLO\n").unwrap();
        let s = Settings::from_config(&cfg, Some(9)).unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.sim.seed, 9);
        assert_eq!(s.sim.n_days, 30);
        assert_eq!(s.fit.boxes.gamma, (0.01, 0.9));
        assert_eq!(s.mode, Mode::Hlo);
        assert_eq!(s.sim.euler_substeps_per_tick, 60);
    }

    #[test]
    fn unknown_key_rejected() {
        let cfg = Config::parse("fit.nstarts = 3\n").unwrap();
        let e = Settings::from_config(&cfg, None).unwrap_err();
        assert!(e.to_string().contains("fit.nstarts"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }
}
