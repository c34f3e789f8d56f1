//! CSV formats: ticks, daily measures, simulation truth, option quotes and
//! reports. Every written file starts with a `#` line naming the manifest
//! that produced it; readers skip `#` lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::options::OptionChain;
use crate::realized::TickDay;

pub const MANIFEST_FILE: &str = "run_manifest.txt";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn simulation_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2017, 1, 3).expect("valid date")
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).ok()
}

pub fn format_date(d: NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}

/// Weekends plus an optional holiday list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Calendar {
    pub holidays: BTreeSet<NaiveDate>,
}

impl Calendar {
    /// One date per line; `#` comments and blank lines ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut holidays = BTreeSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let d = parse_date(line).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("bad date `{line}`"),
            })?;
            holidays.insert(d);
        }
        Ok(Self { holidays })
    }

    pub fn is_business_day(&self, d: NaiveDate) -> bool {
        !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) && !self.holidays.contains(&d)
    }

    pub fn next_business_day(&self, d: NaiveDate) -> NaiveDate {
        let mut x = d + Duration::days(1);
        while !self.is_business_day(x) {
            x += Duration::days(1);
        }
        x
    }

    /// Business days in `(from, to]`; zero when `to <= from`.
    pub fn business_days_between(&self, from: NaiveDate, to: NaiveDate) -> usize {
        let mut count = 0;
        let mut x = from;
        while x < to {
            x += Duration::days(1);
            if self.is_business_day(x) {
                count += 1;
            }
        }
        count
    }

    /// `n` consecutive business days starting at `start` (or the first
    /// business day after it).
    pub fn business_days(&self, start: NaiveDate, n: usize) -> Vec<NaiveDate> {
        let mut out = Vec::with_capacity(n);
        let mut d = start;
        if !self.is_business_day(d) {
            d = self.next_business_day(d);
        }
        while out.len() < n {
            out.push(d);
            d = self.next_business_day(d);
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// CSV writer that emits the manifest reference line before the header.
pub struct CsvOut {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
    rows: usize,
}

impl CsvOut {
    pub fn create(path: &Path, reference: &str, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = BufWriter::new(file);
        writeln!(buf, "# {reference}").map_err(|e| Error::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().from_writer(buf);
        inner.write_record(header)?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
            rows: 0,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.rows += 1;
        self.inner.write_record(fields).map_err(Error::from)
    }

    /// Flushes and returns the number of data rows.
    pub fn finish(mut self) -> Result<usize> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.rows)
    }
}

/// Empty string for `None`.
pub fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct CsvIn {
    path: PathBuf,
    reader: csv::Reader<File>,
    columns: Vec<usize>,
}

impl CsvIn {
    fn open(path: &Path, required: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader.headers()?.clone();
        let line = headers.position().map(|p| p.line() as usize).unwrap_or(1);
        let columns = required
            .iter()
            .map(|name| {
                headers.iter().position(|h| h == *name).ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("missing column `{name}`"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            columns,
        })
    }

    /// Calls `f(line, fields)` for each record, with fields in `required`
    /// order. Errors returned by `f` are tagged with the record's line.
    fn for_each(
        &mut self,
        mut f: impl FnMut(usize, &[&str]) -> std::result::Result<(), String>,
    ) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                Error::Parse {
                    path: self.path.clone(),
                    line,
                    msg: e.to_string(),
                }
            })?;
            if !more {
                return Ok(());
            }
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let fields: Vec<&str> = self.columns.iter().map(|&c| record.get(c).unwrap_or("")).collect();
            if let Err(msg) = f(line, &fields) {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    line,
                    msg,
                });
            }
        }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }
}

type FieldResult<T> = std::result::Result<T, String>;

fn field<T: std::str::FromStr>(name: &str, v: &str) -> FieldResult<T> {
    v.parse().map_err(|_| format!("cannot parse {name} `{v}`"))
}

fn date_field(name: &str, v: &str) -> FieldResult<NaiveDate> {
    parse_date(v).ok_or_else(|| format!("bad {name} `{v}` (expected YYYY-MM-DD)"))
}

fn opt_f64_field(name: &str, v: &str) -> FieldResult<Option<f64>> {
    if v.is_empty() {
        Ok(None)
    } else {
        field(name, v).map(Some)
    }
}

pub const TICK_COLUMNS: [&str; 3] = ["date", "time_fraction", "log_price"];

/// Tick panel with the calendar date of each day.
#[derive(Debug, Clone, PartialEq)]
pub struct TickData {
    pub dates: Vec<NaiveDate>,
    pub days: Vec<TickDay<f64>>,
}

/// Streaming writer for the tick format.
pub struct TickWriter(CsvOut);

impl TickWriter {
    pub fn create(path: &Path, reference: &str) -> Result<Self> {
        CsvOut::create(path, reference, &TICK_COLUMNS).map(Self)
    }

    pub fn day(&mut self, date: NaiveDate, day: &TickDay<f64>) -> Result<()> {
        let d = format_date(date);
        for (t, p) in day.fractions.iter().zip(&day.prices) {
            self.0.row([d.as_str(), &t.to_string(), &p.to_string()])?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<usize> {
        self.0.finish()
    }
}

/// Reads `date,time_fraction,log_price`; days are ordered by date and
/// indexed from 1. Times must lie in `[0, 1]` and strictly increase within
/// each date in file order.
pub fn read_ticks(path: &Path) -> Result<TickData> {
    let mut src = CsvIn::open(path, &TICK_COLUMNS)?;
    let mut by_date: BTreeMap<NaiveDate, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    src.for_each(|_, f| {
        let date = date_field("date", f[0])?;
        let t: f64 = field("time_fraction", f[1])?;
        let p: f64 = field("log_price", f[2])?;
        if !(0.0..=1.0).contains(&t) {
            return Err(format!("time_fraction {t} outside [0, 1]"));
        }
        if !p.is_finite() {
            return Err("non-finite log_price".into());
        }
        let entry = by_date.entry(date).or_default();
        if let Some(&last) = entry.0.last() {
            if t == last {
                return Err(format!("duplicate timestamp {} {t}", f[0]));
            }
            if t < last {
                return Err(format!("non-monotone time on {}: {t} after {last}", f[0]));
            }
        }
        entry.0.push(t);
        entry.1.push(p);
        Ok(())
    })?;
    if by_date.is_empty() {
        return Err(src.err(0, "no tick rows"));
    }
    let mut dates = Vec::with_capacity(by_date.len());
    let mut days = Vec::with_capacity(by_date.len());
    for (i, (date, (t, p))) in by_date.into_iter().enumerate() {
        let day = TickDay::new(i + 1, t, p)
            .map_err(|e| src.err(0, format!("{}: {e}", format_date(date))))?;
        dates.push(date);
        days.push(day);
    }
    Ok(TickData { dates, days })
}

pub const DAILY_COLUMNS: [&str; 6] = ["date", "rv", "jv", "nv", "jump_count", "noise_var"];

#[derive(Debug, Clone, PartialEq)]
pub struct DailyRow {
    pub date: NaiveDate,
    pub rv: f64,
    pub jv: f64,
    pub nv: Option<f64>,
    pub jump_count: usize,
    pub noise_var: f64,
}

pub fn write_daily(path: &Path, reference: &str, rows: &[DailyRow]) -> Result<usize> {
    let mut w = CsvOut::create(path, reference, &DAILY_COLUMNS)?;
    for r in rows {
        w.row([
            format_date(r.date),
            r.rv.to_string(),
            r.jv.to_string(),
            opt_field(r.nv),
            r.jump_count.to_string(),
            r.noise_var.to_string(),
        ])?;
    }
    w.finish()
}

pub fn read_daily(path: &Path) -> Result<Vec<DailyRow>> {
    let mut src = CsvIn::open(path, &DAILY_COLUMNS)?;
    let mut out: Vec<DailyRow> = Vec::new();
    src.for_each(|_, f| {
        let row = DailyRow {
            date: date_field("date", f[0])?,
            rv: field("rv", f[1])?,
            jv: field("jv", f[2])?,
            nv: opt_f64_field("nv", f[3])?,
            jump_count: field("jump_count", f[4])?,
            noise_var: field("noise_var", f[5])?,
        };
        if out.last().is_some_and(|prev| row.date <= prev.date) {
            return Err("dates must be strictly increasing".into());
        }
        out.push(row);
        Ok(())
    })?;
    if out.is_empty() {
        return Err(src.err(0, "no daily rows"));
    }
    Ok(out)
}

pub const TRUTH_COLUMNS: [&str; 6] = ["date", "true_iv", "true_jv", "true_h", "nv", "jump_count"];

/// Latent daily quantities of a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub date: NaiveDate,
    pub true_iv: f64,
    pub true_jv: f64,
    pub true_h: f64,
    pub nv: f64,
    pub jump_count: usize,
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut src = CsvIn::open(path, &TRUTH_COLUMNS)?;
    let mut out = Vec::new();
    src.for_each(|_, f| {
        out.push(TruthRow {
            date: date_field("date", f[0])?,
            true_iv: field("true_iv", f[1])?,
            true_jv: field("true_jv", f[2])?,
            true_h: field("true_h", f[3])?,
            nv: field("nv", f[4])?,
            jump_count: field("jump_count", f[5])?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub const OPTION_COLUMNS: [&str; 5] = [
    "quote_date",
    "expiry_date",
    "log_strike",
    "option_price",
    "underlying_logprice",
];

pub fn write_option_chain(
    w: &mut CsvOut,
    quote: NaiveDate,
    expiry: NaiveDate,
    chain: &OptionChain<f64>,
) -> Result<()> {
    let (q, e) = (format_date(quote), format_date(expiry));
    let x = chain.underlying_logprice.to_string();
    for (k, p) in chain.log_strikes.iter().zip(&chain.prices) {
        w.row([q.as_str(), e.as_str(), &k.to_string(), &p.to_string(), x.as_str()])?;
    }
    Ok(())
}

/// Chains kept by [`read_options`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptionData {
    /// One chain per quote date; `quote_day` is 0 until paired with a panel.
    pub chains: BTreeMap<NaiveDate, OptionChain<f64>>,
    /// Quote dates without an eligible expiry or with fewer than 3 strikes.
    pub dropped: usize,
}

/// Reads option quotes and keeps, per quote date, the nearest expiry that
/// is 1 or 2 business days away. Time to expiry is measured in business days.
pub fn read_options(path: &Path, calendar: &Calendar) -> Result<OptionData> {
    let mut src = CsvIn::open(path, &OPTION_COLUMNS)?;
    type Quotes = Vec<(f64, f64, f64, usize)>;
    let mut groups: BTreeMap<NaiveDate, BTreeMap<NaiveDate, Quotes>> = BTreeMap::new();
    src.for_each(|line, f| {
        let quote = date_field("quote_date", f[0])?;
        let expiry = date_field("expiry_date", f[1])?;
        let k: f64 = field("log_strike", f[2])?;
        let p: f64 = field("option_price", f[3])?;
        let x: f64 = field("underlying_logprice", f[4])?;
        if !k.is_finite() || !x.is_finite() || !p.is_finite() || p < 0.0 {
            return Err("non-finite value or negative price".into());
        }
        groups
            .entry(quote)
            .or_default()
            .entry(expiry)
            .or_default()
            .push((k, p, x, line));
        Ok(())
    })?;
    let mut chains = BTreeMap::new();
    let mut dropped = 0;
    for (quote, by_expiry) in groups {
        let pick = by_expiry
            .into_iter()
            .map(|(e, q)| (calendar.business_days_between(quote, e), q))
            .filter(|(t, _)| (1..=2).contains(t))
            .min_by_key(|(t, _)| *t);
        let Some((t, mut quotes)) = pick else {
            dropped += 1;
            continue;
        };
        if quotes.len() < 3 {
            dropped += 1;
            continue;
        }
        quotes.sort_by(|a, b| a.0.total_cmp(&b.0));
        let x = quotes[0].2;
        for w in quotes.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(src.err(w[1].3, format!("duplicate log_strike {}", w[1].0)));
            }
            if w[1].2 != x {
                return Err(src.err(w[1].3, "underlying_logprice differs within one chain"));
            }
        }
        let (k, p): (Vec<f64>, Vec<f64>) = quotes.iter().map(|q| (q.0, q.1)).unzip();
        let chain = OptionChain::new(0, t as f64, k, p, x)
            .map_err(|e| src.err(quotes[0].3, e.to_string()))?;
        chains.insert(quote, chain);
    }
    if chains.is_empty() {
        return Err(Error::MissingInput(format!(
            "{}: no quote date has an eligible expiry with at least 3 strikes",
            path.display()
        )));
    }
    Ok(OptionData { chains, dropped })
}

/// Reads a flat `key = value` report (e.g. a manifest) into a map.
pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}
