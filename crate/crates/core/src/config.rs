//! Flat `key = value` configuration with `section.key` namespacing.
//!
//! Lines starting with `#` and blank lines are ignored. Keys are matched
//! case-insensitively. Environment variables `RGITO_SECTION__KEY` override
//! `section.key` (`RGITO_KEY` overrides a bare key).

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{GarchParams, JumpParams, JumpSizeLaw, OptionLinkParams, StructuralParams};

pub const ENV_PREFIX: &str = "RGITO_";

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
    /// Directory relative paths are resolved against.
    base_dir: Option<PathBuf>,
    used: RefCell<BTreeSet<String>>,
}

impl PartialEq for Config {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, Path::new("<config>"))
    }

    fn parse_named(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: msg.to_string(),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`"))?;
            let key = normalize(k);
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(parse_err("malformed key"));
            }
            if cfg.entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(parse_err(&format!("duplicate key `{key}`")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_named(&text, path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// Applies `RGITO_*` overrides from the given variables.
    pub fn apply_env<I, K, V>(&mut self, vars: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) {
                if rest.is_empty() {
                    continue;
                }
                let key = normalize(&rest.replace("__", "."));
                self.entries.insert(key, v.as_ref().trim().to_string());
            }
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(normalize(key), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(&normalize(key))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let key = normalize(key);
        let v = self.entries.get(&key)?;
        self.used.borrow_mut().insert(key);
        Some(v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(Some(true)),
                "false" | "no" | "0" | "off" => Ok(Some(false)),
                _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
            },
        }
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse list item `{s}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Path value resolved against the config file's directory.
    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        let p = PathBuf::from(self.raw(key)?);
        Some(match (&self.base_dir, p.is_relative()) {
            (Some(base), true) => base.join(p),
            _ => p,
        })
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Keys never read by any getter.
    pub fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect()
    }

    pub fn reject_unused(&self) -> Result<()> {
        let unused = self.unused_keys();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unused.join(", "))))
        }
    }

    /// Canonical text form, sorted by key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Parameter groups that may appear as bare keys.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParamSet {
    pub structural: Option<StructuralParams<f64>>,
    pub jumps: Option<JumpParams<f64>>,
    pub theta: Option<GarchParams<f64>>,
    pub link: Option<OptionLinkParams<f64>>,
}

const STRUCTURAL_KEYS: [&str; 7] = ["omega1", "omega2", "alpha", "beta", "nu", "gamma", "rho"];
const JUMP_KEYS: [&str; 3] = ["lambda", "omega_L", "zeta2"];
const THETA_KEYS: [&str; 4] = ["omega_g", "alpha_g", "beta_g", "gamma"];
const LINK_KEYS: [&str; 3] = ["a", "b", "sigma_e2"];

fn group(cfg: &Config, keys: &[&str], probe: &[&str]) -> Result<Option<Vec<f64>>> {
    if !probe.iter().any(|k| cfg.contains(k)) {
        return Ok(None);
    }
    keys.iter()
        .map(|k| {
            cfg.get::<f64>(k)?
                .ok_or_else(|| Error::Config(format!("parameter group incomplete: missing `{k}`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

impl ParamSet {
    /// Reads every complete group present. `gamma` is shared by the
    /// structural and GARCH groups; a group is considered present when any
    /// of its own keys is.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let structural = group(cfg, &STRUCTURAL_KEYS, &["omega1", "omega2", "alpha", "beta", "nu", "rho"])?
            .map(|v| StructuralParams {
                omega1: v[0],
                omega2: v[1],
                alpha: v[2],
                beta: v[3],
                nu: v[4],
                gamma: v[5],
                rho: v[6],
            });
        let jumps = match group(cfg, &JUMP_KEYS, &JUMP_KEYS)? {
            None => None,
            Some(v) => {
                let mut j = JumpParams::new(v[0], v[1], v[2]);
                if let Some(law) = cfg.raw("jump_law") {
                    j.law = JumpSizeLaw::parse(law)?;
                }
                Some(j)
            }
        };
        let theta = group(cfg, &THETA_KEYS, &["omega_g", "alpha_g", "beta_g"])?
            .map(|v| GarchParams::new(v[0], v[1], v[2], v[3]));
        let link = group(cfg, &LINK_KEYS, &LINK_KEYS)?.map(|v| OptionLinkParams {
            a: v[0],
            b: v[1],
            sigma_e2: v[2],
        });
        Ok(Self {
            structural,
            jumps,
            theta,
            link,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: f64| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.structural {
            for (k, v) in STRUCTURAL_KEYS
                .iter()
                .zip([p.omega1, p.omega2, p.alpha, p.beta, p.nu, p.gamma, p.rho])
            {
                put(k, v);
            }
        }
        if let Some(j) = &self.jumps {
            for (k, v) in JUMP_KEYS.iter().zip([j.lambda, j.omega_l, j.zeta2]) {
                put(k, v);
            }
        }
        if let Some(t) = &self.theta {
            for (k, v) in THETA_KEYS.iter().zip(t.to_array()) {
                if *k == "gamma" && self.structural.is_some() {
                    continue;
                }
                put(k, v);
            }
        }
        if let Some(l) = &self.link {
            for (k, v) in LINK_KEYS.iter().zip([l.a, l.b, l.sigma_e2]) {
                put(k, v);
            }
        }
        if let Some(j) = &self.jumps {
            let _ = writeln!(s, "jump_law = {}", j.law.name());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Config::parse(text)?;
        let p = Self::from_config(&cfg)?;
        cfg.reject_unused()?;
        Ok(p)
    }
}
