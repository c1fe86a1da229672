//! Flat `key = value` configuration.
//!
//! Values are resolved in this order, later sources winning: built-in
//! defaults, the config file, the `TOOLFLOW_SEED` environment variable (for
//! the `seed` key only), command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use toolflow::error::{Error, Result};

pub const SEED_VAR: &str = "TOOLFLOW_SEED";

/// Every key a command accepts, with its default value.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored; a repeated key is an error.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::BadConfig(format!("line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::BadConfig(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::BadConfig(format!("line {}: `{k}` given twice", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn new(command: &'static str, defaults: &[(&str, &str)]) -> Self {
        Settings {
            command,
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(Error::BadConfig(format!("unknown key `{key}` for `{}`", self.command))),
        }
    }

    pub fn merge(&mut self, pairs: Vec<(String, String)>) -> Result<()> {
        pairs.into_iter().try_for_each(|(k, v)| self.set(&k, v))
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let pairs = parse(&text).map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())))?;
        self.merge(pairs)
    }

    /// Applies `seed_var` when it is set and non-empty.
    pub fn merge_seed_var(&mut self, seed_var: Option<String>) -> Result<()> {
        match seed_var {
            Some(s) if !s.trim().is_empty() => self.set("seed", s.trim()),
            _ => Ok(()),
        }
    }

    /// `--set key=value` overrides.
    pub fn merge_assignments(&mut self, assignments: &[String]) -> Result<()> {
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("`{a}` is not of the form key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a key of `{}`", self.command))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::BadConfig(format!("`{key}`: cannot parse `{raw}`")))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            other => Err(Error::BadConfig(format!("`{key}`: `{other}` is not a boolean"))),
        }
    }

    /// Comma-separated list of integers.
    pub fn widths(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)
            .split(',')
            .map(|w| {
                w.trim()
                    .parse()
                    .map_err(|_| Error::BadConfig(format!("`{key}`: `{w}` is not a width")))
            })
            .collect()
    }

    /// Empty values count as absent.
    pub fn optional(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn render(&self) -> String {
        let mut out = format!("# resolved configuration for `toolflow {}`\n", self.command);
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").expect("writing to a string");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
