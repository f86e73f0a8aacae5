//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored, and a trailing
//! `# comment` after a value is stripped. Keys are dotted lowercase
//! identifiers such as `lm.hidden_dim`. Every key in the file must be
//! consumed by the command, so typos surface as errors.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    used: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, String>>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key.split('.').all(|part| {
            !part.is_empty() && part.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        })
}

impl Config {
    pub fn empty() -> Self {
        Config::parse("").expect("empty config parses")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {lineno}: expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(CliError::Config(format!("line {lineno}: malformed key `{key}`")));
            }
            if value.is_empty() {
                return Err(CliError::Config(format!("line {lineno}: key `{key}` has no value")));
            }
            if entries.insert(key.to_string(), (value.to_string(), lineno)).is_some() {
                return Err(CliError::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
        }
        Ok(Config {
            entries,
            used: RefCell::default(),
            resolved: RefCell::default(),
        })
    }

    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key)
    }

    /// The value of `key` parsed as `T`, or `default` when absent.
    pub fn get<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match self.raw(key) {
            Some((text, line)) => text
                .parse::<T>()
                .map_err(|e| CliError::Config(format!("line {line}: invalid value `{text}` for key `{key}`: {e}")))?,
            None => default,
        };
        self.resolved.borrow_mut().insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// A comma-separated list.
    pub fn get_list<T>(&self, key: &str, default: &[T]) -> Result<Vec<T>, CliError>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        let values = match self.raw(key) {
            Some((text, line)) => text
                .split(',')
                .map(|item| {
                    let item = item.trim();
                    item.parse::<T>().map_err(|e| {
                        CliError::Config(format!("line {line}: invalid list item `{item}` for key `{key}`: {e}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => default.to_vec(),
        };
        let shown: Vec<String> = values.iter().map(ToString::to_string).collect();
        self.resolved.borrow_mut().insert(key.to_string(), shown.join(", "));
        Ok(values)
    }

    /// Fails on the first key present in the file but never read.
    pub fn ensure_all_used(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        match self.entries.iter().find(|(k, _)| !used.contains(*k)) {
            Some((key, (_, line))) => Err(CliError::Config(format!("line {line}: unknown key `{key}`"))),
            None => Ok(()),
        }
    }

    /// Every key read so far with the value actually used.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }

    pub fn config_error(key: &str, reason: impl Display) -> CliError {
        CliError::Config(format!("key `{key}`: {reason}"))
    }
}
