//! Layered settings: command line, then a `key = value` file, then defaults.
//!
//! Keys are the long flag names without the leading dashes. A key the
//! program does not know is an error; a known key the current command does
//! not use is ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const KNOWN_KEYS: &[&str] = &[
    "adam-step",
    "assignment",
    "assignment-out",
    "breakpoints",
    "checkpoint",
    "compare",
    "corpus",
    "dim",
    "embeddings",
    "epsilon",
    "export-mode",
    "history",
    "init-range",
    "k",
    "log1p",
    "lr",
    "maxit",
    "min-count",
    "n",
    "n-epoch",
    "no-bias",
    "no-lr-adjust",
    "no-plateau",
    "no-prefetch",
    "num-chunks",
    "optimizer",
    "out",
    "out-dir",
    "phi",
    "power",
    "resume",
    "seed",
    "sequential",
    "shards",
    "spill-threshold",
    "store",
    "timing",
    "vectors",
    "vocab",
    "vocab-size",
    "window",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required setting --{0}")]
    Missing(String),
}

#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut file = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: k + 1 })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line: k + 1, key });
            }
            if file.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: k + 1, key });
            }
        }
        Ok(Self {
            file,
            resolved: Vec::new(),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::parse(&text)
            }
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.to_string(),
                    value: v.clone(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    fn record(&mut self, key: &str, value: String) {
        self.resolved.push((key.to_string(), value));
    }

    /// Command line value, else file value, else `default`.
    pub fn value<T>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T, ConfigError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match cli {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    /// Like [`Resolver::value`] without a default.
    pub fn optional<T>(&mut self, key: &str, cli: Option<T>) -> Result<Option<T>, ConfigError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match cli {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v.to_string());
        }
        Ok(v)
    }

    /// A switch given on the command line wins; otherwise the file decides.
    pub fn flag(&mut self, key: &str, cli: bool) -> Result<bool, ConfigError> {
        let v = cli || self.file_value::<bool>(key)?.unwrap_or(false);
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional_path(
        &mut self,
        key: &str,
        cli: Option<PathBuf>,
    ) -> Result<Option<PathBuf>, ConfigError> {
        let v = cli.or_else(|| self.file.get(key).map(PathBuf::from));
        if let Some(p) = &v {
            self.record(key, p.display().to_string());
        }
        Ok(v)
    }

    pub fn path(&mut self, key: &str, cli: Option<PathBuf>) -> Result<PathBuf, ConfigError> {
        self.optional_path(key, cli)?
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    /// `key=value` pairs in resolution order.
    pub fn summary(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Comma-separated list of numbers, e.g. `-1,0,1.5,3`.
pub fn parse_list(key: &str, s: &str) -> Result<Vec<f64>, ConfigError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| ConfigError::Value {
                    key: key.to_string(),
                    value: s.to_string(),
                    reason: e.to_string(),
                })
        })
        .collect()
}
