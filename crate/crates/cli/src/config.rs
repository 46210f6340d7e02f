//! `key = value` configuration file mirroring the command-line flags.
//! Flags given on the command line win over the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const ENV_VAR: &str = "REVELIO_CONFIG";

/// Keys are flag names without the leading dashes.
const KEYS: &[&str] = &[
    "stun-server",
    "target",
    "sizes",
    "reps",
    "max-ttl",
    "timeout-ms",
    "gap-ms",
    "device-id",
    "seed",
    "runs",
    "jitter-us",
    "naive",
    "dump-pathchar",
    "range",
    "isp",
    "country",
    "tech",
    "meta",
    "table1-compat",
    "format",
    "analysis",
    "count",
    "faults",
    "deterministic",
    "sequential",
];

/// Bad flags, flag values or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(format!("config line {}: expected key = value", i + 1)));
            };
            let key = key.trim().replace('_', "-");
            if !KEYS.contains(&key.as_str()) {
                return Err(usage(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            values.insert(key, value.trim().to_owned());
        }
        Ok(FileConfig { values })
    }

    /// Reads `explicit`, else the file named by the environment variable,
    /// else nothing.
    pub fn load(explicit: Option<&Path>) -> anyhow::Result<Self> {
        let from_env = std::env::var_os(ENV_VAR).filter(|v| !v.is_empty());
        let path = match (explicit, &from_env) {
            (Some(p), _) => p,
            (None, Some(p)) => Path::new(p),
            (None, None) => return Ok(FileConfig::default()),
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        log::debug!("config from {}", path.display());
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|e| usage(format!("config {key} = {v:?}: {e}"))))
            .transpose()
    }

    pub fn flag(&self, key: &str) -> anyhow::Result<bool> {
        match self.values.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(false),
            Some(v) => match v.as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(usage(format!("config {key} = {v:?}: expected true or false"))),
            },
        }
    }

    /// The command-line value if given, else the file's.
    pub fn or<T: FromStr>(&self, cli: Option<T>, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match cli {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn or_flag(&self, cli: bool, key: &str) -> anyhow::Result<bool> {
        Ok(cli || self.flag(key)?)
    }
}
