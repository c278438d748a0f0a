//! Layered settings: command line, then config file, then `DSEBM_*`
//! environment variables, then built-in defaults.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub const ENV_PREFIX: &str = "DSEBM_";

pub struct Settings {
    file: BTreeMap<String, String>,
    effective: RefCell<BTreeMap<String, String>>,
}

/// `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", i + 1))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

pub fn env_key(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('-', "_").to_uppercase())
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            effective: RefCell::new(BTreeMap::new()),
        })
    }

    fn lookup(&self, key: &str) -> Option<String> {
        self.file
            .get(key)
            .cloned()
            .or_else(|| std::env::var(env_key(key)).ok())
    }

    fn resolve<T>(&self, key: &str, cli: Option<T>, echo: bool) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match cli {
            Some(v) => Some(v),
            None => match self.lookup(key) {
                Some(text) => Some(
                    text.parse::<T>()
                        .map_err(|e| CliError::Usage(format!("invalid value {text:?} for {key}: {e}")))?,
                ),
                None => None,
            },
        };
        if echo {
            if let Some(v) = &value {
                self.effective.borrow_mut().insert(key.to_string(), v.to_string());
            }
        }
        Ok(value)
    }

    pub fn opt<T>(&self, key: &str, cli: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.resolve(key, cli, true)
    }

    pub fn or<T>(&self, key: &str, cli: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.resolve(key, cli, false)?.unwrap_or(default);
        self.effective.borrow_mut().insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn require<T>(&self, key: &str, cli: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.opt(key, cli)?.ok_or_else(|| CliError::Missing(key.to_string()))
    }

    /// An input path, echoed.
    pub fn path(&self, key: &str, cli: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.opt(key, cli.map(|p| p.display().to_string()))?.map(PathBuf::from))
    }

    pub fn require_path(&self, key: &str, cli: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.path(key, cli)?.ok_or_else(|| CliError::Missing(key.to_string()))
    }

    /// An output path: resolved like the rest but not echoed, so that
    /// artifacts do not depend on where they are written.
    pub fn out_path(&self, key: &str, cli: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self.resolve(key, cli.map(|p| p.display().to_string()), false)?.map(PathBuf::from))
    }

    pub fn effective(&self) -> BTreeMap<String, String> {
        self.effective.borrow().clone()
    }

    /// `# config key=value` lines.
    pub fn echo_lines(&self) -> String {
        self.effective()
            .iter()
            .map(|(k, v)| format!("# config {k}={v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_lines() {
        let m = parse_config("# c\nepochs = 5\nbatch_size=3 # trailing\n\n").unwrap();
        assert_eq!(m["epochs"], "5");
        assert_eq!(m["batch-size"], "3");
        assert!(parse_config("oops").is_err());
    }

    #[test]
    fn env_names() {
        assert_eq!(env_key("batch-size"), "DSEBM_BATCH_SIZE");
    }

    #[test]
    fn precedence() {
        let s = Settings {
            file: [("epochs".to_string(), "7".to_string())].into(),
            effective: RefCell::new(BTreeMap::new()),
        };
        assert_eq!(s.or("epochs", Some(3usize), 1).unwrap(), 3);
        assert_eq!(s.or::<usize>("epochs", None, 1).unwrap(), 7);
        assert_eq!(s.or::<usize>("nonexistent-key-for-test", None, 1).unwrap(), 1);
        assert!(s.or::<usize>("epochs-bad", None, 1).is_ok());
        assert_eq!(s.effective()["epochs"], "7");
    }
}
