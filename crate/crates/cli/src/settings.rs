//! Resolution of option values: command-line flag, then `--config` file, then
//! the built-in default.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    resolved: Vec<(String, String, &'static str)>,
}

fn flatten(v: &toml::Value) -> Option<String> {
    Some(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        // lists of strings (grid items) are `;`-separated, numbers `,`-separated
        toml::Value::Array(items) => {
            let sep = if items.iter().all(toml::Value::is_str) { ";" } else { "," };
            items.iter().map(flatten).collect::<Option<Vec<_>>>()?.join(sep)
        }
        _ => return None,
    })
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let mut file = BTreeMap::new();
        for (k, v) in &table {
            let s = flatten(v).ok_or_else(|| Failure::usage(format!("config {}: unsupported value for {k}", path.display())))?;
            file.insert(k.replace('_', "-"), s);
        }
        Ok(Self { file, ..Self::default() })
    }

    fn record(&mut self, key: &str, value: String, source: &'static str) {
        self.resolved.push((key.to_string(), value, source));
    }

    /// `flag`, else the config value for `key`, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        Ok(self.get_opt(key, flag)?.unwrap_or_else(|| {
            self.record(key, default.to_string(), "default");
            default
        }))
    }

    /// Like [`Settings::get`] without a default.
    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        if let Some(v) = flag {
            self.record(key, v.to_string(), "flag");
            return Ok(Some(v));
        }
        match self.file.get(key) {
            Some(raw) => {
                let v = raw
                    .parse::<T>()
                    .map_err(|e| Failure::usage(format!("config key {key}: {e}")))?;
                self.record(key, v.to_string(), "config");
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }

    /// Required value: flag or config.
    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, Failure>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.get_opt(key, flag)?
            .ok_or_else(|| Failure::usage(format!("--{key} is required (flag or config key)")))
    }

    /// Boolean switch: set by the flag or a `true` config value.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, Failure> {
        self.get(key, flag.then_some(true), false)
    }

    /// Rejects config keys that the subcommand never asked for.
    pub fn finish(&self) -> Result<(), Failure> {
        let unknown: Vec<&str> = self.file.keys().filter(|k| !self.used.contains(*k)).map(String::as_str).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Failure::usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// `# key = value (source)` lines, in resolution order.
    pub fn describe(&self) -> String {
        self.resolved
            .iter()
            .map(|(k, v, s)| format!("# {k} = {v} ({s})\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_file(text: &str) -> Settings {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        Settings::load(Some(&p)).unwrap()
    }

    #[test]
    fn precedence() {
        let mut s = with_file("epochs = 7\nlr = 0.5\npatch = [3, 5, 1]\nloss = \"mse\"\n");
        assert_eq!(s.get("epochs", Some(9usize), 1).unwrap(), 9);
        assert_eq!(s.get("lr", None, 1e-4).unwrap(), 0.5);
        assert_eq!(s.get::<String>("patch", None, "3,3,1".into()).unwrap(), "3,5,1");
        assert_eq!(s.get::<String>("loss", None, "l1".into()).unwrap(), "mse");
        assert_eq!(s.get("seed", None, 4u64).unwrap(), 4);
        assert!(s.finish().is_ok());
        let d = s.describe();
        assert!(d.contains("# epochs = 9 (flag)") && d.contains("# lr = 0.5 (config)") && d.contains("# seed = 4 (default)"));
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut s = with_file("epocs = 3\n");
        s.get("epochs", None, 1usize).unwrap();
        assert!(s.finish().is_err());
        let mut s = with_file("epochs = \"many\"\n");
        assert!(s.get("epochs", None, 1usize).is_err());
        let mut s = with_file("batch_size = 2\n");
        assert_eq!(s.get("batch-size", None, 4usize).unwrap(), 2);
    }
}
