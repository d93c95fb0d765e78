//! `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kern_core::{Error, Result};

pub const SEED_ENV: &str = "KERN_SEED";

/// Resolved settings of one command: defaults, then the config file, then
/// `--key value` overrides, then `KERN_SEED`.
#[derive(Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// skipped.
pub fn parse_file(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("{source}:{}", i + 1), "expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::format(format!("{source}:{}", i + 1), "empty key"));
        }
        out.push((k.replace('-', "_"), v.trim().to_owned()));
    }
    Ok(out)
}

/// Parses `--key value` and `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected --key value, got {a:?}")))?;
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(format!("--{key} needs a value")))?;
                (key.to_owned(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

impl Settings {
    /// `defaults` lists every accepted key; an empty default marks a key
    /// that has no default.
    pub fn resolve(
        defaults: &[(&str, String)],
        file: Option<&Path>,
        overrides: &[String],
        seed_env: Option<String>,
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let mut set = |pairs: Vec<(String, String)>, origin: &str| -> Result<()> {
            for (k, v) in pairs {
                match values.get_mut(&k) {
                    Some(slot) => *slot = v,
                    None => return Err(Error::config(format!("unknown key {k:?} in {origin}"))),
                }
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            set(parse_file(&text, &path.display().to_string())?, &path.display().to_string())?;
        }
        set(parse_overrides(overrides)?, "command line")?;
        if let Some(seed) = seed_env {
            if values.contains_key("seed") {
                values.insert("seed".into(), seed);
            }
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(Error::config(format!("missing required key {key:?}")));
        }
        v.parse()
            .map_err(|e| Error::config(format!("bad value {v:?} for {key}: {e}")))
    }

    /// `None` when the key is empty.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get::<String>(key).map(PathBuf::from)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::config(format!("{key} must be true or false, got {v:?}"))),
        }
    }

    /// One `key = value` line per setting, loadable as a config file.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys() -> Vec<(&'static str, String)> {
        vec![("seed", "0".into()), ("steps", "10".into()), ("out", String::new())]
    }

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn file_then_overrides_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# run\nsteps = 20  # inline\n\nseed=3\n").unwrap();
        let s = Settings::resolve(&keys(), Some(&path), &args(&["--steps", "30"]), None).unwrap();
        assert_eq!(s.get::<u64>("steps").unwrap(), 30);
        assert_eq!(s.get::<u64>("seed").unwrap(), 3);
        let s = Settings::resolve(&keys(), Some(&path), &[], Some("9".into())).unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), 9);
        assert!(s.path("out").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            Settings::resolve(&keys(), None, &args(&["--stepz", "1"]), None),
            Err(Error::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(Settings::resolve(&keys(), Some(&path), &[], None), Err(Error::Config(_))));
        std::fs::write(&path, "no equals sign\n").unwrap();
        assert!(matches!(Settings::resolve(&keys(), Some(&path), &[], None), Err(Error::Format { .. })));
    }

    #[test]
    fn override_forms() {
        let s = Settings::resolve(&keys(), None, &args(&["--out=x.kern", "--steps", "0"]), None).unwrap();
        assert_eq!(s.path("out").unwrap(), PathBuf::from("x.kern"));
        assert_eq!(s.get::<u64>("steps").unwrap(), 0);
        assert!(Settings::resolve(&keys(), None, &args(&["--steps"]), None).is_err());
        assert!(Settings::resolve(&keys(), None, &args(&["steps", "1"]), None).is_err());
        assert!(s.render().contains("steps = 0\n"));
    }
}
