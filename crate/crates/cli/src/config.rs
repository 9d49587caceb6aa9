//! Run configuration: a flat `key = value` file split into `[sections]`.
//!
//! ```text
//! # comment
//! [model]
//! target = target.ckpt
//! drafter = oracle
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    base_dir: PathBuf,
    seed_override: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> CliResult<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::from("run");
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| CliError::syntax(n + 1, "unterminated section header"))?
                    .trim();
                if name.is_empty() {
                    return Err(CliError::syntax(n + 1, "empty section name"));
                }
                current = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::syntax(n + 1, "expected key = value"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::syntax(n + 1, "empty key"));
            }
            let entries = sections.entry(current.clone()).or_default();
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::syntax(n + 1, &format!("duplicate key {current}.{key}")));
            }
        }
        Ok(Self {
            sections,
            base_dir: base_dir.into(),
            seed_override: None,
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if seed.is_some() {
            self.seed_override = seed;
        }
        self
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn require(&self, section: &str, key: &str) -> CliResult<&str> {
        self.get(section, key)
            .ok_or_else(|| CliError::config(section, key, "is required"))
    }

    pub fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::config(section, key, &format!("cannot parse {v:?}: {e}"))),
        }
    }

    pub fn parse_opt<T: FromStr>(&self, section: &str, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::config(section, key, &format!("cannot parse {v:?}: {e}")))
            })
            .transpose()
    }

    /// Comma- or whitespace-separated list.
    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> CliResult<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.get(section, key) else {
            return Ok(None);
        };
        v.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::config(section, key, &format!("cannot parse {s:?}: {e}")))
            })
            .collect::<CliResult<Vec<T>>>()
            .map(Some)
    }

    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// A path that must already exist.
    pub fn existing_path(&self, section: &str, key: &str) -> CliResult<Option<PathBuf>> {
        let Some(v) = self.get(section, key) else {
            return Ok(None);
        };
        let path = self.resolve(v);
        if !path.is_file() {
            return Err(CliError::config(
                section,
                key,
                &format!("file {} does not exist", path.display()),
            ));
        }
        Ok(Some(path))
    }

    /// `--seed` if given, else `[run] seed`, else 0.
    pub fn seed(&self) -> CliResult<u64> {
        match self.seed_override {
            Some(s) => Ok(s),
            None => self.parse_or("run", "seed", 0),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}
