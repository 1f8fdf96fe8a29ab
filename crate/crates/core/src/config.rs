//! Flat `key = value` configuration files with `[section]` headers.
//!
//! ```text
//! seed = 7
//! [model]
//! d_model = 32
//! [train]
//! epochs = 10    # trailing comments are allowed
//! ```
//!
//! Keys are addressed as `section.key` (top-level keys have no prefix).
//! Unknown keys, duplicates and malformed lines are rejected with their line
//! number.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.train",
    "data.val",
    "data.val_fraction",
    "data.lexicon",
    "data.vocab",
    "data.min_count",
    "data.tasks_dir",
    "model.d_model",
    "model.n_heads",
    "model.n_layers",
    "model.d_ff",
    "model.dropout",
    "model.max_len",
    "model.n_types",
    "tasks.enabled",
    "tasks.k",
    "tasks.p",
    "tasks.n_flips",
    "tasks.regenerate",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.warmup_fraction",
    "train.beta1",
    "train.beta2",
    "train.epsilon",
    "train.clip_norm",
    "train.eval_train",
    "weights.alpha",
    "weights.beta",
    "weights.gamma",
    "weights.lambda",
    "weights.delta",
    "gradcheck.samples",
    "gradcheck.step",
    "gradcheck.threshold",
    "gradcheck.jitter",
    "gradcheck.examples",
    "gradcheck.d_model",
    "gradcheck.n_heads",
    "gradcheck.d_ff",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    /// Key to (value, line number).
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, &path.display().to_string())
    }

    /// `source` names the input in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Config> {
        let err = |line: usize, msg: String| Error::Config(format!("{source}:{line}: {msg}"));
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, format!("unterminated section header `{line}`")))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(err(line_no, format!("invalid section name `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(err(line_no, "empty key".into()));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if !KNOWN_KEYS.contains(&full.as_str()) {
                return Err(err(line_no, format!("unknown key `{full}`")));
            }
            let value = value.trim().trim_matches('"').to_string();
            if let Some((_, prev)) = entries.get(&full) {
                return Err(err(
                    line_no,
                    format!("duplicate key `{full}` (first set on line {prev})"),
                ));
            }
            entries.insert(full, (value, line_no));
        }
        Ok(Config {
            entries,
            source: source.to_string(),
        })
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Typed lookup; a value that does not parse is an error naming its line.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{}:{line}: bad value `{v}` for `{key}`: {e}", self.source))),
        }
    }

    pub fn line_of(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(_, l)| *l)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let c = Config::parse(
            "seed = 3\n# note\n[model]\nd_model = 16 # small\n[train]\nepochs=2\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(3));
        assert_eq!(c.get::<usize>("model.d_model").unwrap(), Some(16));
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), Some(2));
        assert_eq!(c.get::<usize>("train.batch_size").unwrap(), None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Config::parse("[model]\n\nd_modle = 3\n", "cfg")
            .unwrap_err()
            .to_string();
        assert!(e.contains("cfg:3") && e.contains("model.d_modle"), "{e}");
        let e = Config::parse("seed 3\n", "cfg").unwrap_err().to_string();
        assert!(e.contains("cfg:1"), "{e}");
        let e = Config::parse("[train]\nepochs = x\n", "cfg")
            .unwrap()
            .get::<usize>("train.epochs")
            .unwrap_err();
        assert!(e.to_string().contains("cfg:2"));
        assert!(Config::parse("seed = 1\nseed = 2\n", "cfg").is_err());
        assert!(Config::parse("[model\n", "cfg").is_err());
    }
}
