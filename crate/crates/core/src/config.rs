//! Flat `section.key = value` run configuration.
//!
//! Values are layered: built-in defaults, then a config file, then flags.
//! Every key is typed and unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
}

const KEYS: &[(&str, Kind, &str)] = &[
    ("seed", Kind::Int, "1"),
    ("data.min_len", Kind::Int, "10"),
    ("data.max_len", Kind::Int, "18"),
    ("data.lowercase", Kind::Bool, "false"),
    ("data.valid_fraction", Kind::Float, "0.1"),
    ("data.test_fraction", Kind::Float, "0.1"),
    ("data.vocab_max_size", Kind::Int, "10000"),
    ("data.vocab_min_freq", Kind::Int, "1"),
    ("mask.strategy", Kind::Choice(&["random", "anchor", "closed_class"]), "random"),
    ("mask.rate", Kind::Float, "0.3"),
    ("mask.blanks", Kind::Int, "2"),
    ("mask.keep_numbers", Kind::Bool, "true"),
    ("mask.keep_entity", Kind::Choice(&["first", "random", "none"]), "first"),
    ("mask.word_list", Kind::Text, ""),
    ("mask.annotations", Kind::Text, ""),
    ("model.kind", Kind::Choice(&["self_attn", "seq2seq"]), "self_attn"),
    ("model.d_model", Kind::Int, "400"),
    ("model.num_blocks", Kind::Int, "6"),
    ("model.num_heads", Kind::Int, "8"),
    ("model.ffn_dim", Kind::Int, "1600"),
    ("model.dropout", Kind::Float, "0.1"),
    ("model.num_units", Kind::Int, "1600"),
    ("position.base", Kind::Int, "64"),
    ("position.kind", Kind::Choice(&["sinusoidal", "learned"]), "sinusoidal"),
    ("position.max_segments", Kind::Int, "64"),
    ("train.batch_size", Kind::Int, "200"),
    ("train.epochs", Kind::Int, "150"),
    ("train.max_steps", Kind::Int, "0"),
    ("train.lr_const", Kind::Float, "0.3"),
    ("train.warmup_steps", Kind::Int, "10000"),
    ("train.precision", Kind::Choice(&["f32", "f64"]), "f32"),
    ("train.valid_every", Kind::Int, "0"),
    ("train.log_every", Kind::Int, "1"),
    ("decode.mode", Kind::Choice(&["greedy", "sample"]), "greedy"),
    ("decode.temperature", Kind::Float, "1.0"),
    ("decode.max_blank_len", Kind::Int, "20"),
    ("synth.preset", Kind::Choice(&["nba", "orders"]), "nba"),
    ("synth.n", Kind::Int, "1000"),
];

fn kind_of(key: &str) -> Result<Kind> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(_, kind, _)| *kind)
        .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))
}

fn check(key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("{key} = '{value}' is not {what}"));
    match kind_of(key)? {
        Kind::Int => value.parse::<u64>().map(drop).map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::Bool => value.parse::<bool>().map(drop).map_err(|_| bad("true or false")),
        Kind::Text => Ok(()),
        Kind::Choice(opts) if opts.contains(&value) => Ok(()),
        Kind::Choice(opts) => Err(bad(&format!("one of {}", opts.join("|")))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, _, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        check(key, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn str(&self, key: &str) -> &str {
        kind_of(key).expect("known key");
        &self.values[key]
    }

    pub fn usize(&self, key: &str) -> usize {
        self.str(key).parse().expect("validated integer")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.str(key).parse().expect("validated integer")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.str(key).parse().expect("validated number")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.str(key).parse().expect("validated bool")
    }

    /// Empty text values read as `None`.
    pub fn path(&self, key: &str) -> Option<&Path> {
        let v = self.str(key);
        (!v.is_empty()).then(|| Path::new(v))
    }

    /// All keys in sorted order, in the same format the file loader reads.
    pub fn resolved_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_echo() {
        let mut c = RunConfig::default();
        c.apply_text("# tiny\ntrain.batch_size = 32\nmodel.d_model=64  # comment\n", "f").unwrap();
        c.apply_override("train.batch_size=16").unwrap();
        assert_eq!(c.usize("train.batch_size"), 16);
        assert_eq!(c.usize("model.d_model"), 64);
        let mut d = RunConfig::default();
        d.apply_text(&c.resolved_text(), "echo").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_unknown_and_ill_typed() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("train.bogus = 1", "f").is_err());
        assert!(c.set("mask.rate", "lots").is_err());
        assert!(c.set("model.kind", "rnn").is_err());
        assert!(c.set("train.epochs", "-1").is_err());
        assert!(c.apply_text("novalue", "f").is_err());
        assert!(c.path("mask.word_list").is_none());
    }
}
