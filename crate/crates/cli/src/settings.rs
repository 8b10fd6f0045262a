//! Resolves the effective configuration: flag > environment > file > default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use countex_core::Config;
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl Source {
    fn tag(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env COUNTEX_THREADS",
            Source::Flag => "flag",
        }
    }
}

pub struct Resolved {
    pub config: Config,
    pub path: Option<PathBuf>,
    /// Every top-level key with its value and where it came from, in key order.
    pub sources: Vec<(String, Value, Source)>,
}

impl Resolved {
    pub fn describe(&self) -> String {
        let mut out = String::from("effective configuration (flag > env > file > default):\n");
        for (key, value, source) in &self.sources {
            let _ = writeln!(out, "  {key} = {value} [{}]", source.tag());
        }
        out
    }
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub env_threads: Option<String>,
}

pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Resolved> {
    let file_keys: Map<String, Value> = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            match serde_json::from_str::<Value>(&text).context("config is not valid JSON")? {
                Value::Object(map) => map,
                _ => anyhow::bail!("config {} must be a JSON object", p.display()),
            }
        }
        None => Map::new(),
    };
    let mut config = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut forced: Vec<(&str, Source)> = Vec::new();
    if let Some(seed) = overrides.seed {
        config.seed = seed;
        forced.push(("seed", Source::Flag));
    }
    if let Some(threads) = overrides.threads {
        config.threads = threads;
        forced.push(("threads", Source::Flag));
    } else if let Some(raw) = &overrides.env_threads {
        config.threads = raw
            .trim()
            .parse()
            .with_context(|| format!("COUNTEX_THREADS must be a non-negative integer, got {raw:?}"))?;
        forced.push(("threads", Source::Env));
    }
    config.validate()?;

    let Value::Object(all) = serde_json::to_value(&config)? else {
        unreachable!("config serializes to an object")
    };
    let sources = all
        .into_iter()
        .map(|(key, value)| {
            let source = forced
                .iter()
                .find(|(k, _)| *k == key)
                .map(|&(_, s)| s)
                .unwrap_or(if file_keys.contains_key(&key) { Source::File } else { Source::Default });
            (key, value, source)
        })
        .collect();
    Ok(Resolved { config, path: path.map(Path::to_path_buf), sources })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Overrides {
        Overrides { seed: None, threads: None, env_threads: None }
    }

    fn source_of(r: &Resolved, key: &str) -> Source {
        r.sources.iter().find(|(k, _, _)| k == key).unwrap().2
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 5, "steps": 7, "threads": 2}"#).unwrap();
        let r = resolve(Some(&path), &Overrides { seed: Some(9), ..none() }).unwrap();
        assert_eq!(r.config.seed, 9);
        assert_eq!(r.config.steps, 7);
        assert_eq!(source_of(&r, "seed"), Source::Flag);
        assert_eq!(source_of(&r, "steps"), Source::File);
        assert_eq!(source_of(&r, "threads"), Source::File);
        assert_eq!(source_of(&r, "batch_size"), Source::Default);
    }

    #[test]
    fn env_threads_sits_between_flag_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"threads": 2}"#).unwrap();
        let env = Overrides { env_threads: Some("3".into()), ..none() };
        assert_eq!(resolve(Some(&path), &env).unwrap().config.threads, 3);
        let flag = Overrides { threads: Some(1), env_threads: Some("3".into()), ..none() };
        assert_eq!(resolve(Some(&path), &flag).unwrap().config.threads, 1);
        let bad = Overrides { env_threads: Some("many".into()), ..none() };
        assert!(resolve(None, &bad).is_err());
    }
}
