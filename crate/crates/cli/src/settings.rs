//! Effective settings of one invocation: built-in defaults, then the
//! `--config` file, then `GLSR_SEED`, then command-line flags.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use glmamba::config::{KvMap, ModelConfig};
use glmamba::data::SyntheticSpec;

pub const SEED_ENV: &str = "GLSR_SEED";

/// Keys read by the commands themselves rather than the model or generator.
pub const COMMAND_KEYS: &[&str] = &[
    "data",
    "out",
    "steps",
    "every",
    "log_every",
    "resume",
    "checkpoint",
    "lr_image",
    "ref_image",
    "filter",
    "grids",
    "bench_channels",
    "reps",
];

fn is_known(key: &str) -> bool {
    COMMAND_KEYS.contains(&key) || ModelConfig::is_key(key) || SyntheticSpec::default().to_kv().get(key).is_some()
}

/// Parses `key=value` from a `--set` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn resolve(config: Option<&Path>, flags: &[(String, String)], env_seed: Option<String>) -> Result<KvMap> {
    let mut kv = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            KvMap::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => KvMap::default(),
    };
    if let Some(s) = env_seed {
        let seed: u64 = s.trim().parse().map_err(|_| anyhow!("{SEED_ENV} must be an unsigned integer, got `{s}`"))?;
        kv.set("seed", seed);
    }
    for (k, v) in flags {
        kv.set(k.clone(), v);
    }
    if let Some(k) = kv.entries.keys().find(|k| !is_known(k)) {
        bail!("unknown key `{k}`");
    }
    Ok(kv)
}

pub fn model_config(kv: &KvMap) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    c.apply(kv)?;
    c.validate()?;
    Ok(c)
}

pub fn synthetic_spec(kv: &KvMap) -> Result<SyntheticSpec> {
    let mut s = SyntheticSpec::default();
    s.apply(kv)?;
    s.validate()?;
    Ok(s)
}

pub fn get<T: FromStr>(kv: &KvMap, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| anyhow!("invalid value `{v}` for `{key}`")),
    }
}

pub fn require<'a>(kv: &'a KvMap, key: &str) -> Result<&'a str> {
    kv.get(key).ok_or_else(|| anyhow!("missing required setting `{key}` (flag --{})", key.replace('_', "-")))
}
