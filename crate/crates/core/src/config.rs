//! Layered application config: defaults, then a TOML or JSON file, then
//! `TFORGE_` environment variables, then command-line overrides. Every leaf
//! remembers which layer set it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::grpo::TrainConfig;
use crate::prompt::resolve_brevity;
use crate::reward::RewardConfig;

pub const ENV_PREFIX: &str = "TFORGE_";

/// Variables with the prefix that configure the binary itself rather than
/// a config key.
const ENV_RESERVED: [&str; 2] = ["TFORGE_CONFIG", "TFORGE_LOG"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("{key}: {message}")]
    Conflict { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Brevity suffix text or preset name (`one-sentence`, `shorter-better`).
    pub brevity: String,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            brevity: crate::prompt::BrevityPreset::default().name().to_string(),
        }
    }
}

impl PromptConfig {
    pub fn brevity_text(&self) -> String {
        resolve_brevity(&self.brevity)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub prompt: PromptConfig,
    pub runtime: RuntimeConfig,
}

impl AppConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.reward
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("reward: {e}")))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File(PathBuf),
    Env(String),
    Flag(String),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::File(p) => write!(f, "file {}", p.display()),
            Source::Env(v) => write!(f, "env {v}"),
            Source::Flag(s) => write!(f, "flag {s}"),
        }
    }
}

/// The merged config with the origin of every leaf value.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: AppConfig,
    pub sources: BTreeMap<String, Source>,
}

impl Resolved {
    /// Effective config as TOML followed by a comment block naming the
    /// source of each key. Feeding the output back as `--config` gives the
    /// same effective config.
    pub fn render(&self) -> Result<String, ConfigError> {
        let mut out = toml::to_string(&self.config)
            .map_err(|e| ConfigError::Invalid(format!("cannot render config: {e}")))?;
        out.push_str("\n# sources\n");
        for (k, s) in &self.sources {
            out.push_str(&format!("# {k} = {s}\n"));
        }
        Ok(out)
    }
}

/// One dotted-key override, e.g. `reward.components.gate=false`.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
    pub source: Source,
}

impl Override {
    pub fn new(key: &str, value: Value, source: Source) -> Self {
        Override {
            key: key.to_string(),
            value,
            source,
        }
    }

    /// Parses `key=value`; the value is a TOML literal when it is one and a
    /// bare string otherwise.
    pub fn parse_flag(text: &str) -> Result<Self, ConfigError> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(text.to_string()))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::BadOverride(text.to_string()));
        }
        Ok(Override::new(k, literal(v.trim()), Source::Flag(format!("--set {k}"))))
    }
}

pub fn literal(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// `TFORGE_REWARD__GATE_THRESHOLD=0.6` becomes `reward.gate_threshold`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !ENV_RESERVED.contains(&k.as_str()))
        .map(|(k, v)| {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", ".");
            Override::new(&key, literal(&v), Source::Env(k))
        })
        .collect();
    // the process environment has no defined order
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

fn read_file(path: &Path) -> Result<Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        match Value::try_from(v).map_err(|e| parse_err(e.to_string()))? {
            Value::Table(t) => Ok(t),
            _ => Err(parse_err("top level must be an object".into())),
        }
    } else {
        toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
    }
}

fn leaves(prefix: &str, t: &Table, out: &mut Vec<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => leaves(&key, sub, out),
            _ => out.push(key),
        }
    }
}

fn merge(base: &mut Table, layer: &Table, prefix: &str, source: &Source, sources: &mut BTreeMap<String, Source>) {
    for (k, v) in layer {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l, &key, source, sources),
            _ => {
                let mut ks = Vec::new();
                match v {
                    Value::Table(t) => leaves(&key, t, &mut ks),
                    _ => ks.push(key.clone()),
                }
                sources.retain(|s, _| s != &key && !s.starts_with(&format!("{key}.")));
                for leaf in ks {
                    sources.insert(leaf, source.clone());
                }
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn set_path(base: &mut Table, o: &Override, sources: &mut BTreeMap<String, Source>) -> Result<(), ConfigError> {
    let parts: Vec<&str> = o.key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(o.key.clone()));
    }
    let mut layer = Table::new();
    let mut cur = &mut layer;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => unreachable!(),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), o.value.clone());
    // refuse to replace a whole section with a scalar
    let mut node = &*base;
    for (i, p) in parts.iter().enumerate() {
        match node.get(*p) {
            Some(Value::Table(t)) if i + 1 < parts.len() => node = t,
            Some(Value::Table(_)) if !matches!(o.value, Value::Table(_)) => {
                return Err(ConfigError::Conflict {
                    key: o.key.clone(),
                    message: format!("is a section; set one of its keys instead ({})", o.source),
                })
            }
            _ => break,
        }
    }
    merge(base, &layer, "", &o.source, sources);
    Ok(())
}

/// Merges the layers in precedence order and decodes the result.
pub fn resolve(
    file: Option<&Path>,
    env: &[Override],
    flags: &[Override],
) -> Result<Resolved, ConfigError> {
    let mut sources = BTreeMap::new();
    let mut table = match Value::try_from(AppConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    };
    let mut ks = Vec::new();
    leaves("", &table, &mut ks);
    for k in ks {
        sources.insert(k, Source::Default);
    }
    if let Some(path) = file {
        let layer = read_file(path)?;
        merge(&mut table, &layer, "", &Source::File(path.to_path_buf()), &mut sources);
    }
    for o in env.iter().chain(flags) {
        set_path(&mut table, o, &mut sources)?;
    }
    let config: AppConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
        ConfigError::Invalid(e.message().trim().to_string())
    })?;
    config.validate()?;
    Ok(Resolved { config, sources })
}
