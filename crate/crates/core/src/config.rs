//! Flat `key = value` configuration files. Keys may repeat to form lists;
//! `#` starts a comment. Every key must be consumed by the command reading
//! the file, so typos surface as errors instead of silent defaults.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::similarity::PartitionMode;
use crate::toy_vggt::{GlobalRope, SceneSpec, StackConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{0}` given more than once")]
    Repeated(String),
    #[error("key `{key}`: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("unknown key(s): {0}")]
    Unknown(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub struct Config {
    entries: Vec<(String, String)>,
    used: RefCell<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries, used: RefCell::default() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    fn values(&self, key: &str) -> Vec<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    fn convert<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        v.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() })
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.values(key).as_slice() {
            [] => Ok(None),
            [v] => Self::convert(key, v).map(Some),
            _ => Err(ConfigError::Repeated(key.into())),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or_else(|| ConfigError::Missing(key.into()))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    /// All values of a repeated key, in file order.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.values(key).into_iter().map(|v| Self::convert(key, v)).collect()
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.opt::<String>(key)?.as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "expected true or false".into() }),
        }
    }

    /// Fails if any key in the file was never read.
    pub fn finish(&self) -> Result<(), ConfigError> {
        let used = self.used.borrow();
        let unknown: BTreeSet<&str> =
            self.entries.iter().map(|(k, _)| k.as_str()).filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown.into_iter().collect::<Vec<_>>().join(", ")))
        }
    }
}

/// `n_s x n_t`, e.g. `32x2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub n_s: usize,
    pub n_t: usize,
}

impl FromStr for GridLayout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once('x').ok_or("expected n_s x n_t, e.g. 32x2")?;
        let n_s = a.trim().parse().map_err(|e| format!("n_s: {e}"))?;
        let n_t = b.trim().parse().map_err(|e| format!("n_t: {e}"))?;
        Ok(Self { n_s, n_t })
    }
}

pub fn scene_spec(cfg: &Config) -> Result<SceneSpec, ConfigError> {
    let mut spec = SceneSpec::new(cfg.get("num_frames")?, cfg.get("frame_len")?, cfg.get("d_model")?);
    spec.spatial_redundancy = cfg.get_or("spatial_redundancy", spec.spatial_redundancy)?;
    spec.temporal_continuity = cfg.get_or("temporal_continuity", spec.temporal_continuity)?;
    spec.patch_len = cfg.get_or("patch_len", spec.patch_len)?;
    spec.seed = cfg.get_or("seed", spec.seed)?;
    spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(spec)
}

pub fn stack_config(cfg: &Config) -> Result<StackConfig, ConfigError> {
    let mut s = StackConfig::new(cfg.get_or("num_layer_pairs", 1)?, cfg.get("num_heads")?, cfg.get("head_dim")?);
    s.rope_base = cfg.get_or("rope_base", s.rope_base)?;
    s.weights_seed = cfg.get_or("weights_seed", s.weights_seed)?;
    s.global_rope = match cfg.get_or("global_rope", "absolute".to_string())?.as_str() {
        "absolute" => GlobalRope::Absolute,
        "per_frame" => GlobalRope::PerFrame,
        v => {
            return Err(ConfigError::Value {
                key: "global_rope".into(),
                value: v.into(),
                reason: "expected absolute or per_frame".into(),
            })
        }
    };
    if s.num_heads == 0 || s.head_dim == 0 || s.head_dim % 2 != 0 {
        return Err(ConfigError::Invalid("num_heads must be positive and head_dim positive and even".into()));
    }
    Ok(s)
}

/// `partition = stride | random`. Random partitions are seeded per run.
pub fn partition_mode(cfg: &Config, seed: u64) -> Result<PartitionMode, ConfigError> {
    match cfg.get_or("partition", "stride".to_string())?.as_str() {
        "stride" => Ok(PartitionMode::Stride),
        "random" => Ok(PartitionMode::Random { seed }),
        v => Err(ConfigError::Value { key: "partition".into(), value: v.into(), reason: "expected stride or random".into() }),
    }
}
