//! One TOML file configures every pipeline stage.
//!
//! Values can be overridden from the environment with `VIDEOR4_` variables,
//! where `__` separates nesting levels (`VIDEOR4_REWARD__ALPHA=0.7`). Every
//! report records [`PipelineConfig::hash`] of the resolved configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evidence::MatcherConfig;
use crate::grpo::GrpoConfig;
use crate::reward::RewardConfig;

pub const ENV_PREFIX: &str = "VIDEOR4_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus root: one directory per video plus `instances.jsonl`.
    pub corpus: PathBuf,
    /// Where every command writes its outputs.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Cells per frame side for the toy policy.
    pub grid: u32,
    /// Answer candidates per question, gold included.
    pub candidates: usize,
    /// Share of video questions held out for evaluation.
    pub eval_fraction: f64,
    /// JSON stage plan; the full four-stage plan when absent.
    pub plan: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: 2,
            candidates: 4,
            eval_fraction: 0.25,
            plan: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionerKind {
    Stub,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub kind: CaptionerKind,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            kind: CaptionerKind::Stub,
            endpoint: None,
            timeout_secs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    pub bind: String,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8077".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub matcher: MatcherConfig,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub train: TrainConfig,
    pub captioner: CaptionerConfig,
    pub qc: QcConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: format!("`{}`: {}", e.path(), e.inner()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Applies `VIDEOR4_*` pairs; other keys are ignored. Values are parsed
    /// as JSON literals when possible and taken as strings otherwise.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut touched = Vec::new();
        for (k, v) in vars {
            let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            let value = serde_json::from_str(v.as_ref())
                .unwrap_or_else(|_| serde_json::Value::String(v.as_ref().to_string()));
            let mut node = &mut tree;
            for (i, seg) in path.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| ConfigError::Override {
                    key: k.as_ref().to_string(),
                    message: format!("`{}` is not a section", path[..i].join(".")),
                })?;
                if i + 1 == path.len() {
                    obj.insert(seg.clone(), value.clone());
                    break;
                }
                node = obj
                    .entry(seg.clone())
                    .or_insert_with(|| serde_json::json!({}));
            }
            touched.push(k.as_ref().to_string());
        }
        if touched.is_empty() {
            return Ok(());
        }
        *self = serde_path_to_error::deserialize(tree).map_err(|e| ConfigError::Override {
            key: touched.join(","),
            message: format!("`{}`: {}", e.path(), e.inner()),
        })?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.matcher.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.reward.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.grpo.validate() {
            return invalid(e.to_string());
        }
        let t = &self.train;
        if t.grid == 0 {
            return invalid("train.grid must be >= 1".into());
        }
        if t.candidates < 2 {
            return invalid("train.candidates must be >= 2".into());
        }
        if !(0.0..1.0).contains(&t.eval_fraction) {
            return invalid("train.eval_fraction must lie in [0, 1)".into());
        }
        if self.captioner.kind == CaptionerKind::Http && self.captioner.endpoint.is_none() {
            return invalid("captioner.endpoint is required for the http captioner".into());
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = PipelineConfig::from_toml(
            "[reward]\nalpha = 0.7\n[train]\nseed = 9\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(c.reward.alpha, 0.7);
        assert_eq!(c.reward.beta, RewardConfig::default().beta);
        assert_eq!(c.train.seed, 9);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = PipelineConfig::from_toml("[reward]\nalpah = 1.0\n", Path::new("x.toml"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn env_overrides() {
        let mut c = PipelineConfig::default();
        c.apply_env([
            ("VIDEOR4_REWARD__ALPHA", "0.9"),
            ("VIDEOR4_PATHS__OUT", "/tmp/o"),
            ("VIDEOR4_TRAIN__PLAN", "plan.json"),
            ("HOME", "/root"),
        ])
        .unwrap();
        assert_eq!(c.reward.alpha, 0.9);
        assert_eq!(c.paths.out, PathBuf::from("/tmp/o"));
        assert_eq!(c.train.plan, Some(PathBuf::from("plan.json")));
        let mut bad = PipelineConfig::default();
        assert!(bad.apply_env([("VIDEOR4_REWARD__ALPHA", "lots")]).is_err());
        assert!(bad.apply_env([("VIDEOR4_REWARD__NOPE", "1")]).is_err());
    }

    #[test]
    fn validation_catches_nested_errors() {
        let mut c = PipelineConfig::default();
        c.grpo.clip_epsilon = 2.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.captioner.kind = CaptionerKind::Http;
        assert!(c.validate().is_err());
    }
}
