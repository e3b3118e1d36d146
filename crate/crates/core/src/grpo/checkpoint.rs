//! Plain-text policy checkpoints.
//!
//! A short `key value` header followed by one parameter per line. Values are
//! written with Rust's shortest round-trip formatting, so reading a
//! checkpoint back yields bit-identical parameters.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

const MAGIC: &str = "videor4-checkpoint v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Last completed stage, or `init`.
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MAGIC}\ndim {}\nstage {}\nstep {}\nseed {}\n",
            self.params.len(),
            self.stage,
            self.step,
            self.seed
        );
        for p in &self.params {
            let _ = writeln!(out, "{p}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let err = |line: usize, message: String| CheckpointError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, format!("expected `{MAGIC}`"))),
        }
        let mut field = |key: &str| -> Result<(usize, String), CheckpointError> {
            let (n, l) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing `{key}`")))?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(|v| (n, v.to_string()))
                .ok_or_else(|| err(n, format!("expected `{key} <value>`")))
        };
        let num =
            |(n, v): (usize, String)| v.parse::<u64>().map_err(|e| err(n, format!("`{v}`: {e}")));
        let dim = num(field("dim")?)? as usize;
        let (_, stage) = field("stage")?;
        let step = num(field("step")?)? as usize;
        let seed = num(field("seed")?)?;
        let params = lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                let v: f64 = l
                    .trim()
                    .parse()
                    .map_err(|e| err(n, format!("`{l}`: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(n, "non-finite parameter".into()))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if params.len() != dim {
            return Err(err(
                0,
                format!("header says {dim} parameters, found {}", params.len()),
            ));
        }
        Ok(Self {
            stage,
            step,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_text()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let c = Checkpoint {
            stage: "rl_c".into(),
            step: 25,
            seed: 7,
            params: vec![0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, 0.0, -0.0],
        };
        let back = Checkpoint::parse(&c.to_text()).unwrap();
        assert_eq!(back.stage, c.stage);
        for (a, b) in c.params.iter().zip(&back.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("policy.ckpt");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Checkpoint::parse("nope").is_err());
        let short = format!("{MAGIC}\ndim 2\nstage init\nstep 0\nseed 0\n1.0\n");
        assert!(Checkpoint::parse(&short).is_err());
        let nan = format!("{MAGIC}\ndim 1\nstage init\nstep 0\nseed 0\nNaN\n");
        assert!(Checkpoint::parse(&nan).is_err());
    }
}
