//! Composite rollout reward: correctness and format, plus diversity of
//! cropped regions, representativeness of the last clip, and a group-level
//! curiosity term.

use serde::{Deserialize, Serialize};

use crate::env::{EpisodeRecord, FeatureVector};
use crate::trajectory::validate::answer_matches;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("cosine distance of a zero vector")]
    ZeroVector,
    #[error("representativeness needs at least one frame")]
    NoFrames,
    #[error("rollout {index} out of range for a group of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no gold answers")]
    EmptyGolds,
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("group stats disagree: {used} usage flags, {counts} call counts")]
    LengthMismatch { used: usize, counts: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_div: f64,
    pub lambda_rep: f64,
    pub lambda_cur: f64,
    /// Bonus scale for under-used tools.
    pub alpha: f64,
    /// Per-call penalty beyond `call_limit`.
    pub beta: f64,
    /// Target tool-usage fraction H.
    pub usage_threshold: f64,
    /// Calls allowed before the linear penalty starts (N).
    pub call_limit: usize,
    pub format_bonus: f64,
    /// Representativeness of an empty last clip is `exp(-empty_clip_exponent)`.
    pub empty_clip_exponent: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_div: 1.0,
            lambda_rep: 1.0,
            lambda_cur: 1.0,
            alpha: 0.5,
            beta: 0.05,
            usage_threshold: 0.3,
            call_limit: 3,
            format_bonus: 0.5,
            empty_clip_exponent: 10.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let nonneg = [
            ("lambda_div", self.lambda_div),
            ("lambda_rep", self.lambda_rep),
            ("lambda_cur", self.lambda_cur),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("format_bonus", self.format_bonus),
            ("empty_clip_exponent", self.empty_clip_exponent),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RewardError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.usage_threshold) {
            return Err(RewardError::Config(format!(
                "usage_threshold must lie in [0, 1], got {}",
                self.usage_threshold
            )));
        }
        if self.call_limit == 0 {
            return Err(RewardError::Config("call_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub base: f64,
    pub diversity: f64,
    pub representativeness: f64,
    pub curiosity: f64,
    pub total: f64,
}

/// Tool usage across the K rollouts of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCallStats {
    used_tool: Vec<bool>,
    call_counts: Vec<usize>,
}

impl GroupCallStats {
    /// A rollout counts as using tools when it made at least one call.
    pub fn from_counts(call_counts: Vec<usize>) -> Self {
        Self {
            used_tool: call_counts.iter().map(|&c| c > 0).collect(),
            call_counts,
        }
    }

    pub fn new(used_tool: Vec<bool>, call_counts: Vec<usize>) -> Result<Self, RewardError> {
        if used_tool.len() != call_counts.len() {
            return Err(RewardError::LengthMismatch {
                used: used_tool.len(),
                counts: call_counts.len(),
            });
        }
        Ok(Self {
            used_tool,
            call_counts,
        })
    }

    pub fn from_episodes(episodes: &[EpisodeRecord]) -> Self {
        Self::from_counts(episodes.iter().map(|e| e.state.tool_call_count()).collect())
    }

    pub fn k(&self) -> usize {
        self.call_counts.len()
    }

    pub fn usage_fraction(&self) -> f64 {
        self.used_tool.iter().filter(|&&u| u).count() as f64 / self.k() as f64
    }
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &FeatureVector, v: &FeatureVector) -> Result<f64, RewardError> {
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(RewardError::ZeroVector);
    }
    let cos = (u.dot(v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Mean cosine distance over ordered pairs of distinct regions; 0 for fewer
/// than two regions.
pub fn diversity_reward(regions: &[FeatureVector]) -> Result<f64, RewardError> {
    let n = regions.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, u) in regions.iter().enumerate() {
        for (j, v) in regions.iter().enumerate() {
            if i != j {
                sum += cosine_distance(u, v)?;
            }
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// `exp(-mean_i min_j ‖v_i - v_j‖)` with `v_i` over all frames and `v_j` over
/// the last clip.
pub fn representativeness_reward(
    all_frames: &[FeatureVector],
    last_clip: &[&FeatureVector],
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    if all_frames.is_empty() {
        return Err(RewardError::NoFrames);
    }
    if last_clip.is_empty() {
        return Ok((-cfg.empty_clip_exponent).exp());
    }
    let total: f64 = all_frames
        .iter()
        .map(|v| {
            last_clip
                .iter()
                .map(|c| v.distance(c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok((-total / all_frames.len() as f64).exp())
}

/// Bonus for calling tools while the group under-uses them, minus a linear
/// penalty for calls beyond the limit.
pub fn curiosity_reward(
    stats: &GroupCallStats,
    i: usize,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    if i >= stats.k() {
        return Err(RewardError::IndexOutOfRange {
            index: i,
            len: stats.k(),
        });
    }
    let bonus = if stats.used_tool[i] {
        cfg.alpha * (cfg.usage_threshold - stats.usage_fraction()).max(0.0)
    } else {
        0.0
    };
    let excess = stats.call_counts[i].saturating_sub(cfg.call_limit);
    Ok(bonus - cfg.beta * excess as f64)
}

/// Exact match against any gold (1 or 0) plus the format bonus.
pub fn base_reward<S: AsRef<str>>(
    episode: &EpisodeRecord,
    golds: &[S],
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::EmptyGolds);
    }
    let correct = if answer_matches(&episode.final_answer, golds) {
        1.0
    } else {
        0.0
    };
    let format = if episode.format_ok {
        cfg.format_bonus
    } else {
        0.0
    };
    Ok(correct + format)
}

/// Breakdowns for every rollout of one group. Curiosity uses the group's own
/// call statistics.
pub fn total_reward<S: AsRef<str>>(
    episodes: &[EpisodeRecord],
    golds: &[S],
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    if episodes.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let stats = GroupCallStats::from_episodes(episodes);
    episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let base = base_reward(ep, golds, cfg)?;
            let diversity = diversity_reward(ep.state.selected_region_features())?;
            let representativeness = representativeness_reward(
                ep.state.all_frame_features(),
                &ep.state.last_clip_features(),
                cfg,
            )?;
            let curiosity = curiosity_reward(&stats, i, cfg)?;
            let total = base
                + cfg.lambda_div * diversity
                + cfg.lambda_rep * representativeness
                + cfg.lambda_cur * curiosity;
            Ok(RewardBreakdown {
                base,
                diversity,
                representativeness,
                curiosity,
                total,
            })
        })
        .collect()
}

/// One line of the reward audit dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardAuditRecord {
    pub stage: String,
    pub step: usize,
    pub instance_id: String,
    pub breakdowns: Vec<RewardBreakdown>,
}
