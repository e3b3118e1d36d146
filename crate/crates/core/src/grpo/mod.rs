//! Group-relative policy optimization over small differentiable policies.
//!
//! Advantages are rewards normalized within a rollout group. The surrogate
//! is the clipped importance-ratio objective with a KL penalty towards a
//! reference policy, evaluated exactly by enumerating the episode space.

pub mod checkpoint;
pub mod curriculum;
pub mod toy;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use curriculum::{
    run_schedule, run_stage, CurriculumData, ScheduleReport, StageKind, StagePlan, StageReport,
    StageSpec,
};
pub use toy::{ToyAction, ToySoftmaxPolicy, ToyTask};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GrpoError {
    #[error("group of {0} rollouts; advantages need at least 2")]
    GroupTooSmall(usize),
    #[error("group has {episodes} episodes but {advantages} advantages")]
    ShapeMismatch { episodes: usize, advantages: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("action {action} is not available at step {step}")]
    InvalidAction { step: usize, action: String },
    #[error("episode does not terminate in an answer")]
    Unterminated,
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error("parameter vectors differ in length: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    /// Rollouts per query (G).
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// KL penalty weight (γ).
    pub kl_coef: f64,
    /// Below this reward std a group carries no signal.
    pub advantage_epsilon: f64,
    pub learning_rate: f64,
    /// Gradient steps taken on each sampled batch before resampling.
    pub updates_per_batch: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_coef: 0.04,
            advantage_epsilon: 1e-8,
            learning_rate: 1e-6,
            updates_per_batch: 2,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::Config(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return Err(GrpoError::Config(format!(
                "kl_coef must be >= 0, got {}",
                self.kl_coef
            )));
        }
        if !(self.advantage_epsilon.is_finite() && self.advantage_epsilon >= 0.0) {
            return Err(GrpoError::Config("advantage_epsilon must be >= 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GrpoError::Config("learning_rate must be > 0".into()));
        }
        if self.updates_per_batch == 0 {
            return Err(GrpoError::Config("updates_per_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(R_i - mean) / std` with the population std; all zeros when the std
/// falls below `advantage_epsilon`.
pub fn group_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < cfg.advantage_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// A policy over whole episodes (action sequences) given a context.
pub trait Policy: Clone {
    type Context;
    type Action: Clone + PartialEq + std::fmt::Debug;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn log_prob(&self, ctx: &Self::Context, episode: &[Self::Action]) -> Result<f64, GrpoError>;
    fn grad_log_prob(
        &self,
        ctx: &Self::Context,
        episode: &[Self::Action],
    ) -> Result<Vec<f64>, GrpoError>;
    fn sample(&self, ctx: &Self::Context, rng: &mut dyn RngCore) -> Vec<Self::Action>;

    /// Every episode the policy can produce for `ctx`.
    fn episodes(&self, ctx: &Self::Context) -> Vec<Vec<Self::Action>>;

    /// `KL(self ‖ reference)` over whole episodes and its gradient in
    /// `self`'s parameters, by enumeration.
    fn kl_divergence(
        &self,
        reference: &Self,
        ctx: &Self::Context,
    ) -> Result<(f64, Vec<f64>), GrpoError> {
        let mut kl = 0.0;
        let mut grad = vec![0.0; self.params().len()];
        for ep in self.episodes(ctx) {
            let lp = self.log_prob(ctx, &ep)?;
            let lr = reference.log_prob(ctx, &ep)?;
            let p = lp.exp();
            kl += p * (lp - lr);
            let g = self.grad_log_prob(ctx, &ep)?;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += p * (lp - lr) * gi;
            }
        }
        Ok((kl, grad))
    }
}

/// `π_θ(o) / π_θold(o)` for a whole episode.
pub fn importance_ratio<P: Policy>(
    policy: &P,
    old: &P,
    ctx: &P::Context,
    episode: &[P::Action],
) -> Result<f64, GrpoError> {
    let lp = policy.log_prob(ctx, episode)?;
    let lo = old.log_prob(ctx, episode)?;
    if !(lp.is_finite() && lo.is_finite()) {
        return Err(GrpoError::NonFinite("log-probability"));
    }
    Ok((lp - lo).exp())
}

/// Sampled episodes for one query and their advantages.
#[derive(Clone, Debug)]
pub struct Group<'a, C, A> {
    pub context: &'a C,
    pub episodes: Vec<Vec<A>>,
    pub advantages: Vec<f64>,
}

/// The clipped surrogate minus the KL penalty, and its exact gradient.
///
/// Each term is `min(r A, clip(r, 1-ε, 1+ε) A)`. When the clipped branch
/// is strictly smaller it is constant in θ and contributes no gradient.
pub fn grpo_objective<P: Policy>(
    groups: &[Group<'_, P::Context, P::Action>],
    policy: &P,
    old: &P,
    reference: &P,
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>), GrpoError> {
    let dim = policy.params().len();
    for other in [old, reference] {
        if other.params().len() != dim {
            return Err(GrpoError::DimensionMismatch(dim, other.params().len()));
        }
    }
    if groups.is_empty() {
        return Ok((0.0, vec![0.0; dim]));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; dim];
    let scale = 1.0 / groups.len() as f64;
    for group in groups {
        let g = group.episodes.len();
        if g == 0 || g != group.advantages.len() {
            return Err(GrpoError::ShapeMismatch {
                episodes: g,
                advantages: group.advantages.len(),
            });
        }
        let per = scale / g as f64;
        for (ep, &adv) in group.episodes.iter().zip(&group.advantages) {
            let r = importance_ratio(policy, old, group.context, ep)?;
            let unclipped = r * adv;
            let clipped = r.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
            value += per * unclipped.min(clipped);
            if unclipped <= clipped {
                let gl = policy.grad_log_prob(group.context, ep)?;
                for (acc, gi) in grad.iter_mut().zip(gl) {
                    *acc += per * adv * r * gi;
                }
            }
        }
        if cfg.kl_coef != 0.0 {
            let (kl, gkl) = policy.kl_divergence(reference, group.context)?;
            value -= scale * cfg.kl_coef * kl;
            for (acc, gi) in grad.iter_mut().zip(gkl) {
                *acc -= scale * cfg.kl_coef * gi;
            }
        }
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(GrpoError::NonFinite("objective"));
    }
    Ok((value, grad))
}

/// Mean negative log-probability per demonstrated action, and its gradient.
pub fn sft_loss<P: Policy>(
    policy: &P,
    ctx: &P::Context,
    demo: &[P::Action],
) -> Result<(f64, Vec<f64>), GrpoError> {
    if demo.is_empty() {
        return Err(GrpoError::Unterminated);
    }
    let t = demo.len() as f64;
    let lp = policy.log_prob(ctx, demo)?;
    let grad = policy
        .grad_log_prob(ctx, demo)?
        .into_iter()
        .map(|g| -g / t)
        .collect();
    Ok((-lp / t, grad))
}
