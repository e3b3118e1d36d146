//! Staged training of the toy policy.
//!
//! Four stages run in a fixed order: single-tool imitation, RL on all
//! questions with accuracy and curiosity rewards, mixed-tool imitation, and
//! RL on video questions with the full shaped reward. Any subsequence of the
//! stages is a valid plan, which is how ablations are expressed. Each RL
//! stage anchors its KL penalty to the policy it started from.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::{build_tasks, TaskError, ToyAction, ToySoftmaxPolicy, ToyTask};
use super::{group_advantages, grpo_objective, sft_loss, Group, GrpoConfig, GrpoError, Policy};
use crate::corpus::{Corpus, CorpusError};
use crate::env::{run_trajectory, EnvError, PooledEncoder, DEFAULT_MAX_CALLS};
use crate::evidence::{match_question, MatchError, MatcherConfig};
use crate::reward::{total_reward, RewardBreakdown, RewardConfig, RewardError};
use crate::trajectory::{
    fill_placeholders, render_trajectory, validate_trajectory, FillError, RenderError,
    StubCaptioner, TemplateId, ToolComposition,
};

#[derive(Debug, thiserror::Error)]
pub enum CurriculumError {
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Fill(#[from] FillError),
    #[error("demo `{0}` failed validation: {1}")]
    InvalidDemo(String, String),
    #[error("invalid stage plan: {0}")]
    Plan(String),
    #[error("stage {stage}: {message}")]
    Filter { stage: StageKind, message: String },
    #[error("stage {0} has no training data")]
    NoData(StageKind),
    #[error("reading plan {path}: {message}")]
    PlanFile { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    DrpSft,
    RlD,
    CrpSft,
    RlC,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::DrpSft,
        StageKind::RlD,
        StageKind::CrpSft,
        StageKind::RlC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::DrpSft => "drp_sft",
            StageKind::RlD => "rl_d",
            StageKind::CrpSft => "crp_sft",
            StageKind::RlC => "rl_c",
        }
    }

    /// Position in the canonical order.
    pub fn order(self) -> usize {
        self as usize
    }

    pub fn objective(self) -> Objective {
        match self {
            StageKind::DrpSft | StageKind::CrpSft => Objective::Sft,
            StageKind::RlD | StageKind::RlC => Objective::Grpo,
        }
    }

    pub fn filter(self) -> DataFilter {
        match self {
            StageKind::DrpSft => DataFilter::SingleTool,
            StageKind::CrpSft => DataFilter::Mixed,
            StageKind::RlD | StageKind::RlC => DataFilter::Instances,
        }
    }

    /// Reward used while training this stage. The first RL stage scores
    /// accuracy and curiosity only.
    pub fn reward_config(self) -> RewardConfig {
        match self {
            StageKind::RlD => RewardConfig {
                lambda_div: 0.0,
                lambda_rep: 0.0,
                ..RewardConfig::default()
            },
            _ => RewardConfig::default(),
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sft,
    Grpo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFilter {
    /// Demonstrations using exactly one tool kind.
    SingleTool,
    /// Demonstrations using both tools.
    Mixed,
    /// Raw questions for on-policy rollouts.
    Instances,
}

impl DataFilter {
    pub fn admits(self, composition: ToolComposition) -> bool {
        match self {
            DataFilter::SingleTool => matches!(
                composition,
                ToolComposition::ClipOnly | ToolComposition::CropOnly
            ),
            DataFilter::Mixed => composition == ToolComposition::Mixed,
            DataFilter::Instances => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: StageKind,
    pub filter: DataFilter,
    pub objective: Objective,
    pub steps: usize,
    /// Step size on the toy parameters. Far larger than a language-model
    /// rate because the policy has a dozen weights.
    pub learning_rate: f64,
    /// Questions per RL step; ignored by imitation stages, which use every
    /// demonstration each step.
    pub batch_size: usize,
}

impl StageSpec {
    pub fn new(stage: StageKind, steps: usize, learning_rate: f64, batch_size: usize) -> Self {
        Self {
            stage,
            filter: stage.filter(),
            objective: stage.objective(),
            steps,
            learning_rate,
            batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
    pub seed: u64,
    #[serde(default)]
    pub grpo: GrpoConfig,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::full(0)
    }
}

impl StagePlan {
    /// All four stages with the default step counts.
    pub fn full(seed: u64) -> Self {
        Self::only(&StageKind::ALL, seed)
    }

    /// A subsequence of the default plan.
    pub fn only(kinds: &[StageKind], seed: u64) -> Self {
        let stages = kinds
            .iter()
            .map(|&k| match k {
                StageKind::DrpSft => StageSpec::new(k, 30, 0.5, 0),
                StageKind::RlD => StageSpec::new(k, 25, 0.5, 4),
                StageKind::CrpSft => StageSpec::new(k, 30, 0.5, 0),
                StageKind::RlC => StageSpec::new(k, 25, 0.5, 4),
            })
            .collect();
        Self {
            stages,
            seed,
            grpo: GrpoConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CurriculumError> {
        let err = |message: String| CurriculumError::PlanFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let plan: Self = serde_path_to_error::deserialize(de).map_err(|e| err(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.stages.is_empty() {
            return Err(CurriculumError::Plan("no stages".into()));
        }
        self.grpo.validate()?;
        for pair in self.stages.windows(2) {
            if pair[0].stage.order() >= pair[1].stage.order() {
                return Err(CurriculumError::Plan(format!(
                    "{} cannot follow {}; stages run in the order drp_sft, rl_d, crp_sft, rl_c",
                    pair[1].stage, pair[0].stage
                )));
            }
        }
        for s in &self.stages {
            if s.filter != s.stage.filter() || s.objective != s.stage.objective() {
                return Err(CurriculumError::Plan(format!(
                    "stage {} needs filter {:?} and objective {:?}",
                    s.stage,
                    s.stage.filter(),
                    s.stage.objective()
                )));
            }
            if !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(CurriculumError::Plan(format!(
                    "stage {} learning rate must be > 0",
                    s.stage
                )));
            }
            if s.objective == Objective::Grpo && s.batch_size == 0 {
                return Err(CurriculumError::Plan(format!(
                    "stage {} batch size must be >= 1",
                    s.stage
                )));
            }
        }
        Ok(())
    }
}

/// A validated synthesized trajectory mapped onto toy actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub trajectory_id: String,
    /// Index into [`CurriculumData::tasks`].
    pub task: usize,
    pub composition: ToolComposition,
    pub actions: Vec<ToyAction>,
}

/// Tasks, demonstrations and the per-stage question pools.
#[derive(Clone, Debug)]
pub struct CurriculumData {
    pub tasks: Vec<ToyTask>,
    pub demos: Vec<Demo>,
    /// Matched training questions, images and videos.
    pub rl_d: Vec<usize>,
    /// Matched training questions over multi-frame videos.
    pub rl_c: Vec<usize>,
    /// Held-out multi-frame questions.
    pub eval: Vec<usize>,
}

impl CurriculumData {
    /// Builds tasks for every instance and synthesizes demonstrations for the
    /// matched training ones. Instances in `eval_ids` get no demos and never
    /// enter an RL pool.
    pub fn build(
        corpus: &Corpus,
        matcher: &MatcherConfig,
        grid: u32,
        n_candidates: usize,
        seed: u64,
        eval_ids: &BTreeSet<String>,
    ) -> Result<Self, CurriculumError> {
        let tasks = build_tasks(corpus, grid, n_candidates, seed)?;
        let mut data = Self {
            tasks: Vec::new(),
            demos: Vec::new(),
            rl_d: Vec::new(),
            rl_c: Vec::new(),
            eval: Vec::new(),
        };
        for (i, (task, q)) in tasks.iter().zip(corpus.instances()).enumerate() {
            let is_video = !task.is_image();
            if eval_ids.contains(&q.id) {
                if is_video {
                    data.eval.push(i);
                }
                continue;
            }
            let ev = match_question(q, corpus, matcher)?;
            if !ev.matched {
                continue;
            }
            data.rl_d.push(i);
            let mut templates = vec![if is_video {
                TemplateId::ClipOnly
            } else {
                TemplateId::CropOnly
            }];
            if is_video {
                data.rl_c.push(i);
                templates.push(TemplateId::LocateRead);
            }
            let video = corpus.video_of(q)?;
            for template in templates {
                let raw = render_trajectory(&ev, q, template)?;
                let filled = fill_placeholders(&raw, q, video, &StubCaptioner)?;
                let report = validate_trajectory(&filled, corpus, &ev);
                if !report.is_valid() {
                    return Err(CurriculumError::InvalidDemo(
                        filled.id.clone(),
                        format!("{:?}", report.violations),
                    ));
                }
                let actions = task.actions_from_trajectory(&filled)?;
                data.demos.push(Demo {
                    trajectory_id: filled.id.clone(),
                    task: i,
                    composition: filled.composition(),
                    actions,
                });
            }
        }
        data.tasks = tasks;
        Ok(data)
    }

    /// Training data for one stage of the plan.
    pub fn stage_data(&self, stage: StageKind) -> StageData<'_> {
        match stage.filter() {
            DataFilter::Instances => {
                let pool = if stage == StageKind::RlD {
                    &self.rl_d
                } else {
                    &self.rl_c
                };
                StageData::Tasks(pool.iter().map(|&i| &self.tasks[i]).collect())
            }
            filter => StageData::Demos(
                self.demos
                    .iter()
                    .filter(|d| filter.admits(d.composition))
                    .map(|d| (&self.tasks[d.task], d))
                    .collect(),
            ),
        }
    }

    pub fn eval_tasks(&self) -> Vec<&ToyTask> {
        self.eval.iter().map(|&i| &self.tasks[i]).collect()
    }
}

pub enum StageData<'a> {
    Demos(Vec<(&'a ToyTask, &'a Demo)>),
    Tasks(Vec<&'a ToyTask>),
}

/// Fractions of rollouts that clipped or cropped at least once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolUsage {
    pub clip_fraction: f64,
    pub crop_fraction: f64,
    pub mean_calls: f64,
}

impl ToolUsage {
    fn of(episodes: &[Vec<ToyAction>]) -> Self {
        if episodes.is_empty() {
            return Self::default();
        }
        let n = episodes.len() as f64;
        let has = |f: fn(&ToyAction) -> bool| {
            episodes.iter().filter(|e| e.iter().any(f)).count() as f64 / n
        };
        Self {
            clip_fraction: has(|a| matches!(a, ToyAction::Clip { .. })),
            crop_fraction: has(|a| matches!(a, ToyAction::Crop { .. })),
            mean_calls: episodes
                .iter()
                .map(|e| e.iter().filter(|a| !a.is_answer()).count())
                .sum::<usize>() as f64
                / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageKind,
    pub objective: Objective,
    pub steps: usize,
    /// Imitation loss, or the negated surrogate on each RL batch.
    pub loss_curve: Vec<f64>,
    /// Mean shaped reward of each RL batch; empty for imitation.
    pub reward_curve: Vec<f64>,
    /// Tool use of the policy at the end of the stage on its own data.
    pub tool_usage: ToolUsage,
    pub params: Vec<f64>,
}

/// Rollout results of a policy on held-out questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub tasks: usize,
    pub rollouts: usize,
    /// Mean total shaped reward under the default reward weights.
    pub mean_reward: f64,
    pub accuracy: f64,
    pub tool_usage: ToolUsage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub eval: EvalSummary,
    pub grpo: GrpoConfig,
    pub eval_reward: RewardConfig,
    pub params: Vec<f64>,
}

/// Executes sampled episodes in the rumination environment and scores them
/// as one group.
pub fn score_group(
    task: &ToyTask,
    episodes: &[Vec<ToyAction>],
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>, CurriculumError> {
    let encoder = PooledEncoder::default();
    let records = episodes
        .iter()
        .enumerate()
        .map(|(k, ep)| {
            let t = task.to_trajectory(&format!("{}-r{k}", task.instance_id), ep);
            run_trajectory(&t, &task.video, &encoder, DEFAULT_MAX_CALLS)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(total_reward(&records, &task.golds, cfg)?)
}

fn stage_rng(seed: u64, stage: StageKind) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(stage.order() as u64))
}

/// Runs one stage, updating `policy` in place.
pub fn run_stage(
    spec: &StageSpec,
    policy: &mut ToySoftmaxPolicy,
    data: StageData<'_>,
    grpo: &GrpoConfig,
    seed: u64,
) -> Result<StageReport, CurriculumError> {
    if spec.filter != spec.stage.filter() || spec.objective != spec.stage.objective() {
        return Err(CurriculumError::Filter {
            stage: spec.stage,
            message: format!(
                "expects filter {:?} with objective {:?}",
                spec.stage.filter(),
                spec.stage.objective()
            ),
        });
    }
    let mut rng = stage_rng(seed, spec.stage);
    let mut loss_curve = Vec::with_capacity(spec.steps);
    let mut reward_curve = Vec::new();
    let usage;
    match (spec.objective, data) {
        (Objective::Sft, StageData::Demos(demos)) => {
            if let Some((_, d)) = demos
                .iter()
                .find(|(_, d)| !spec.filter.admits(d.composition))
            {
                return Err(CurriculumError::Filter {
                    stage: spec.stage,
                    message: format!(
                        "demo `{}` is {:?}, outside filter {:?}",
                        d.trajectory_id, d.composition, spec.filter
                    ),
                });
            }
            if demos.is_empty() {
                return Err(CurriculumError::NoData(spec.stage));
            }
            let n = demos.len() as f64;
            let mean_loss = |p: &ToySoftmaxPolicy| -> Result<(f64, Vec<f64>), GrpoError> {
                let mut loss = 0.0;
                let mut grad = vec![0.0; p.params().len()];
                for (task, d) in &demos {
                    let (l, g) = sft_loss(p, task, &d.actions)?;
                    loss += l / n;
                    for (acc, x) in grad.iter_mut().zip(g) {
                        *acc += x / n;
                    }
                }
                Ok((loss, grad))
            };
            for _ in 0..spec.steps {
                let (loss, grad) = mean_loss(policy)?;
                loss_curve.push(loss);
                for (t, g) in policy.params_mut().iter_mut().zip(grad) {
                    *t -= spec.learning_rate * g;
                }
            }
            let samples: Vec<_> = demos
                .iter()
                .flat_map(|(task, _)| {
                    (0..grpo.group_size)
                        .map(|_| policy.sample(task, &mut rng))
                        .collect::<Vec<_>>()
                })
                .collect();
            usage = ToolUsage::of(&samples);
        }
        (Objective::Grpo, StageData::Tasks(tasks)) => {
            if tasks.is_empty() {
                return Err(CurriculumError::NoData(spec.stage));
            }
            let reward_cfg = spec.stage.reward_config();
            let reference = policy.clone();
            let mut last = Vec::new();
            for _ in 0..spec.steps {
                let old = policy.clone();
                let batch: Vec<&ToyTask> = (0..spec.batch_size)
                    .map(|_| *tasks.choose(&mut rng).expect("pool is nonempty"))
                    .collect();
                let mut groups = Vec::with_capacity(batch.len());
                let mut reward_sum = 0.0;
                last.clear();
                for task in batch {
                    let episodes: Vec<_> = (0..grpo.group_size)
                        .map(|_| old.sample(task, &mut rng))
                        .collect();
                    let rewards: Vec<f64> = score_group(task, &episodes, &reward_cfg)?
                        .iter()
                        .map(|b| b.total)
                        .collect();
                    reward_sum += rewards.iter().sum::<f64>();
                    let advantages = group_advantages(&rewards, grpo)?;
                    last.extend(episodes.iter().cloned());
                    groups.push(Group {
                        context: task,
                        episodes,
                        advantages,
                    });
                }
                reward_curve.push(reward_sum / (groups.len() * grpo.group_size) as f64);
                let mut first = None;
                for _ in 0..grpo.updates_per_batch {
                    let (value, grad) = grpo_objective(&groups, policy, &old, &reference, grpo)?;
                    first.get_or_insert(-value);
                    for (t, g) in policy.params_mut().iter_mut().zip(grad) {
                        *t += spec.learning_rate * g;
                    }
                }
                loss_curve.push(first.unwrap_or(0.0));
            }
            usage = ToolUsage::of(&last);
        }
        (objective, _) => {
            return Err(CurriculumError::Filter {
                stage: spec.stage,
                message: format!("{objective:?} stage was given the wrong kind of data"),
            })
        }
    }
    Ok(StageReport {
        stage: spec.stage,
        objective: spec.objective,
        steps: spec.steps,
        loss_curve,
        reward_curve,
        tool_usage: usage,
        params: policy.params().to_vec(),
    })
}

/// Samples `group_size` rollouts per task and scores them under `cfg`.
pub fn evaluate_policy(
    policy: &ToySoftmaxPolicy,
    tasks: &[&ToyTask],
    group_size: usize,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<EvalSummary, CurriculumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::new();
    let (mut reward, mut correct) = (0.0, 0usize);
    for task in tasks {
        let episodes: Vec<_> = (0..group_size)
            .map(|_| policy.sample(task, &mut rng))
            .collect();
        for b in score_group(task, &episodes, cfg)? {
            reward += b.total;
        }
        let right = task.correct_candidates();
        correct += episodes
            .iter()
            .filter(|e| matches!(e.last(), Some(ToyAction::Answer { candidate }) if right.contains(candidate)))
            .count();
        all.extend(episodes);
    }
    let n = all.len().max(1) as f64;
    Ok(EvalSummary {
        tasks: tasks.len(),
        rollouts: all.len(),
        mean_reward: reward / n,
        accuracy: correct as f64 / n,
        tool_usage: ToolUsage::of(&all),
    })
}

/// Runs every stage of `plan` from `initial`, then evaluates the result on
/// the held-out questions.
pub fn run_schedule(
    plan: &StagePlan,
    data: &CurriculumData,
    initial: ToySoftmaxPolicy,
) -> Result<(ToySoftmaxPolicy, ScheduleReport), CurriculumError> {
    plan.validate()?;
    let mut policy = initial;
    let mut stages = Vec::with_capacity(plan.stages.len());
    for spec in &plan.stages {
        stages.push(run_stage(
            spec,
            &mut policy,
            data.stage_data(spec.stage),
            &plan.grpo,
            plan.seed,
        )?);
    }
    let eval_reward = RewardConfig::default();
    let eval = evaluate_policy(
        &policy,
        &data.eval_tasks(),
        plan.grpo.group_size,
        &eval_reward,
        plan.seed ^ 0x5eed,
    )?;
    let report = ScheduleReport {
        seed: plan.seed,
        stages,
        eval,
        grpo: plan.grpo.clone(),
        eval_reward,
        params: policy.params().to_vec(),
    };
    Ok((policy, report))
}
