//! A log-linear softmax policy over clip/crop/answer actions on gridded
//! videos.
//!
//! Frames are split into `grid × grid` cells. An episode is at most
//! [`MAX_TOOL_STEPS`] tool actions followed by an answer. Clipping a window
//! reveals which of its cells are salient; cropping a cell that holds an OCR
//! token reads that token. Action logits are `θ · φ(state, action)` with the
//! hand-built features listed on [`FEATURE_NAMES`].

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GrpoError, Policy};
use crate::corpus::{crop_pixels, Corpus, CorpusError, OcrLevel, QAInstance, Video};
use crate::evidence::text::normalize_answer;
use crate::synthetic::{cell_box, cell_of, WORDS};
use crate::trajectory::{Provenance, ToolCall, Trajectory, Turn};

pub const FEATURE_DIM: usize = 12;
pub const MAX_TOOL_STEPS: usize = 2;
/// Pixel std above which a cell counts as salient.
pub const SALIENT_STD: f64 = 30.0;

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "clip",
    "clip_coverage",
    "reclip",
    "crop",
    "crop_seen_salient",
    "crop_seen_plain",
    "crop_repeat",
    "answer",
    "answer_matches_read",
    "answer_unread",
    "answer_contradicts_read",
    "clip_after_crop",
];

type Features = [f64; FEATURE_DIM];

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("video `{video}` frames ({width}x{height}) do not split into a {grid}x{grid} grid")]
    Grid {
        video: String,
        width: u32,
        height: u32,
        grid: u32,
    },
    #[error("trajectory `{trajectory}` has no toy-action equivalent: {message}")]
    Unmappable { trajectory: String, message: String },
    #[error("need at least {needed} candidate answers, vocabulary has {available}")]
    Vocabulary { needed: usize, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyAction {
    /// Frames `start..=end`.
    Clip {
        start: usize,
        end: usize,
    },
    Crop {
        frame: usize,
        cell: usize,
    },
    Answer {
        candidate: usize,
    },
}

impl ToyAction {
    pub fn is_answer(&self) -> bool {
        matches!(self, ToyAction::Answer { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ReadText {
    text: String,
    /// Candidate answer equal to the text, if any.
    candidate: Option<usize>,
}

/// One question over a gridded video, with a fixed candidate answer list.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub instance_id: String,
    pub video: Video,
    pub golds: Vec<String>,
    pub candidates: Vec<String>,
    pub grid: u32,
    salient: Vec<Vec<bool>>,
    reads: Vec<Vec<Option<ReadText>>>,
    actions: Vec<ToyAction>,
    first_answer: usize,
}

impl ToyTask {
    pub fn new(
        video: &Video,
        instance: &QAInstance,
        grid: u32,
        candidates: Vec<String>,
    ) -> Result<Self, TaskError> {
        let frames = video.frames();
        let first = frames.first().ok_or(CorpusError::FrameOutOfRange {
            video: video.id().to_string(),
            index: 0,
            count: 0,
        })?;
        let (w, h) = (first.width(), first.height());
        let bad_grid = grid == 0
            || w % grid != 0
            || h % grid != 0
            || frames.iter().any(|f| f.width() != w || f.height() != h);
        if bad_grid {
            return Err(TaskError::Grid {
                video: video.id().to_string(),
                width: w,
                height: h,
                grid,
            });
        }
        let cells = (grid * grid) as usize;
        let norm_candidates: Vec<String> = candidates.iter().map(|c| normalize_answer(c)).collect();
        let mut salient = Vec::with_capacity(frames.len());
        let mut reads = Vec::with_capacity(frames.len());
        for (f, frame) in frames.iter().enumerate() {
            let ann = video.annotation(f)?;
            let mut s_row = Vec::with_capacity(cells);
            let mut r_row = Vec::with_capacity(cells);
            for c in 0..cells {
                let b = cell_box(w, h, grid, c);
                let region = crop_pixels(frame, &b)?;
                let px = region.pixels();
                let mean = region.mean_intensity();
                let var = px
                    .iter()
                    .map(|&p| (f64::from(p) - mean).powi(2))
                    .sum::<f64>()
                    / px.len() as f64;
                s_row.push(var.sqrt() > SALIENT_STD);
                let read = ann
                    .ocr
                    .iter()
                    .filter(|d| d.level == OcrLevel::Token)
                    .find(|d| b.contains(&d.bbox))
                    .map(|d| {
                        let text = normalize_answer(&d.text);
                        let candidate = norm_candidates.iter().position(|c| *c == text);
                        ReadText { text, candidate }
                    });
                r_row.push(read);
            }
            salient.push(s_row);
            reads.push(r_row);
        }

        let n = frames.len();
        let mut actions = Vec::new();
        for start in 0..n {
            for end in start..n {
                actions.push(ToyAction::Clip { start, end });
            }
        }
        for frame in 0..n {
            for cell in 0..cells {
                actions.push(ToyAction::Crop { frame, cell });
            }
        }
        let first_answer = actions.len();
        actions.extend((0..candidates.len()).map(|candidate| ToyAction::Answer { candidate }));

        Ok(Self {
            instance_id: instance.id.clone(),
            video: video.clone(),
            golds: instance.answers.clone(),
            candidates,
            grid,
            salient,
            reads,
            actions,
            first_answer,
        })
    }

    pub fn frames(&self) -> usize {
        self.video.frame_count()
    }

    /// Single-frame tasks; their only frame is visible without clipping.
    pub fn is_image(&self) -> bool {
        self.frames() == 1
    }

    pub fn actions(&self) -> &[ToyAction] {
        &self.actions
    }

    /// Actions available at `step`: everything before the tool budget is
    /// spent, answers only afterwards.
    pub fn allowed(&self, step: usize) -> &[ToyAction] {
        if step < MAX_TOOL_STEPS {
            &self.actions
        } else {
            &self.actions[self.first_answer..]
        }
    }

    pub fn is_salient(&self, frame: usize, cell: usize) -> bool {
        self.salient[frame][cell]
    }

    /// Token text revealed by cropping a cell.
    pub fn read_at(&self, frame: usize, cell: usize) -> Option<&str> {
        self.reads[frame][cell].as_ref().map(|r| r.text.as_str())
    }

    pub fn correct_candidates(&self) -> Vec<usize> {
        let golds: Vec<String> = self.golds.iter().map(|g| normalize_answer(g)).collect();
        (0..self.candidates.len())
            .filter(|&k| golds.contains(&normalize_answer(&self.candidates[k])))
            .collect()
    }

    fn frame_dims(&self) -> (u32, u32) {
        let f = &self.video.frames()[0];
        (f.width(), f.height())
    }

    /// Renders an action sequence as an executable trajectory.
    pub fn to_trajectory(&self, id: &str, episode: &[ToyAction]) -> Trajectory {
        let (w, h) = self.frame_dims();
        let turns = episode
            .iter()
            .enumerate()
            .map(|(t, a)| match *a {
                ToyAction::Clip { start, end } => Turn::call(
                    format!("Step {t}: scan frames {start} to {end}."),
                    ToolCall::Clip {
                        frames: (start..=end).collect(),
                    },
                ),
                ToyAction::Crop { frame, cell } => Turn::call(
                    format!("Step {t}: zoom into cell {cell} of frame {frame}."),
                    ToolCall::Crop {
                        frame,
                        bbox: cell_box(w, h, self.grid, cell),
                    },
                ),
                ToyAction::Answer { candidate } => Turn::answer(
                    format!("Step {t}: answer."),
                    self.candidates[candidate].clone(),
                ),
            })
            .collect();
        Trajectory {
            id: id.to_string(),
            instance_id: self.instance_id.clone(),
            provenance: Provenance::ModelRollout,
            template: None,
            turns,
        }
    }

    /// Maps a trajectory onto toy actions: clips must be contiguous windows,
    /// crops map to the cell holding the box center, answers to a candidate.
    pub fn actions_from_trajectory(&self, t: &Trajectory) -> Result<Vec<ToyAction>, TaskError> {
        let fail = |message: String| TaskError::Unmappable {
            trajectory: t.id.clone(),
            message,
        };
        let (w, h) = self.frame_dims();
        let mut out = Vec::with_capacity(t.turns.len());
        for (i, turn) in t.turns.iter().enumerate() {
            let action = match (&turn.tool_call, &turn.final_answer) {
                (Some(ToolCall::Clip { frames }), None) => {
                    let start = *frames
                        .iter()
                        .min()
                        .ok_or_else(|| fail("empty clip".into()))?;
                    let end = *frames.iter().max().unwrap_or(&start);
                    let contiguous = frames.len() == end - start + 1
                        && frames.windows(2).all(|p| p[1] == p[0] + 1);
                    if !contiguous || end >= self.frames() {
                        return Err(fail(format!("turn {i}: clip {frames:?} is not a window")));
                    }
                    ToyAction::Clip { start, end }
                }
                (Some(ToolCall::Crop { frame, bbox }), None) => {
                    if *frame >= self.frames() || !bbox.fits_within(w, h) {
                        return Err(fail(format!("turn {i}: crop outside the video")));
                    }
                    let (cx, cy) = bbox.center();
                    ToyAction::Crop {
                        frame: *frame,
                        cell: cell_of(w, h, self.grid, cx, cy),
                    }
                }
                (None, Some(answer)) => {
                    let a = normalize_answer(answer);
                    let candidate = self
                        .candidates
                        .iter()
                        .position(|c| normalize_answer(c) == a)
                        .ok_or_else(|| fail(format!("answer `{answer}` is not a candidate")))?;
                    ToyAction::Answer { candidate }
                }
                _ => return Err(fail(format!("turn {i} is malformed"))),
            };
            out.push(action);
        }
        let tool_steps = out.iter().filter(|a| !a.is_answer()).count();
        if tool_steps > MAX_TOOL_STEPS {
            return Err(fail(format!(
                "{tool_steps} tool calls exceed the budget of {MAX_TOOL_STEPS}"
            )));
        }
        if !out.last().is_some_and(ToyAction::is_answer) {
            return Err(fail("no final answer".into()));
        }
        Ok(out)
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Builds a task per instance. Each gets its first gold answer plus
/// `n_candidates - 1` distractors drawn from the other answers and a fixed
/// word list, shuffled with a per-instance seed.
pub fn build_tasks(
    corpus: &Corpus,
    grid: u32,
    n_candidates: usize,
    seed: u64,
) -> Result<Vec<ToyTask>, TaskError> {
    let vocabulary: BTreeSet<String> = corpus
        .instances()
        .iter()
        .flat_map(|q| q.answers.iter().map(|a| normalize_answer(a)))
        .chain(WORDS.iter().map(|w| w.to_string()))
        .collect();
    corpus
        .instances()
        .iter()
        .map(|q| {
            let golds: BTreeSet<String> = q.answers.iter().map(|a| normalize_answer(a)).collect();
            let pool: Vec<&String> = vocabulary.iter().filter(|w| !golds.contains(*w)).collect();
            let needed = n_candidates.saturating_sub(1);
            if pool.len() < needed || n_candidates == 0 {
                return Err(TaskError::Vocabulary {
                    needed: n_candidates,
                    available: pool.len() + 1,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&q.id));
            let mut candidates: Vec<String> = pool
                .choose_multiple(&mut rng, needed)
                .map(|s| s.to_string())
                .collect();
            candidates.push(q.answers[0].clone());
            candidates.shuffle(&mut rng);
            ToyTask::new(corpus.video_of(q)?, q, grid, candidates)
        })
        .collect()
}

/// What the agent has observed so far within an episode.
#[derive(Clone, Debug)]
struct Progress {
    seen: Vec<bool>,
    clips: usize,
    crops: Vec<(usize, usize)>,
    /// Outer: something was read. Inner: the matching candidate.
    read: Option<Option<usize>>,
}

impl Progress {
    fn start(task: &ToyTask) -> Self {
        Self {
            seen: vec![task.is_image(); task.frames()],
            clips: 0,
            crops: Vec::new(),
            read: None,
        }
    }

    fn advance(&mut self, task: &ToyTask, a: &ToyAction) {
        match *a {
            ToyAction::Clip { start, end } => {
                for s in &mut self.seen[start..=end] {
                    *s = true;
                }
                self.clips += 1;
            }
            ToyAction::Crop { frame, cell } => {
                self.crops.push((frame, cell));
                if let Some(r) = &task.reads[frame][cell] {
                    self.read = Some(r.candidate);
                }
            }
            ToyAction::Answer { .. } => {}
        }
    }

    fn features(&self, task: &ToyTask, a: &ToyAction) -> Features {
        let mut phi = [0.0; FEATURE_DIM];
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        match *a {
            ToyAction::Clip { start, end } => {
                phi[0] = 1.0;
                phi[1] = (end - start + 1) as f64 / task.frames() as f64;
                phi[2] = flag(self.clips > 0);
                phi[11] = flag(!self.crops.is_empty());
            }
            ToyAction::Crop { frame, cell } => {
                phi[3] = 1.0;
                let seen = self.seen[frame];
                phi[4] = flag(seen && task.salient[frame][cell]);
                phi[5] = flag(seen && !task.salient[frame][cell]);
                phi[6] = flag(self.crops.contains(&(frame, cell)));
            }
            ToyAction::Answer { candidate } => {
                phi[7] = 1.0;
                match self.read {
                    None => phi[9] = 1.0,
                    Some(hit) if hit == Some(candidate) => phi[8] = 1.0,
                    Some(_) => phi[10] = 1.0,
                }
            }
        }
        phi
    }
}

fn dot(theta: &[f64], phi: &Features) -> f64 {
    theta.iter().zip(phi).map(|(t, p)| t * p).sum()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Per-step distribution: features of every allowed action, and their
/// log-probabilities under `theta`.
fn step_dist(
    theta: &[f64],
    task: &ToyTask,
    prog: &Progress,
    step: usize,
) -> (Vec<Features>, Vec<f64>) {
    let phis: Vec<Features> = task
        .allowed(step)
        .iter()
        .map(|a| prog.features(task, a))
        .collect();
    let logits: Vec<f64> = phis.iter().map(|p| dot(theta, p)).collect();
    let lp = log_softmax(&logits);
    (phis, lp)
}

fn expected(phis: &[Features], lp: &[f64]) -> Features {
    let mut m = [0.0; FEATURE_DIM];
    for (phi, l) in phis.iter().zip(lp) {
        let p = l.exp();
        for (acc, x) in m.iter_mut().zip(phi) {
            *acc += p * x;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySoftmaxPolicy {
    theta: Vec<f64>,
}

impl Default for ToySoftmaxPolicy {
    /// All-zero parameters: uniform over allowed actions at every step.
    fn default() -> Self {
        Self {
            theta: vec![0.0; FEATURE_DIM],
        }
    }
}

impl ToySoftmaxPolicy {
    pub fn new(theta: Vec<f64>) -> Result<Self, GrpoError> {
        if theta.len() != FEATURE_DIM {
            return Err(GrpoError::DimensionMismatch(FEATURE_DIM, theta.len()));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(GrpoError::NonFinite("parameters"));
        }
        Ok(Self { theta })
    }

    /// Walks `episode`, calling `visit` with each step's distribution and the
    /// position of the taken action in it.
    fn walk(
        &self,
        task: &ToyTask,
        episode: &[ToyAction],
        mut visit: impl FnMut(&[Features], &[f64], usize),
    ) -> Result<(), GrpoError> {
        let mut prog = Progress::start(task);
        for (step, a) in episode.iter().enumerate() {
            let pos = task
                .allowed(step)
                .iter()
                .position(|x| x == a)
                .ok_or_else(|| GrpoError::InvalidAction {
                    step,
                    action: format!("{a:?}"),
                })?;
            let (phis, lp) = step_dist(&self.theta, task, &prog, step);
            visit(&phis, &lp, pos);
            if a.is_answer() && step + 1 != episode.len() {
                return Err(GrpoError::InvalidAction {
                    step: step + 1,
                    action: "anything after the answer".into(),
                });
            }
            prog.advance(task, a);
        }
        if !episode.last().is_some_and(ToyAction::is_answer) {
            return Err(GrpoError::Unterminated);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn kl_walk(
        &self,
        reference: &Self,
        task: &ToyTask,
        prog: &Progress,
        step: usize,
        lp_acc: f64,
        lr_acc: f64,
        g_acc: &Features,
        kl: &mut f64,
        grad: &mut [f64],
    ) {
        let allowed = task.allowed(step);
        let (phis, lp) = step_dist(&self.theta, task, prog, step);
        let lr = log_softmax(
            &phis
                .iter()
                .map(|p| dot(&reference.theta, p))
                .collect::<Vec<_>>(),
        );
        let mean = expected(&phis, &lp);
        for (k, a) in allowed.iter().enumerate() {
            let lp2 = lp_acc + lp[k];
            let lr2 = lr_acc + lr[k];
            let mut g2 = *g_acc;
            for ((g, x), m) in g2.iter_mut().zip(&phis[k]).zip(&mean) {
                *g += x - m;
            }
            if a.is_answer() {
                let w = lp2.exp() * (lp2 - lr2);
                *kl += w;
                for (acc, g) in grad.iter_mut().zip(&g2) {
                    *acc += w * g;
                }
            } else {
                let mut next = prog.clone();
                next.advance(task, a);
                self.kl_walk(reference, task, &next, step + 1, lp2, lr2, &g2, kl, grad);
            }
        }
    }
}

impl Policy for ToySoftmaxPolicy {
    type Context = ToyTask;
    type Action = ToyAction;

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn log_prob(&self, task: &ToyTask, episode: &[ToyAction]) -> Result<f64, GrpoError> {
        let mut total = 0.0;
        self.walk(task, episode, |_, lp, pos| total += lp[pos])?;
        Ok(total)
    }

    fn grad_log_prob(&self, task: &ToyTask, episode: &[ToyAction]) -> Result<Vec<f64>, GrpoError> {
        let mut grad = vec![0.0; FEATURE_DIM];
        self.walk(task, episode, |phis, lp, pos| {
            let mean = expected(phis, lp);
            for ((g, x), m) in grad.iter_mut().zip(&phis[pos]).zip(&mean) {
                *g += x - m;
            }
        })?;
        Ok(grad)
    }

    fn sample(&self, task: &ToyTask, rng: &mut dyn RngCore) -> Vec<ToyAction> {
        let mut prog = Progress::start(task);
        let mut episode = Vec::with_capacity(MAX_TOOL_STEPS + 1);
        for step in 0..=MAX_TOOL_STEPS {
            let allowed = task.allowed(step);
            let (_, lp) = step_dist(&self.theta, task, &prog, step);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = allowed.len() - 1;
            for (k, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let a = allowed[pick];
            episode.push(a);
            if a.is_answer() {
                break;
            }
            prog.advance(task, &a);
        }
        episode
    }

    fn episodes(&self, task: &ToyTask) -> Vec<Vec<ToyAction>> {
        fn rec(task: &ToyTask, prefix: &mut Vec<ToyAction>, out: &mut Vec<Vec<ToyAction>>) {
            for a in task.allowed(prefix.len()) {
                prefix.push(*a);
                if a.is_answer() {
                    out.push(prefix.clone());
                } else {
                    rec(task, prefix, out);
                }
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(task, &mut Vec::new(), &mut out);
        out
    }

    fn kl_divergence(
        &self,
        reference: &Self,
        task: &ToyTask,
    ) -> Result<(f64, Vec<f64>), GrpoError> {
        let mut kl = 0.0;
        let mut grad = vec![0.0; FEATURE_DIM];
        self.kl_walk(
            reference,
            task,
            &Progress::start(task),
            0,
            0.0,
            0.0,
            &[0.0; FEATURE_DIM],
            &mut kl,
            &mut grad,
        );
        if !kl.is_finite() {
            return Err(GrpoError::NonFinite("KL divergence"));
        }
        // exact arithmetic gives KL >= 0; clamp rounding noise at the optimum
        Ok((kl.max(0.0), grad))
    }
}
