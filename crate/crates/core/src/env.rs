//! Executable clip/crop environment.
//!
//! Frames and cropped regions are re-encoded into unit-norm feature vectors;
//! the resulting [`RuminationState`] is what the reward engine scores.

use serde::{Deserialize, Serialize};

use crate::corpus::{crop_pixels, BoundingBox, CorpusError, Frame, Video};
use crate::trajectory::{parse_turn, ToolCall, Trajectory};

pub const DEFAULT_MAX_CALLS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("video `{0}` has no frames")]
    EmptyVideo(String),
    #[error("cannot encode a zero-area region")]
    Degenerate,
    #[error("clip needs at least one frame")]
    EmptyClip,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// A fixed-length real feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    /// The `i`-th standard basis vector of length `dim`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self(v)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Maps a frame or cropped region to a feature vector.
///
/// Implementations must be deterministic and callable from several threads.
pub trait Encoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, frame: &Frame) -> Result<FeatureVector, EnvError>;
}

/// Mean-pools intensities onto a `grid × grid` raster, mean-centers and
/// L2-normalizes. Images whose pooled raster is flat map to the first basis
/// vector.
#[derive(Clone, Copy, Debug)]
pub struct PooledEncoder {
    pub grid: u32,
}

impl Default for PooledEncoder {
    fn default() -> Self {
        Self { grid: 8 }
    }
}

/// Half-open span of source pixels pooled into cell `k` of `n`. Spans never
/// come out empty, so regions smaller than the grid reuse their nearest pixel.
fn cell_span(k: u32, n: u32, len: u32) -> (u32, u32) {
    let lo = (u64::from(k) * u64::from(len) / u64::from(n)) as u32;
    let hi = (u64::from(k + 1) * u64::from(len)).div_ceil(u64::from(n)) as u32;
    let lo = lo.min(len - 1);
    (lo, hi.max(lo + 1).min(len))
}

impl Encoder for PooledEncoder {
    fn dim(&self) -> usize {
        (self.grid * self.grid) as usize
    }

    fn encode(&self, frame: &Frame) -> Result<FeatureVector, EnvError> {
        let (w, h) = (frame.width(), frame.height());
        if w == 0 || h == 0 || self.grid == 0 {
            return Err(EnvError::Degenerate);
        }
        let n = self.grid;
        let mut cells = Vec::with_capacity(self.dim());
        for gy in 0..n {
            let (y0, y1) = cell_span(gy, n, h);
            for gx in 0..n {
                let (x0, x1) = cell_span(gx, n, w);
                let mut sum = 0u64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += u64::from(frame.pixel(x, y));
                    }
                }
                cells.push(sum as f64 / f64::from((x1 - x0) * (y1 - y0)));
            }
        }
        let mean = cells.iter().sum::<f64>() / cells.len() as f64;
        for c in &mut cells {
            *c -= mean;
        }
        let norm = cells.iter().map(|c| c * c).sum::<f64>().sqrt();
        // Pooled means are multiples of 1/area, so a genuinely non-flat
        // raster has a norm far above this.
        if norm < 1e-9 {
            return Ok(FeatureVector::basis(cells.len(), 0));
        }
        Ok(FeatureVector(cells.into_iter().map(|c| c / norm).collect()))
    }
}

/// Frames V, clip selections V̂^f (as groups of indices into V), and region
/// selections V̂^r.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuminationState {
    video: String,
    all_frame_features: Vec<FeatureVector>,
    clip_groups: Vec<Vec<usize>>,
    region_features: Vec<FeatureVector>,
    transcript: Vec<ToolCall>,
}

impl RuminationState {
    pub fn video_id(&self) -> &str {
        &self.video
    }

    pub fn all_frame_features(&self) -> &[FeatureVector] {
        &self.all_frame_features
    }

    /// Frame indices selected by each clip, in call order.
    pub fn clip_groups(&self) -> &[Vec<usize>] {
        &self.clip_groups
    }

    pub fn selected_frame_features(&self) -> impl Iterator<Item = &FeatureVector> {
        self.clip_groups
            .iter()
            .flatten()
            .map(|&i| &self.all_frame_features[i])
    }

    /// Features of the most recent clip; empty before any clip.
    pub fn last_clip_features(&self) -> Vec<&FeatureVector> {
        self.clip_groups
            .last()
            .map(|g| g.iter().map(|&i| &self.all_frame_features[i]).collect())
            .unwrap_or_default()
    }

    pub fn selected_region_features(&self) -> &[FeatureVector] {
        &self.region_features
    }

    pub fn tool_call_count(&self) -> usize {
        self.transcript.len()
    }

    pub fn transcript(&self) -> &[ToolCall] {
        &self.transcript
    }

    pub fn clip_count(&self) -> usize {
        self.clip_groups.len()
    }

    pub fn crop_count(&self) -> usize {
        self.region_features.len()
    }

    /// Selects frames by index. On error the state is left unchanged.
    pub fn apply_clip(&mut self, indices: &[usize]) -> Result<(), EnvError> {
        if indices.is_empty() {
            return Err(EnvError::EmptyClip);
        }
        let count = self.all_frame_features.len();
        for (k, &i) in indices.iter().enumerate() {
            if i >= count {
                return Err(CorpusError::FrameOutOfRange {
                    video: self.video.clone(),
                    index: i,
                    count,
                }
                .into());
            }
            if indices[..k].contains(&i) {
                return Err(CorpusError::DuplicateFrame { index: i }.into());
            }
        }
        self.clip_groups.push(indices.to_vec());
        self.transcript.push(ToolCall::Clip {
            frames: indices.to_vec(),
        });
        Ok(())
    }

    /// Crops `bbox` from a frame and re-encodes it from source pixels.
    pub fn apply_crop(
        &mut self,
        video: &Video,
        frame: usize,
        bbox: BoundingBox,
        encoder: &dyn Encoder,
    ) -> Result<(), EnvError> {
        let region = crop_pixels(video.frame(frame)?, &bbox)?;
        let feature = encoder.encode(&region)?;
        self.region_features.push(feature);
        self.transcript.push(ToolCall::Crop { frame, bbox });
        Ok(())
    }

    pub fn apply(
        &mut self,
        call: &ToolCall,
        video: &Video,
        encoder: &dyn Encoder,
    ) -> Result<(), EnvError> {
        match call {
            ToolCall::Clip { frames } => self.apply_clip(frames),
            ToolCall::Crop { frame, bbox } => self.apply_crop(video, *frame, *bbox, encoder),
        }
    }
}

pub fn init_state(video: &Video, encoder: &dyn Encoder) -> Result<RuminationState, EnvError> {
    if video.frame_count() == 0 {
        return Err(EnvError::EmptyVideo(video.id().to_string()));
    }
    let all_frame_features = video
        .frames()
        .iter()
        .map(|f| encoder.encode(f))
        .collect::<Result<_, _>>()?;
    Ok(RuminationState {
        video: video.id().to_string(),
        all_frame_features,
        clip_groups: Vec::new(),
        region_features: Vec::new(),
        transcript: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeIssue {
    pub turn: usize,
    pub message: String,
}

/// Outcome of executing one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub instance_id: String,
    /// Empty when no answer was reached.
    pub final_answer: String,
    pub state: RuminationState,
    pub format_ok: bool,
    pub issues: Vec<EpisodeIssue>,
}

/// Executes the tool calls of `t` against a fresh state.
///
/// Only a frameless video (or an encoder failure on a whole frame) is an
/// error; problems inside the trajectory clear `format_ok` and are listed in
/// `issues`.
pub fn run_trajectory(
    t: &Trajectory,
    video: &Video,
    encoder: &dyn Encoder,
    max_calls: usize,
) -> Result<EpisodeRecord, EnvError> {
    run_transcript(
        &t.instance_id,
        &t.to_transcript(),
        video,
        encoder,
        max_calls,
    )
}

/// Like [`run_trajectory`], but over raw turn texts so that malformed model
/// output can be executed as-is.
pub fn run_transcript<S: AsRef<str>>(
    instance_id: &str,
    turns: &[S],
    video: &Video,
    encoder: &dyn Encoder,
    max_calls: usize,
) -> Result<EpisodeRecord, EnvError> {
    let mut state = init_state(video, encoder)?;
    let mut issues = Vec::new();
    let mut answer: Option<String> = None;

    for (turn, text) in turns.iter().enumerate() {
        if answer.is_some() {
            issues.push(EpisodeIssue {
                turn,
                message: "turn after the final answer".into(),
            });
            break;
        }
        let parsed = match parse_turn(text.as_ref()) {
            Ok(p) => p,
            Err(e) => {
                issues.push(EpisodeIssue {
                    turn,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Some(call) = &parsed.tool_call {
            if state.tool_call_count() >= max_calls {
                issues.push(EpisodeIssue {
                    turn,
                    message: format!("tool-call budget of {max_calls} exhausted"),
                });
                break;
            }
            if let Err(e) = state.apply(call, video, encoder) {
                issues.push(EpisodeIssue {
                    turn,
                    message: e.to_string(),
                });
            }
        } else {
            answer = parsed.final_answer;
        }
    }
    if answer.is_none() && issues.is_empty() {
        issues.push(EpisodeIssue {
            turn: turns.len(),
            message: "no final answer".into(),
        });
    }
    Ok(EpisodeRecord {
        instance_id: instance_id.to_string(),
        final_answer: answer.unwrap_or_default(),
        state,
        format_ok: issues.is_empty(),
        issues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FrameAnnotations;
    use crate::trajectory::{serialize_turn, Provenance, Turn};

    fn video(n: usize) -> Video {
        let frames = (0..n)
            .map(|i| {
                Frame::from_fn(i, 16, 16, |x, y| {
                    ((x * 7 + y * 3 + i as u32 * 40) % 200) as u8
                })
                .unwrap()
            })
            .collect();
        Video::new("v", frames, vec![FrameAnnotations::default(); n]).unwrap()
    }

    fn bbox(x1: u32, y1: u32, x2: u32, y2: u32) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn constant_image_maps_to_first_basis_vector() {
        let f = Frame::from_fn(0, 9, 5, |_, _| 77).unwrap();
        assert_eq!(
            PooledEncoder::default().encode(&f).unwrap(),
            FeatureVector::basis(64, 0)
        );
    }

    #[test]
    fn encoding_is_unit_norm_and_offset_invariant() {
        let enc = PooledEncoder::default();
        let a = Frame::from_fn(0, 20, 13, |x, y| (x * 5 + y * 2) as u8).unwrap();
        let b = Frame::from_fn(0, 20, 13, |x, y| (x * 5 + y * 2 + 60) as u8).unwrap();
        let (fa, fb) = (enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
        assert!((fa.norm() - 1.0).abs() < 1e-9);
        for (x, y) in fa.values().iter().zip(fb.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_regions_still_encode() {
        let enc = PooledEncoder::default();
        let f = Frame::from_fn(0, 3, 2, |x, y| (x * 40 + y * 90) as u8).unwrap();
        let v = enc.encode(&f).unwrap();
        assert_eq!(v.dim(), 64);
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn init_state_covers_every_frame() {
        let enc = PooledEncoder::default();
        assert_eq!(
            init_state(&video(5), &enc)
                .unwrap()
                .all_frame_features()
                .len(),
            5
        );
        assert_eq!(
            init_state(&video(1), &enc)
                .unwrap()
                .all_frame_features()
                .len(),
            1
        );
        assert!(matches!(
            init_state(&video(0), &enc),
            Err(EnvError::EmptyVideo(_))
        ));
    }

    #[test]
    fn clips_are_grouped() {
        let enc = PooledEncoder::default();
        let mut s = init_state(&video(4), &enc).unwrap();
        s.apply_clip(&[0, 2]).unwrap();
        assert_eq!(s.selected_frame_features().count(), 2);
        assert_eq!(s.last_clip_features().len(), 2);
        s.apply_clip(&[1]).unwrap();
        assert_eq!(s.selected_frame_features().count(), 3);
        assert_eq!(s.last_clip_features().len(), 1);
        assert_eq!(s.last_clip_features()[0], &s.all_frame_features()[1]);
        let before = s.clone();
        assert!(s.apply_clip(&[9]).is_err());
        assert!(s.apply_clip(&[1, 1]).is_err());
        assert_eq!(s, before);
        assert_eq!(s.tool_call_count(), 2);
    }

    #[test]
    fn crops_append_duplicates() {
        let enc = PooledEncoder::default();
        let v = video(2);
        let mut s = init_state(&v, &enc).unwrap();
        s.apply_crop(&v, 1, bbox(2, 2, 10, 9), &enc).unwrap();
        assert_eq!(s.selected_region_features().len(), 1);
        s.apply_crop(&v, 1, bbox(2, 2, 10, 9), &enc).unwrap();
        let r = s.selected_region_features();
        assert_eq!(r[0], r[1]);
        assert!(s.apply_crop(&v, 1, bbox(2, 2, 17, 9), &enc).is_err());
        assert!(s.apply_crop(&v, 5, bbox(2, 2, 4, 4), &enc).is_err());
        assert_eq!(s.tool_call_count(), 2);
    }

    fn traj(turns: Vec<Turn>) -> Trajectory {
        Trajectory {
            id: "t".into(),
            instance_id: "q".into(),
            provenance: Provenance::ModelRollout,
            template: None,
            turns,
        }
    }

    #[test]
    fn valid_trajectory_runs_clean() {
        let enc = PooledEncoder::default();
        let t = traj(vec![
            Turn::call("look", ToolCall::Clip { frames: vec![1] }),
            Turn::call(
                "zoom",
                ToolCall::Crop {
                    frame: 1,
                    bbox: bbox(0, 0, 8, 8),
                },
            ),
            Turn::answer("done", "exit"),
        ]);
        let ep = run_trajectory(&t, &video(3), &enc, DEFAULT_MAX_CALLS).unwrap();
        assert!(ep.format_ok, "{:?}", ep.issues);
        assert_eq!(ep.final_answer, "exit");
        assert_eq!(ep.state.tool_call_count(), 2);
    }

    #[test]
    fn call_budget_truncates() {
        let enc = PooledEncoder::default();
        let mut turns: Vec<Turn> = (0..10)
            .map(|i| {
                Turn::call(
                    "c",
                    ToolCall::Clip {
                        frames: vec![i % 3],
                    },
                )
            })
            .collect();
        turns.push(Turn::answer("a", "x"));
        let ep = run_trajectory(&traj(turns), &video(3), &enc, 4).unwrap();
        assert_eq!(ep.state.transcript().len(), 4);
        assert!(!ep.format_ok);
    }

    #[test]
    fn malformed_turn_is_recorded() {
        let enc = PooledEncoder::default();
        let turns = vec![
            serialize_turn(&Turn::call("c", ToolCall::Clip { frames: vec![0] })),
            "oops <tool_call>{\"name\":\"clip\"}</tool_call>".to_string(),
            serialize_turn(&Turn::answer("a", "x")),
        ];
        let ep = run_transcript("q", &turns, &video(2), &enc, 8).unwrap();
        assert!(!ep.format_ok);
        assert_eq!(ep.issues.len(), 1);
        assert_eq!(ep.issues[0].turn, 1);
        assert_eq!(ep.final_answer, "x");
        assert_eq!(ep.state.tool_call_count(), 1);
    }

    #[test]
    fn missing_or_early_answer_is_malformed() {
        let enc = PooledEncoder::default();
        let no_answer = traj(vec![Turn::call("c", ToolCall::Clip { frames: vec![0] })]);
        assert!(
            !run_trajectory(&no_answer, &video(2), &enc, 8)
                .unwrap()
                .format_ok
        );
        let early = traj(vec![
            Turn::answer("a", "x"),
            Turn::call("c", ToolCall::Clip { frames: vec![0] }),
        ]);
        let ep = run_trajectory(&early, &video(2), &enc, 8).unwrap();
        assert!(!ep.format_ok);
        assert_eq!(ep.state.tool_call_count(), 0);
    }
}
