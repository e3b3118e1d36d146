//! Caption/think providers and placeholder filling.

use sha2::{Digest, Sha256};

use super::template::Placeholder;
use super::{ToolCall, Trajectory};
use crate::corpus::{
    crop_pixels, select_frames, BoundingBox, CorpusError, Frame, QAInstance, Video,
};

#[derive(Debug, thiserror::Error)]
pub enum CaptionerError {
    #[error("captioner unavailable: {0}")]
    Unavailable(String),
    #[error("captioner failed: {0}")]
    Failed(String),
}

/// Source of captions and reasoning text for template slots.
///
/// Implementations used by the CLI must be `Sync` so trajectories can be
/// filled from several threads.
pub trait CaptionerClient {
    fn caption_video(&self, frames: &[&Frame]) -> Result<String, CaptionerError>;
    fn caption_region(
        &self,
        frame: &Frame,
        bbox: &BoundingBox,
        context: &str,
    ) -> Result<String, CaptionerError>;
    fn think(&self, context: &str) -> Result<String, CaptionerError>;
}

/// Offline captioner producing text from pixel statistics and coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubCaptioner;

fn stats(pixels: &[u8]) -> (f64, f64) {
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&p| (f64::from(p) - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

impl CaptionerClient for StubCaptioner {
    fn caption_video(&self, frames: &[&Frame]) -> Result<String, CaptionerError> {
        if frames.is_empty() {
            return Err(CaptionerError::Failed("no frames to caption".into()));
        }
        let pixels: Vec<u8> = frames
            .iter()
            .flat_map(|f| f.pixels().iter().copied())
            .collect();
        let (mean, std) = stats(&pixels);
        let list = frames
            .iter()
            .map(|f| f.index().to_string())
            .collect::<Vec<_>>()
            .join(", ");
        Ok(format!(
            "The footage shows {} frame(s) ({list}) with mean brightness {mean:.1} and contrast {std:.1}.",
            frames.len()
        ))
    }

    fn caption_region(
        &self,
        frame: &Frame,
        bbox: &BoundingBox,
        _context: &str,
    ) -> Result<String, CaptionerError> {
        let region = crop_pixels(frame, bbox).map_err(|e| CaptionerError::Failed(e.to_string()))?;
        let (mean, std) = stats(region.pixels());
        Ok(format!(
            "Region {bbox} of frame {} spans {}x{} px with mean brightness {mean:.1} and contrast {std:.1}.",
            frame.index(),
            bbox.width(),
            bbox.height()
        ))
    }

    fn think(&self, context: &str) -> Result<String, CaptionerError> {
        let digest = Sha256::digest(context.as_bytes());
        Ok(format!(
            "Note {}: this observation bears on the question, so I keep gathering evidence.",
            hex::encode(&digest[..4])
        ))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FillError {
    #[error("turn {turn}: {source}")]
    Client {
        turn: usize,
        #[source]
        source: CaptionerError,
    },
    #[error("turn {turn}: unknown placeholder `{marker}`")]
    Unknown { turn: usize, marker: String },
    #[error("turn {turn}: placeholder `{marker}` has no preceding operation to describe")]
    MissingContext { turn: usize, marker: String },
    #[error("turn {turn}: placeholder `{marker}` left after filling")]
    Leftover { turn: usize, marker: String },
    #[error("turn {turn}: {source}")]
    Corpus {
        turn: usize,
        #[source]
        source: CorpusError,
    },
}

/// Splits text into literal runs and `[[...]]` markers.
fn segments(text: &str) -> Vec<(bool, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("[[") {
        let Some(len) = rest[start..].find("]]") else {
            break;
        };
        if start > 0 {
            out.push((false, &rest[..start]));
        }
        out.push((true, &rest[start..start + len + 2]));
        rest = &rest[start + len + 2..];
    }
    if !rest.is_empty() {
        out.push((false, rest));
    }
    out
}

/// Replaces every placeholder slot using `client`, one turn at a time so that
/// later reasoning can see earlier captions. Turn structure is unchanged.
pub fn fill_placeholders(
    t: &Trajectory,
    q: &QAInstance,
    video: &Video,
    client: &dyn CaptionerClient,
) -> Result<Trajectory, FillError> {
    let mut filled = t.clone();
    let mut history = format!("Question: {}\n", q.question);
    for turn in 0..filled.turns.len() {
        let previous = turn
            .checked_sub(1)
            .and_then(|p| filled.turns[p].tool_call.clone());
        let mut out = String::new();
        for (is_marker, seg) in segments(&filled.turns[turn].think) {
            if !is_marker {
                out.push_str(seg);
                continue;
            }
            let slot = Placeholder::from_marker(seg).ok_or_else(|| FillError::Unknown {
                turn,
                marker: seg.to_string(),
            })?;
            let missing = || FillError::MissingContext {
                turn,
                marker: seg.to_string(),
            };
            let client_err = |source| FillError::Client { turn, source };
            let corpus_err = |source| FillError::Corpus { turn, source };
            let text = match slot {
                Placeholder::VideoCaption => {
                    let frames: Vec<&Frame> = video.frames().iter().collect();
                    client.caption_video(&frames).map_err(client_err)?
                }
                Placeholder::ClipCaption => match &previous {
                    Some(ToolCall::Clip { frames }) => {
                        let frames = select_frames(video, frames).map_err(corpus_err)?;
                        client.caption_video(&frames).map_err(client_err)?
                    }
                    _ => return Err(missing()),
                },
                Placeholder::RegionCaption => match &previous {
                    Some(ToolCall::Crop { frame, bbox }) => {
                        let frame = video.frame(*frame).map_err(corpus_err)?;
                        client
                            .caption_region(frame, bbox, &q.question)
                            .map_err(client_err)?
                    }
                    _ => return Err(missing()),
                },
                Placeholder::Think => {
                    let context = format!("{history}{out}");
                    client.think(&context).map_err(client_err)?
                }
            };
            out.push_str(&text);
        }
        if let Some(marker) = Placeholder::ALL
            .into_iter()
            .map(Placeholder::marker)
            .find(|m| out.contains(m))
        {
            return Err(FillError::Leftover {
                turn,
                marker: marker.to_string(),
            });
        }
        history.push_str(&out);
        history.push('\n');
        filled.turns[turn].think = out;
    }
    Ok(filled)
}
