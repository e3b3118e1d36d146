//! Template-based rendering of evidence records into dialogues with
//! placeholder slots.
//!
//! Every shipped template scans forward in time: the first turn describes the
//! whole video, each following turn analyses the previous operation's
//! observation, and the last turn boxes the gold answer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Provenance, ToolCall, Trajectory, Turn};
use crate::corpus::QAInstance;
use crate::evidence::EvidenceRecord;

/// Slot kinds the captioner fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placeholder {
    VideoCaption,
    ClipCaption,
    RegionCaption,
    Think,
}

impl Placeholder {
    pub const ALL: [Placeholder; 4] = [
        Placeholder::VideoCaption,
        Placeholder::ClipCaption,
        Placeholder::RegionCaption,
        Placeholder::Think,
    ];

    pub fn marker(self) -> &'static str {
        match self {
            Placeholder::VideoCaption => "[[VIDEO_CAPTION]]",
            Placeholder::ClipCaption => "[[CLIP_CAPTION]]",
            Placeholder::RegionCaption => "[[REGION_CAPTION]]",
            Placeholder::Think => "[[THINK]]",
        }
    }

    pub fn from_marker(marker: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.marker() == marker)
    }
}

/// overview -> locate (clip) -> read (crop) -> answer, plus single-tool variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    /// Clip over the relevant frames, then crop each evidence box.
    LocateRead,
    /// Crop each evidence box; no clipping.
    CropOnly,
    /// One clip over the relevant frames; no cropping.
    ClipOnly,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [
        TemplateId::LocateRead,
        TemplateId::CropOnly,
        TemplateId::ClipOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::LocateRead => "locate_read",
            TemplateId::CropOnly => "crop_only",
            TemplateId::ClipOnly => "clip_only",
        }
    }

    /// All shipped templates visit frames in non-decreasing time order.
    pub fn is_forward_scan(self) -> bool {
        true
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, RenderError> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| RenderError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RenderError {
    #[error("evidence for `{0}` is unmatched")]
    Unmatched(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("evidence record `{evidence}` does not belong to instance `{instance}`")]
    InstanceMismatch { evidence: String, instance: String },
    #[error("evidence record `{0}` lacks a box for frame {1}")]
    MissingBox(String, usize),
}

fn describe(call: &ToolCall) -> String {
    match call {
        ToolCall::Clip { frames } => {
            let list = frames
                .iter()
                .map(|f| f.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            format!("I will clip frame(s) {list} to locate the relevant moment.")
        }
        ToolCall::Crop { frame, bbox } => {
            format!("I will crop frame {frame} at {bbox} to read the region closely.")
        }
    }
}

fn observation_slot(previous: &ToolCall) -> Placeholder {
    match previous {
        ToolCall::Clip { .. } => Placeholder::ClipCaption,
        ToolCall::Crop { .. } => Placeholder::RegionCaption,
    }
}

pub fn trajectory_id(instance_id: &str, template: TemplateId) -> String {
    format!("{instance_id}-{template}")
}

/// Expands a matched evidence record into a placeholder-bearing trajectory.
pub fn render_trajectory(
    ev: &EvidenceRecord,
    q: &QAInstance,
    template: TemplateId,
) -> Result<Trajectory, RenderError> {
    if ev.instance_id != q.id {
        return Err(RenderError::InstanceMismatch {
            evidence: ev.instance_id.clone(),
            instance: q.id.clone(),
        });
    }
    if !ev.matched || ev.relevant_frames.is_empty() {
        return Err(RenderError::Unmatched(q.id.clone()));
    }
    let frames: Vec<usize> = ev.relevant_frames.iter().copied().collect();
    let crops = || {
        frames
            .iter()
            .map(|&f| {
                ev.evidence_boxes
                    .get(&f)
                    .map(|&bbox| ToolCall::Crop { frame: f, bbox })
                    .ok_or_else(|| RenderError::MissingBox(ev.instance_id.clone(), f))
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let clip = ToolCall::Clip {
        frames: frames.clone(),
    };
    let ops: Vec<ToolCall> = match template {
        TemplateId::LocateRead => std::iter::once(clip).chain(crops()?).collect(),
        TemplateId::CropOnly => crops()?,
        TemplateId::ClipOnly => vec![clip],
    };

    let think = Placeholder::Think.marker();
    let mut turns = Vec::with_capacity(ops.len() + 1);
    for (k, op) in ops.iter().enumerate() {
        let lead = match k {
            0 => Placeholder::VideoCaption.marker(),
            _ => observation_slot(&ops[k - 1]).marker(),
        };
        turns.push(Turn::call(
            format!("{lead} {think} {}", describe(op)),
            op.clone(),
        ));
    }
    let last_obs = observation_slot(ops.last().expect("templates emit at least one op")).marker();
    turns.push(Turn::answer(
        format!("{last_obs} {think} The collected evidence answers the question."),
        q.answers[0].clone(),
    ));

    Ok(Trajectory {
        id: trajectory_id(&q.id, template),
        instance_id: q.id.clone(),
        provenance: Provenance::Synthesized,
        template: Some(template.as_str().to_string()),
        turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BoundingBox, EvidenceModality, TemporalScope};
    use std::collections::{BTreeMap, BTreeSet};

    fn instance() -> QAInstance {
        QAInstance {
            id: "q1".into(),
            video: "v".into(),
            question: "What is written?".into(),
            answers: vec!["exit".into()],
            src_temporal: TemporalScope::Multi,
            src_modality: EvidenceModality::Text,
        }
    }

    fn evidence(frames: &[usize]) -> EvidenceRecord {
        let b = BoundingBox::new(1, 1, 5, 5).unwrap();
        let boxes: BTreeMap<usize, BoundingBox> = frames.iter().map(|&f| (f, b)).collect();
        EvidenceRecord {
            instance_id: "q1".into(),
            relevant_frames: frames.iter().copied().collect::<BTreeSet<_>>(),
            text_boxes: boxes.clone(),
            evidence_boxes: boxes,
            matched: true,
            helpful: None,
        }
    }

    #[test]
    fn single_frame_text_has_three_turns() {
        let t = render_trajectory(&evidence(&[3]), &instance(), TemplateId::LocateRead).unwrap();
        assert_eq!(t.turns.len(), 3);
        assert!(t.turns[0].think.starts_with("[[VIDEO_CAPTION]]"));
        assert!(matches!(
            t.turns[1].tool_call,
            Some(ToolCall::Crop { frame: 3, .. })
        ));
        assert_eq!(t.final_answer(), Some("exit"));
        assert!(t.structure_errors().is_empty());
    }

    #[test]
    fn multi_frame_clip_then_crops() {
        let t = render_trajectory(&evidence(&[4, 1]), &instance(), TemplateId::LocateRead).unwrap();
        let calls: Vec<_> = t.tool_calls().cloned().collect();
        assert_eq!(calls.len(), 3);
        assert_eq!(calls[0], ToolCall::Clip { frames: vec![1, 4] });
        assert!(matches!(calls[1], ToolCall::Crop { frame: 1, .. }));
        assert!(matches!(calls[2], ToolCall::Crop { frame: 4, .. }));
        assert_eq!(t.turns.len(), 4);
        assert!(t.turns[1].think.starts_with("[[CLIP_CAPTION]]"));
        assert!(t.turns[3].think.starts_with("[[REGION_CAPTION]]"));
    }

    #[test]
    fn single_tool_variants() {
        let crop =
            render_trajectory(&evidence(&[1, 4]), &instance(), TemplateId::CropOnly).unwrap();
        assert!(crop.is_drp_eligible());
        assert_eq!(crop.turns.len(), 3);
        let clip =
            render_trajectory(&evidence(&[1, 4]), &instance(), TemplateId::ClipOnly).unwrap();
        assert!(clip.is_drp_eligible());
        assert_eq!(clip.turns.len(), 2);
    }

    #[test]
    fn unmatched_and_unknown_template_fail() {
        let ev = EvidenceRecord::unmatched("q1");
        assert_eq!(
            render_trajectory(&ev, &instance(), TemplateId::LocateRead),
            Err(RenderError::Unmatched("q1".into()))
        );
        assert!("zoom_twice".parse::<TemplateId>().is_err());
        assert_eq!("crop_only".parse::<TemplateId>(), Ok(TemplateId::CropOnly));
    }
}
