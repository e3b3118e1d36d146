//! Multi-turn rumination dialogues: types, wire format, templated synthesis,
//! placeholder filling and validation.

pub mod captioner;
pub mod format;
pub mod template;
pub mod validate;

use serde::{Deserialize, Serialize};

use crate::corpus::BoundingBox;
pub use captioner::{fill_placeholders, CaptionerClient, CaptionerError, FillError, StubCaptioner};
pub use format::{parse_turn, serialize_turn, ParseError, ParseErrorKind};
pub use template::{render_trajectory, RenderError, TemplateId};
pub use validate::{validate_trajectory, ValidationReport, Violation};

pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const BOXED_OPEN: &str = "\\boxed{";

/// A visual operation: select key frames, or zoom into a region of one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "arguments", rename_all = "lowercase")]
pub enum ToolCall {
    Clip {
        frames: Vec<usize>,
    },
    Crop {
        frame: usize,
        #[serde(rename = "box")]
        bbox: BoundingBox,
    },
}

impl ToolCall {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolCall::Clip { .. } => ToolKind::Clip,
            ToolCall::Crop { .. } => ToolKind::Crop,
        }
    }

    /// Clip frames must be nonempty and distinct. Crop boxes are valid by
    /// construction.
    pub fn check(&self) -> Result<(), String> {
        match self {
            ToolCall::Clip { frames } => {
                if frames.is_empty() {
                    return Err("clip needs at least one frame".into());
                }
                let mut sorted = frames.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != frames.len() {
                    return Err("clip frames must be distinct".into());
                }
                Ok(())
            }
            ToolCall::Crop { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKind {
    Clip,
    Crop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub think: String,
    pub tool_call: Option<ToolCall>,
    #[serde(rename = "answer")]
    pub final_answer: Option<String>,
}

impl Turn {
    pub fn call(think: impl Into<String>, call: ToolCall) -> Self {
        Self {
            think: think.into(),
            tool_call: Some(call),
            final_answer: None,
        }
    }

    pub fn answer(think: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            think: think.into(),
            tool_call: None,
            final_answer: Some(answer.into()),
        }
    }

    /// Checks that the turn carries exactly one action and that its text can
    /// be serialized without ambiguity.
    pub fn check(&self) -> Result<(), String> {
        match (&self.tool_call, &self.final_answer) {
            (Some(_), Some(_)) => return Err("turn has both a tool call and an answer".into()),
            (None, None) => return Err("turn has neither a tool call nor an answer".into()),
            _ => {}
        }
        for marker in [TOOL_CALL_OPEN, TOOL_CALL_CLOSE, BOXED_OPEN] {
            if self.think.contains(marker) {
                return Err(format!("think text contains reserved marker `{marker}`"));
            }
        }
        if let Some(call) = &self.tool_call {
            call.check()?;
        }
        if let Some(answer) = &self.final_answer {
            if answer.contains(BOXED_OPEN) {
                return Err("answer contains a nested boxed marker".into());
            }
            for marker in [TOOL_CALL_OPEN, TOOL_CALL_CLOSE] {
                if answer.contains(marker) {
                    return Err(format!("answer contains reserved marker `{marker}`"));
                }
            }
            let mut depth = 0i64;
            for c in answer.chars() {
                match c {
                    '{' => depth += 1,
                    '}' => depth -= 1,
                    _ => {}
                }
                if depth < 0 {
                    return Err("answer has unbalanced braces".into());
                }
            }
            if depth != 0 {
                return Err("answer has unbalanced braces".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthesized,
    Edited,
    ModelRollout,
}

/// Which tool kinds a trajectory uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolComposition {
    NoTools,
    ClipOnly,
    CropOnly,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub instance_id: String,
    pub provenance: Provenance,
    /// Template that produced the trajectory, when synthesized from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub turns: Vec<Turn>,
}

impl Trajectory {
    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.turns.iter().filter_map(|t| t.tool_call.as_ref())
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.turns.last().and_then(|t| t.final_answer.as_deref())
    }

    pub fn composition(&self) -> ToolComposition {
        let (mut clip, mut crop) = (false, false);
        for call in self.tool_calls() {
            match call.kind() {
                ToolKind::Clip => clip = true,
                ToolKind::Crop => crop = true,
            }
        }
        match (clip, crop) {
            (false, false) => ToolComposition::NoTools,
            (true, false) => ToolComposition::ClipOnly,
            (false, true) => ToolComposition::CropOnly,
            (true, true) => ToolComposition::Mixed,
        }
    }

    /// Single-tool trajectories qualify for deliberate (one tool at a time)
    /// practice.
    pub fn is_drp_eligible(&self) -> bool {
        matches!(
            self.composition(),
            ToolComposition::ClipOnly | ToolComposition::CropOnly
        )
    }

    /// Structural problems, each tagged with the offending turn index.
    pub fn structure_errors(&self) -> Vec<(usize, String)> {
        let mut errors = Vec::new();
        if self.turns.is_empty() {
            errors.push((0, "trajectory has no turns".to_string()));
            return errors;
        }
        let last = self.turns.len() - 1;
        for (i, turn) in self.turns.iter().enumerate() {
            if let Err(e) = turn.check() {
                errors.push((i, e));
            }
            if i < last && turn.final_answer.is_some() {
                errors.push((i, "final answer before the last turn".to_string()));
            }
        }
        if self.turns[last].final_answer.is_none() {
            errors.push((last, "last turn carries no final answer".to_string()));
        }
        errors
    }

    /// Wire-format text of every turn.
    pub fn to_transcript(&self) -> Vec<String> {
        self.turns.iter().map(serialize_turn).collect()
    }
}
