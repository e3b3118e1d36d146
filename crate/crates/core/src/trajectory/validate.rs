//! Grounding, temporal-order, correctness and format checks.

use serde::{Deserialize, Serialize};

use super::{parse_turn, serialize_turn, TemplateId, ToolCall, Trajectory};
use crate::corpus::Corpus;
use crate::evidence::text::normalize_answer;
use crate::evidence::EvidenceRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Tool call points outside the matched evidence.
    Grounding {
        turn: usize,
        message: String,
    },
    /// Tool call points outside the video itself.
    OutOfBounds {
        turn: usize,
        message: String,
    },
    /// Clip windows move backwards under a forward-scan template.
    Temporal {
        turn: usize,
        message: String,
    },
    /// Final answer does not match any gold answer after normalization.
    Incorrect {
        answer: String,
        golds: Vec<String>,
    },
    Format {
        turn: usize,
        message: String,
    },
    Reference {
        message: String,
    },
}

impl Violation {
    pub fn turn(&self) -> Option<usize> {
        match self {
            Violation::Grounding { turn, .. }
            | Violation::OutOfBounds { turn, .. }
            | Violation::Temporal { turn, .. }
            | Violation::Format { turn, .. } => Some(*turn),
            Violation::Incorrect { .. } | Violation::Reference { .. } => None,
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Grounding { turn, message } => {
                write!(f, "turn {turn}: grounding: {message}")
            }
            Violation::OutOfBounds { turn, message } => {
                write!(f, "turn {turn}: out of bounds: {message}")
            }
            Violation::Temporal { turn, message } => write!(f, "turn {turn}: temporal: {message}"),
            Violation::Format { turn, message } => write!(f, "turn {turn}: format: {message}"),
            Violation::Incorrect { answer, golds } => {
                write!(f, "answer `{answer}` matches none of {golds:?}")
            }
            Violation::Reference { message } => write!(f, "reference: {message}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub trajectory_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Normalized exact match against any gold answer.
pub fn answer_matches<S: AsRef<str>>(answer: &str, golds: &[S]) -> bool {
    let a = normalize_answer(answer);
    golds.iter().any(|g| normalize_answer(g.as_ref()) == a)
}

pub fn validate_trajectory(
    t: &Trajectory,
    corpus: &Corpus,
    ev: &EvidenceRecord,
) -> ValidationReport {
    let mut violations = Vec::new();

    for (turn, message) in t.structure_errors() {
        violations.push(Violation::Format { turn, message });
    }
    for (turn, body) in t.turns.iter().enumerate() {
        let text = serialize_turn(body);
        match parse_turn(&text) {
            Ok(parsed) if parsed == *body => {}
            Ok(_) => violations.push(Violation::Format {
                turn,
                message: "turn does not survive a serialize/parse round trip".into(),
            }),
            Err(e) => violations.push(Violation::Format {
                turn,
                message: e.to_string(),
            }),
        }
    }

    if ev.instance_id != t.instance_id {
        violations.push(Violation::Reference {
            message: format!(
                "evidence record `{}` does not belong to instance `{}`",
                ev.instance_id, t.instance_id
            ),
        });
    }
    let instance = corpus.instance(&t.instance_id);
    let video = instance.and_then(|q| corpus.video(&q.video));
    if instance.is_none() {
        violations.push(Violation::Reference {
            message: format!("unknown instance `{}`", t.instance_id),
        });
    }

    let forward_scan = t
        .template
        .as_deref()
        .and_then(|s| s.parse::<TemplateId>().ok())
        .is_some_and(TemplateId::is_forward_scan);
    let mut last_clip_start: Option<usize> = None;

    for (turn, body) in t.turns.iter().enumerate() {
        let Some(call) = &body.tool_call else {
            continue;
        };
        match call {
            ToolCall::Clip { frames } => {
                for &f in frames {
                    if let Some(v) = video {
                        if f >= v.frame_count() {
                            violations.push(Violation::OutOfBounds {
                                turn,
                                message: format!(
                                    "clip frame {f} beyond {} frames",
                                    v.frame_count()
                                ),
                            });
                            continue;
                        }
                    }
                    if !ev.relevant_frames.contains(&f) {
                        violations.push(Violation::Grounding {
                            turn,
                            message: format!("clip frame {f} is not an evidence frame"),
                        });
                    }
                }
                if forward_scan {
                    if frames.windows(2).any(|w| w[0] >= w[1]) {
                        violations.push(Violation::Temporal {
                            turn,
                            message: "clip frames are not in ascending order".into(),
                        });
                    }
                    if let Some(&start) = frames.iter().min() {
                        if last_clip_start.is_some_and(|prev| start < prev) {
                            violations.push(Violation::Temporal {
                                turn,
                                message: format!("clip window starting at {start} moves backwards"),
                            });
                        }
                        last_clip_start = Some(start);
                    }
                }
            }
            ToolCall::Crop { frame, bbox } => {
                if let Some(v) = video {
                    match v.frame(*frame) {
                        Err(_) => {
                            violations.push(Violation::OutOfBounds {
                                turn,
                                message: format!(
                                    "crop frame {frame} beyond {} frames",
                                    v.frame_count()
                                ),
                            });
                            continue;
                        }
                        Ok(fr) if !bbox.fits_within(fr.width(), fr.height()) => {
                            violations.push(Violation::OutOfBounds {
                                turn,
                                message: format!(
                                    "crop box {bbox} exceeds frame {}x{}",
                                    fr.width(),
                                    fr.height()
                                ),
                            });
                        }
                        Ok(_) => {}
                    }
                }
                match ev.evidence_boxes.get(frame) {
                    Some(region) if ev.relevant_frames.contains(frame) && region.contains(bbox) => {
                    }
                    Some(region) => violations.push(Violation::Grounding {
                        turn,
                        message: format!(
                            "crop box {bbox} on frame {frame} leaves evidence region {region}"
                        ),
                    }),
                    None => violations.push(Violation::Grounding {
                        turn,
                        message: format!("crop on frame {frame}, which has no evidence"),
                    }),
                }
            }
        }
    }

    if let (Some(q), Some(answer)) = (instance, t.final_answer()) {
        if !answer_matches(answer, &q.answers) {
            violations.push(Violation::Incorrect {
                answer: answer.to_string(),
                golds: q.answers.clone(),
            });
        }
    }

    ValidationReport {
        trajectory_id: t.id.clone(),
        violations,
    }
}
