//! Rule-based evidence matching.
//!
//! For every question the matcher scans each frame's token-level OCR for the
//! best fuzzy hit against the gold answers, snaps the hit to the paragraph
//! region that overlaps it most, enlarges that region, and (for visual
//! questions) merges in object boxes whose labels fuzzily match the answer or
//! question tokens. Unmatched questions are scored for difficulty and either
//! kept as RL candidates or dropped.

pub mod geometry;
pub mod text;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    BoundingBox, Corpus, CorpusError, EvidenceModality, OcrDetection, QAInstance, TemporalScope,
};
pub use geometry::{extend_box, iou, merge_boxes};
pub use text::{
    edit_distance, normalize_tokens, normalized_levenshtein, score_name, score_text, TokenSet,
};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("invalid matcher config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub text_match_threshold: f64,
    pub name_match_threshold: f64,
    pub extend_pad_fraction: f64,
    /// Inclusive `[lo, hi]` difficulty band for RL candidates.
    pub difficulty_band: [f64; 2],
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            text_match_threshold: 0.8,
            name_match_threshold: 0.8,
            extend_pad_fraction: 0.1,
            difficulty_band: [0.2, 0.8],
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.text_match_threshold) {
            return Err(MatchError::Config(format!(
                "text_match_threshold {} not in (0, 1]",
                self.text_match_threshold
            )));
        }
        if !in_unit(self.name_match_threshold) {
            return Err(MatchError::Config(format!(
                "name_match_threshold {} not in (0, 1]",
                self.name_match_threshold
            )));
        }
        if !(self.extend_pad_fraction >= 0.0 && self.extend_pad_fraction.is_finite()) {
            return Err(MatchError::Config(format!(
                "extend_pad_fraction {} must be a finite value >= 0",
                self.extend_pad_fraction
            )));
        }
        let [lo, hi] = self.difficulty_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(MatchError::Config(format!(
                "difficulty_band [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(())
    }
}

/// Relevant frames and per-frame boxes recovered for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub instance_id: String,
    pub relevant_frames: BTreeSet<usize>,
    /// Refined (paragraph-snapped, enlarged) OCR box per frame.
    pub text_boxes: BTreeMap<usize, BoundingBox>,
    /// Final evidence region per frame; equals the text box for text questions.
    pub evidence_boxes: BTreeMap<usize, BoundingBox>,
    pub matched: bool,
    /// Set only by human review; the matcher never guesses it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub helpful: Option<bool>,
}

impl EvidenceRecord {
    pub fn unmatched(instance_id: impl Into<String>) -> Self {
        Self {
            instance_id: instance_id.into(),
            relevant_frames: BTreeSet::new(),
            text_boxes: BTreeMap::new(),
            evidence_boxes: BTreeMap::new(),
            matched: false,
            helpful: None,
        }
    }

    /// Checks the structural invariants: every boxed frame is relevant and
    /// evidence boxes contain their text boxes.
    pub fn is_consistent(&self) -> bool {
        let frames_ok = self
            .text_boxes
            .keys()
            .chain(self.evidence_boxes.keys())
            .all(|f| self.relevant_frames.contains(f));
        let contain_ok = self
            .text_boxes
            .iter()
            .all(|(f, t)| self.evidence_boxes.get(f).is_none_or(|ev| ev.contains(t)));
        frames_ok && contain_ok && self.matched == !self.relevant_frames.is_empty()
    }
}

#[derive(Clone, Debug)]
struct FrameHit<'a> {
    frame: usize,
    score: f64,
    detection: &'a OcrDetection,
}

/// Orders detections within one frame: higher score, smaller area, text, coords.
fn detection_order(a: (f64, &OcrDetection), b: (f64, &OcrDetection)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.bbox.area().cmp(&b.1.bbox.area()))
        .then_with(|| a.1.text.cmp(&b.1.text))
        .then_with(|| a.1.bbox.cmp(&b.1.bbox))
}

fn best_paragraph<'a>(
    paragraphs: impl Iterator<Item = &'a OcrDetection>,
    target: &BoundingBox,
) -> Option<&'a OcrDetection> {
    paragraphs
        .map(|p| (iou(&p.bbox, target), p))
        .filter(|(overlap, _)| *overlap > 0.0)
        .min_by(|a, b| detection_order(*a, *b))
        .map(|(_, p)| p)
}

/// Runs the evidence-matching rules for one question.
pub fn match_question(
    q: &QAInstance,
    corpus: &Corpus,
    cfg: &MatcherConfig,
) -> Result<EvidenceRecord, MatchError> {
    cfg.validate()?;
    let video = corpus.video_of(q)?;

    let mut hits: Vec<FrameHit<'_>> = Vec::new();
    for (frame, ann) in video.annotations().iter().enumerate() {
        let best = ann
            .tokens()
            .filter_map(|d| {
                let s = score_text(&d.text, &q.answers)?;
                (s >= cfg.text_match_threshold).then_some((s, d))
            })
            .min_by(|a, b| detection_order(*a, *b));
        if let Some((score, detection)) = best {
            hits.push(FrameHit {
                frame,
                score,
                detection,
            });
        }
    }

    if hits.is_empty() {
        return Ok(EvidenceRecord::unmatched(&q.id));
    }

    if q.src_temporal == TemporalScope::Single {
        // highest score, then lowest frame index (hits are in frame order)
        let best = hits
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| b.score.total_cmp(&a.score).then(ia.cmp(ib)))
            .map(|(i, _)| i)
            .expect("hits nonempty");
        hits = vec![hits.swap_remove(best)];
    }

    let names = match q.src_modality {
        EvidenceModality::Visual => {
            let answer_tokens = q.answers.iter().fold(TokenSet::default(), |acc, a| {
                acc.union(&normalize_tokens(a))
            });
            Some(answer_tokens.union(&normalize_tokens(&q.question)))
        }
        EvidenceModality::Text => None,
    };

    let mut record = EvidenceRecord::unmatched(&q.id);
    record.matched = true;
    for hit in &hits {
        let frame = video.frame(hit.frame)?;
        let ann = video.annotation(hit.frame)?;
        let token_box = hit.detection.bbox;
        let text_box = match best_paragraph(ann.paragraphs(), &token_box) {
            Some(p) => extend_box(
                &p.bbox,
                frame.width(),
                frame.height(),
                cfg.extend_pad_fraction,
            ),
            None => token_box,
        };
        let evidence_box = match &names {
            None => text_box,
            Some(names) => {
                let matched_objects = ann
                    .objects
                    .iter()
                    .filter(|o| score_name(&o.label, names) >= cfg.name_match_threshold)
                    .map(|o| &o.bbox);
                merge_boxes(std::iter::once(&text_box).chain(matched_objects))
                    .expect("at least the text box")
            }
        };
        record.relevant_frames.insert(hit.frame);
        record.text_boxes.insert(hit.frame, text_box);
        record.evidence_boxes.insert(hit.frame, evidence_box);
    }
    Ok(record)
}

/// OCR-similarity difficulty proxy: 1 minus the best similarity between any
/// OCR detection of the video and the gold answers. 1 when there is no OCR.
pub fn estimate_difficulty(q: &QAInstance, corpus: &Corpus) -> Result<f64, MatchError> {
    let video = corpus.video_of(q)?;
    let best = video
        .annotations()
        .iter()
        .flat_map(|a| a.ocr.iter())
        .filter_map(|d| score_text(&d.text, &q.answers))
        .fold(0.0, f64::max);
    Ok(1.0 - best)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RlPartition {
    /// Unmatched instances inside the difficulty band, with their difficulty.
    pub kept: Vec<(String, f64)>,
    pub dropped: Vec<(String, f64)>,
    /// Matched instances; these go to trajectory synthesis instead.
    pub matched: Vec<String>,
}

/// Routes unmatched instances by difficulty into RL candidates or drops.
pub fn partition_rl_candidates(
    instances: &[QAInstance],
    corpus: &Corpus,
    cfg: &MatcherConfig,
) -> Result<RlPartition, MatchError> {
    let [lo, hi] = cfg.difficulty_band;
    let mut out = RlPartition::default();
    for q in instances {
        if match_question(q, corpus, cfg)?.matched {
            out.matched.push(q.id.clone());
            continue;
        }
        let d = estimate_difficulty(q, corpus)?;
        if (lo..=hi).contains(&d) {
            out.kept.push((q.id.clone(), d));
        } else {
            out.dropped.push((q.id.clone(), d));
        }
    }
    Ok(out)
}
