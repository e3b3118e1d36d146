//! Planted-text corpora.
//!
//! Every frame is split into a `grid × grid` raster of cells filled with
//! low-contrast noise. Matchable videos carry one high-contrast sign cell on
//! one frame, annotated with the planted word as a token and a paragraph
//! detection. The word can only be recovered by looking at that cell, which
//! makes tool use load-bearing for the toy policies.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    BoundingBox, Corpus, CorpusError, EvidenceModality, Frame, FrameAnnotations, OcrDetection,
    OcrLevel, QAInstance, TemporalScope, Video,
};

pub const WORDS: [&str; 40] = [
    "exit", "open", "sale", "stop", "north", "south", "cafe", "hotel", "bank", "metro", "taxi",
    "bus", "gate", "pharmacy", "museum", "park", "bakery", "market", "garage", "school", "police",
    "library", "cinema", "harbor", "airport", "station", "river", "bridge", "tower", "castle",
    "garden", "studio", "office", "clinic", "arena", "plaza", "motel", "diner", "salon", "depot",
];

pub const QUESTION: &str = "What word is written on the sign?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    /// Prefix for video and instance ids.
    pub prefix: String,
    pub videos: usize,
    pub frames: usize,
    pub size: u32,
    pub grid: u32,
    /// How many of the videos (the last ones) carry no sign at all.
    pub unmatchable: usize,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            prefix: "vid".into(),
            videos: 10,
            frames: 4,
            size: 32,
            grid: 2,
            unmatchable: 0,
            seed: 0,
        }
    }
}

/// Pixel box of cell `cell` (row-major) in a `width × height` frame.
pub fn cell_box(width: u32, height: u32, grid: u32, cell: usize) -> BoundingBox {
    let (cw, ch) = (width / grid, height / grid);
    let (cx, cy) = (cell as u32 % grid, cell as u32 / grid);
    BoundingBox::new(cx * cw, cy * ch, (cx + 1) * cw, (cy + 1) * ch)
        .expect("grid cells are nonempty")
}

/// Cell whose box contains pixel `(x, y)`.
pub fn cell_of(width: u32, height: u32, grid: u32, x: u32, y: u32) -> usize {
    let cx = (x / (width / grid)).min(grid - 1);
    let cy = (y / (height / grid)).min(grid - 1);
    (cy * grid + cx) as usize
}

fn shrink(b: &BoundingBox, by: u32) -> BoundingBox {
    BoundingBox::new(b.x1() + by, b.y1() + by, b.x2() - by, b.y2() - by)
        .expect("cells are wider than twice the margin")
}

/// A stripe glyph keyed on the word's bytes: bright and dark columns.
fn sign_pixel(word: &str, x: u32, y: u32) -> u8 {
    let bytes = word.as_bytes();
    let b = bytes[(x as usize / 2) % bytes.len()];
    if (u32::from(b) >> (y % 4)) & 1 == 1 {
        235
    } else {
        20
    }
}

/// Generates one batch of planted videos and their questions.
pub fn planted_parts(spec: &PlantedSpec) -> Result<(Vec<Video>, Vec<QAInstance>), CorpusError> {
    if spec.grid == 0 || spec.size < spec.grid * 8 || spec.frames == 0 {
        return Err(CorpusError::InvalidFrame(format!(
            "planted frames need size >= 8 * grid and at least one frame, got size {} grid {} frames {}",
            spec.size, spec.grid, spec.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = (spec.grid * spec.grid) as usize;
    let mut videos = Vec::with_capacity(spec.videos);
    let mut instances = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let word = *WORDS.choose(&mut rng).expect("word list is nonempty");
        let matchable = v + spec.unmatchable < spec.videos;
        let sign_frame = rng.random_range(0..spec.frames);
        let sign_cell = rng.random_range(0..cells);
        let sign_box = cell_box(spec.size, spec.size, spec.grid, sign_cell);

        let mut frames = Vec::with_capacity(spec.frames);
        let mut annotations = Vec::with_capacity(spec.frames);
        for f in 0..spec.frames {
            let has_sign = matchable && f == sign_frame;
            let frame = Frame::from_fn(f, spec.size, spec.size, |x, y| {
                let noise = rng.random_range(0..12u8);
                if has_sign && sign_box.contains(&BoundingBox::new(x, y, x + 1, y + 1).unwrap()) {
                    sign_pixel(word, x - sign_box.x1(), y - sign_box.y1())
                } else {
                    110 + noise
                }
            })?;
            frames.push(frame);
            let mut ann = FrameAnnotations::default();
            if has_sign {
                ann.ocr.push(OcrDetection {
                    text: format!("sign {word}"),
                    bbox: shrink(&sign_box, 1),
                    level: OcrLevel::Paragraph,
                });
                ann.ocr.push(OcrDetection {
                    text: word.to_string(),
                    bbox: shrink(&sign_box, 3),
                    level: OcrLevel::Token,
                });
            }
            annotations.push(ann);
        }
        let id = format!("{}{v:03}", spec.prefix);
        videos.push(Video::new(id.clone(), frames, annotations)?);
        let answer = if matchable {
            word.to_string()
        } else {
            // nothing in the footage spells this out
            format!("{word}{}", rng.random_range(10..99))
        };
        instances.push(QAInstance {
            id: format!("{id}-q"),
            video: id,
            question: QUESTION.to_string(),
            answers: vec![answer],
            src_temporal: TemporalScope::Single,
            src_modality: EvidenceModality::Text,
        });
    }
    Ok((videos, instances))
}

/// Merges several planted batches into one corpus.
pub fn planted_corpus(specs: &[PlantedSpec]) -> Result<Corpus, CorpusError> {
    let mut videos = Vec::new();
    let mut instances = Vec::new();
    for spec in specs {
        let (v, q) = planted_parts(spec)?;
        videos.extend(v);
        instances.extend(q);
    }
    Corpus::new(videos, instances)
}
