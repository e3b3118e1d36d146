//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use videor4_core::corpus::{
    BoundingBox, Corpus, EvidenceModality, Frame, FrameAnnotations, ObjectDetection, OcrDetection,
    OcrLevel, QAInstance, TemporalScope, Video,
};
use videor4_core::evidence::{match_question, EvidenceRecord, MatcherConfig};
use videor4_core::synthetic::{planted_corpus, PlantedSpec};
use videor4_core::trajectory::{
    fill_placeholders, render_trajectory, Provenance, StubCaptioner, TemplateId, ToolCall,
    Trajectory, Turn,
};

/// Textbook Levenshtein table over chars.
pub fn dp_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in t[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = t[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = sub.min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

pub fn dp_nl(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        0.0
    } else {
        dp_edit_distance(a, b) as f64 / n as f64
    }
}

/// IoU by counting covered pixels.
pub fn pixel_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let w = a.x2().max(b.x2());
    let h = a.y2().max(b.y2());
    for y in 0..h {
        for x in 0..w {
            let ina = x >= a.x1() && x < a.x2() && y >= a.y1() && y < a.y2();
            let inb = x >= b.x1() && x < b.x2() && y >= b.y1() && y < b.y2();
            inter += u64::from(ina && inb);
            union += u64::from(ina || inb);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn light(s: &str) -> String {
    s.trim().to_lowercase()
}

fn words_of(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                '\u{0}'
            }
        })
        .filter(|&c| c != '\u{0}')
        .collect::<String>()
        .split_whitespace()
        .map(String::from)
        .collect()
}

fn pad_box(b: &BoundingBox, w: u32, h: u32, frac: f64) -> BoundingBox {
    let px = (f64::from(b.x2() - b.x1()) * frac).round() as i64;
    let py = (f64::from(b.y2() - b.y1()) * frac).round() as i64;
    let clamp = |v: i64, hi: u32| v.clamp(0, i64::from(hi)) as u32;
    BoundingBox::new(
        clamp(i64::from(b.x1()) - px, w),
        clamp(i64::from(b.y1()) - py, h),
        clamp(i64::from(b.x2()) + px, w).max(b.x2()),
        clamp(i64::from(b.y2()) + py, h).max(b.y2()),
    )
    .unwrap()
}

fn hull(boxes: &[BoundingBox]) -> BoundingBox {
    BoundingBox::new(
        boxes.iter().map(|b| b.x1()).min().unwrap(),
        boxes.iter().map(|b| b.y1()).min().unwrap(),
        boxes.iter().map(|b| b.x2()).max().unwrap(),
        boxes.iter().map(|b| b.y2()).max().unwrap(),
    )
    .unwrap()
}

/// Full sort key for ranking detections: score desc, area asc, text, coords.
fn rank(a: &(f64, &OcrDetection), b: &(f64, &OcrDetection)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap()
        .then(a.1.bbox.area().cmp(&b.1.bbox.area()))
        .then(a.1.text.cmp(&b.1.text))
        .then(a.1.bbox.coords().cmp(&b.1.bbox.coords()))
}

/// Exhaustive matcher: scores every detection, sorts every candidate list
/// completely and takes the head.
pub fn brute_force_match(q: &QAInstance, corpus: &Corpus, cfg: &MatcherConfig) -> EvidenceRecord {
    let video = corpus.video(&q.video).unwrap();
    let score = |text: &str| {
        q.answers
            .iter()
            .map(|a| 1.0 - dp_nl(&light(text), &light(a)))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut hits: Vec<(usize, f64, OcrDetection)> = Vec::new();
    for (f, ann) in video.annotations().iter().enumerate() {
        let mut cands: Vec<(f64, &OcrDetection)> = ann
            .ocr
            .iter()
            .filter(|d| d.level == OcrLevel::Token)
            .map(|d| (score(&d.text), d))
            .filter(|(s, _)| *s >= cfg.text_match_threshold)
            .collect();
        cands.sort_by(rank);
        if let Some((s, d)) = cands.first() {
            hits.push((f, *s, (*d).clone()));
        }
    }
    let mut out = EvidenceRecord {
        instance_id: q.id.clone(),
        relevant_frames: BTreeSet::new(),
        text_boxes: BTreeMap::new(),
        evidence_boxes: BTreeMap::new(),
        matched: false,
        helpful: None,
    };
    if hits.is_empty() {
        return out;
    }
    if q.src_temporal == TemporalScope::Single {
        hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        hits.truncate(1);
    }
    let mut names: BTreeSet<String> = BTreeSet::new();
    if q.src_modality == EvidenceModality::Visual {
        for a in &q.answers {
            names.extend(words_of(a));
        }
        names.extend(words_of(&q.question));
    }
    out.matched = true;
    for (f, _, tok) in hits {
        let frame = video.frame(f).unwrap();
        let ann = &video.annotations()[f];
        let mut paras: Vec<(f64, &OcrDetection)> = ann
            .ocr
            .iter()
            .filter(|d| d.level == OcrLevel::Paragraph)
            .map(|d| (pixel_iou(&d.bbox, &tok.bbox), d))
            .filter(|(o, _)| *o > 0.0)
            .collect();
        paras.sort_by(rank);
        let text_box = match paras.first() {
            Some((_, p)) => pad_box(
                &p.bbox,
                frame.width(),
                frame.height(),
                cfg.extend_pad_fraction,
            ),
            None => tok.bbox,
        };
        let ev_box = if q.src_modality == EvidenceModality::Visual {
            let mut boxes = vec![text_box];
            for o in &ann.objects {
                let s = names
                    .iter()
                    .map(|u| 1.0 - dp_nl(&light(&o.label), u))
                    .fold(0.0, f64::max);
                if s >= cfg.name_match_threshold {
                    boxes.push(o.bbox);
                }
            }
            hull(&boxes)
        } else {
            text_box
        };
        out.relevant_frames.insert(f);
        out.text_boxes.insert(f, text_box);
        out.evidence_boxes.insert(f, ev_box);
    }
    out
}

const VOCAB: [&str; 10] = [
    "station", "harbor", "bakery", "museum", "garden", "market", "office", "tower", "person",
    "bicycle",
];

pub const COMBOS: [(TemporalScope, EvidenceModality); 4] = [
    (TemporalScope::Single, EvidenceModality::Text),
    (TemporalScope::Single, EvidenceModality::Visual),
    (TemporalScope::Multi, EvidenceModality::Text),
    (TemporalScope::Multi, EvidenceModality::Visual),
];

/// A vocabulary word, sometimes with one or two character edits.
fn noisy_word(rng: &mut impl Rng) -> String {
    let mut w: Vec<char> = VOCAB.choose(rng).unwrap().chars().collect();
    for _ in 0..rng.random_range(0..3) {
        let i = rng.random_range(0..w.len());
        match rng.random_range(0..3) {
            0 => w[i] = rng.random_range(b'a'..=b'z') as char,
            1 if w.len() > 2 => {
                w.remove(i);
            }
            _ => w.insert(i, rng.random_range(b'a'..=b'z') as char),
        }
    }
    let s: String = w.into_iter().collect();
    if rng.random_bool(0.2) {
        s.to_uppercase()
    } else {
        s
    }
}

fn random_box(rng: &mut impl Rng, size: u32) -> BoundingBox {
    let x1 = rng.random_range(0..size - 1);
    let y1 = rng.random_range(0..size - 1);
    let x2 = rng.random_range(x1 + 1..=size);
    let y2 = rng.random_range(y1 + 1..=size);
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

/// Random corpus within 5 videos × 8 frames × 10 detections per frame.
/// Instance `k` of the corpus uses source combination `k % 4`.
pub fn random_matcher_corpus(rng: &mut impl Rng) -> Corpus {
    let size = 24;
    let n_videos = rng.random_range(1..=5);
    let mut videos = Vec::new();
    let mut instances = Vec::new();
    for v in 0..n_videos {
        let n_frames = rng.random_range(1..=8);
        let mut frames = Vec::new();
        let mut anns = Vec::new();
        for f in 0..n_frames {
            frames
                .push(Frame::from_fn(f, size, size, |x, y| ((x * 7 + y * 3) % 256) as u8).unwrap());
            let mut ann = FrameAnnotations::default();
            let n_det = rng.random_range(0..=10);
            for _ in 0..n_det {
                match rng.random_range(0..4) {
                    0 | 1 => ann.ocr.push(OcrDetection {
                        text: noisy_word(rng),
                        bbox: random_box(rng, size),
                        level: OcrLevel::Token,
                    }),
                    2 => {
                        // paragraphs usually sit around an existing token
                        let bbox = match ann.ocr.last() {
                            Some(t) if rng.random_bool(0.7) => BoundingBox::new(
                                t.bbox.x1().saturating_sub(rng.random_range(0..3)),
                                t.bbox.y1().saturating_sub(rng.random_range(0..3)),
                                (t.bbox.x2() + rng.random_range(0..3)).min(size),
                                (t.bbox.y2() + rng.random_range(0..3)).min(size),
                            )
                            .unwrap(),
                            _ => random_box(rng, size),
                        };
                        ann.ocr.push(OcrDetection {
                            text: format!("{} {}", noisy_word(rng), noisy_word(rng)),
                            bbox,
                            level: OcrLevel::Paragraph,
                        });
                    }
                    _ => ann.objects.push(ObjectDetection {
                        label: noisy_word(rng),
                        bbox: random_box(rng, size),
                    }),
                }
            }
            anns.push(ann);
        }
        let id = format!("v{v}");
        videos.push(Video::new(id.clone(), frames, anns).unwrap());
        for k in 0..rng.random_range(1..=3) {
            let idx = instances.len();
            let (t, m) = COMBOS[idx % 4];
            let n_ans = rng.random_range(1..=2);
            instances.push(QAInstance {
                id: format!("{id}-q{k}"),
                video: id.clone(),
                question: format!(
                    "Which {} is next to the {}?",
                    VOCAB.choose(rng).unwrap(),
                    VOCAB.choose(rng).unwrap()
                ),
                answers: (0..n_ans)
                    .map(|_| VOCAB.choose(rng).unwrap().to_string())
                    .collect(),
                src_temporal: t,
                src_modality: m,
            });
        }
    }
    Corpus::new(videos, instances).unwrap()
}

fn random_text(rng: &mut impl Rng, alphabet: &[char], max: usize) -> String {
    (0..rng.random_range(0..=max))
        .map(|_| *alphabet.choose(rng).unwrap())
        .collect()
}

/// Random trajectory that passes the structural checks: thinks and answers
/// draw from an alphabet with braces, angle brackets, backslashes and
/// newlines; candidates that trip a reserved marker are redrawn.
pub fn random_valid_trajectory(rng: &mut impl Rng, id: usize) -> Trajectory {
    let think_chars: Vec<char> = "ab xyz{}<>/\\_:\"\n0123456789.,".chars().collect();
    let answer_chars: Vec<char> = "abc XYZ<>/\\_:\"0123-".chars().collect();
    let n_calls = rng.random_range(0..5);
    loop {
        let mut turns = Vec::new();
        for _ in 0..n_calls {
            let call = if rng.random_bool(0.5) {
                let mut frames: Vec<usize> = (0..rng.random_range(1..6))
                    .map(|_| rng.random_range(0..40))
                    .collect();
                frames.sort_unstable();
                frames.dedup();
                if rng.random_bool(0.3) {
                    frames.reverse();
                }
                ToolCall::Clip { frames }
            } else {
                ToolCall::Crop {
                    frame: rng.random_range(0..40),
                    bbox: random_box(rng, 640),
                }
            };
            turns.push(Turn::call(random_text(rng, &think_chars, 40), call));
        }
        // balanced braces by construction
        let mut answer = random_text(rng, &answer_chars, 12);
        if rng.random_bool(0.3) {
            answer = format!("{{{answer}}}");
        }
        turns.push(Turn::answer(random_text(rng, &think_chars, 40), answer));
        let t = Trajectory {
            id: format!("t{id}"),
            instance_id: format!("q{id}"),
            provenance: Provenance::Synthesized,
            template: None,
            turns,
        };
        if t.structure_errors().is_empty() {
            return t;
        }
    }
}

/// A planted corpus, its evidence and one filled locate-and-read trajectory
/// per instance.
pub fn qc_fixture(n: usize, seed: u64) -> (Arc<Corpus>, Vec<EvidenceRecord>, Vec<Trajectory>) {
    let corpus = planted_corpus(&[PlantedSpec {
        videos: n,
        seed,
        ..PlantedSpec::default()
    }])
    .unwrap();
    let mut evidence = Vec::new();
    let mut trajectories = Vec::new();
    for q in corpus.instances() {
        let ev = match_question(q, &corpus, &MatcherConfig::default()).unwrap();
        let raw = render_trajectory(&ev, q, TemplateId::LocateRead).unwrap();
        trajectories
            .push(fill_placeholders(&raw, q, corpus.video_of(q).unwrap(), &StubCaptioner).unwrap());
        evidence.push(ev);
    }
    (Arc::new(corpus), evidence, trajectories)
}
