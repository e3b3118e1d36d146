//! Videos, frames, OCR/object annotations and QA instances.
//!
//! On disk a corpus is a directory holding `instances.jsonl` plus one
//! sub-directory per video. Each video directory carries `annotations.json`
//! and grayscale-convertible frame images named `frame_%06d.png`.
//!
//! Boxes use integer pixel coordinates with the origin at the top-left
//! corner and a half-open max edge, so `width = x2 - x1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}{}: field `{field}`: {message}", file.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Malformed {
        file: PathBuf,
        line: Option<usize>,
        field: String,
        message: String,
    },
    #[error("instance `{instance_id}` references unknown video `{video}`")]
    DanglingReference { instance_id: String, video: String },
    #[error("video `{video}`: frame index {index} out of range ({count} frames)")]
    FrameOutOfRange {
        video: String,
        index: usize,
        count: usize,
    },
    #[error("duplicate frame index {index} in selection")]
    DuplicateFrame { index: usize },
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: need x1 < x2 and y1 < y2")]
    InvalidBox { x1: u32, y1: u32, x2: u32, y2: u32 },
    #[error("box {bbox} exceeds frame bounds {width}x{height}")]
    BoxOutOfBounds {
        bbox: BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Axis-aligned pixel box, half-open on the max edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 < x2 && y1 < y2 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(CorpusError::InvalidBox { x1, y1, x2, y2 })
        }
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn x2(&self) -> u32 {
        self.x2
    }
    pub fn y2(&self) -> u32 {
        self.y2
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    pub fn center(&self) -> (u32, u32) {
        ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = CorpusError;

    fn try_from([x1, y1, x2, y2]: [u32; 4]) -> Result<Self> {
        Self::new(x1, y1, x2, y2)
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// A grayscale frame. `pixels` is row-major with `width * height` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    index: usize,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(index: usize, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CorpusError::InvalidFrame(format!(
                "frame {index} has zero dimension {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(CorpusError::InvalidFrame(format!(
                "frame {index}: {} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            index,
            width,
            height,
            pixels,
        })
    }

    /// Builds a frame by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        index: usize,
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> u8,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(index, width, height, pixels)
    }

    pub fn index(&self) -> usize {
        self.index
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox {
            x1: 0,
            y1: 0,
            x2: self.width,
            y2: self.height,
        }
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcrLevel {
    Paragraph,
    Token,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOcr")]
pub struct OcrDetection {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub level: OcrLevel,
}

#[derive(Deserialize)]
struct RawOcr {
    text: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    level: OcrLevel,
}

impl TryFrom<RawOcr> for OcrDetection {
    type Error = String;

    fn try_from(raw: RawOcr) -> std::result::Result<Self, String> {
        if raw.text.trim().is_empty() {
            return Err("OCR text is empty".into());
        }
        Ok(Self {
            text: raw.text,
            bbox: raw.bbox,
            level: raw.level,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawObject")]
pub struct ObjectDetection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Deserialize)]
struct RawObject {
    label: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

impl TryFrom<RawObject> for ObjectDetection {
    type Error = String;

    fn try_from(raw: RawObject) -> std::result::Result<Self, String> {
        if raw.label.trim().is_empty() {
            return Err("object label is empty".into());
        }
        Ok(Self {
            label: raw.label,
            bbox: raw.bbox,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameAnnotations {
    pub ocr: Vec<OcrDetection>,
    pub objects: Vec<ObjectDetection>,
}

impl FrameAnnotations {
    pub fn paragraphs(&self) -> impl Iterator<Item = &OcrDetection> {
        self.ocr.iter().filter(|d| d.level == OcrLevel::Paragraph)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &OcrDetection> {
        self.ocr.iter().filter(|d| d.level == OcrLevel::Token)
    }
}

/// Ordered frames of one video with their annotations, index-aligned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    id: String,
    frames: Vec<Frame>,
    annotations: Vec<FrameAnnotations>,
}

impl Video {
    /// Frames must be numbered `0..n` in order and every annotation box must
    /// fit its frame.
    pub fn new(
        id: impl Into<String>,
        frames: Vec<Frame>,
        annotations: Vec<FrameAnnotations>,
    ) -> Result<Self> {
        let id = id.into();
        if frames.len() != annotations.len() {
            return Err(CorpusError::InvalidFrame(format!(
                "video `{id}`: {} frames but {} annotation entries",
                frames.len(),
                annotations.len()
            )));
        }
        for (pos, (frame, ann)) in frames.iter().zip(&annotations).enumerate() {
            if frame.index != pos {
                return Err(CorpusError::FrameOutOfRange {
                    video: id,
                    index: frame.index,
                    count: frames.len(),
                });
            }
            let boxes = ann
                .ocr
                .iter()
                .map(|d| d.bbox)
                .chain(ann.objects.iter().map(|o| o.bbox));
            for bbox in boxes {
                if !bbox.fits_within(frame.width, frame.height) {
                    return Err(CorpusError::BoxOutOfBounds {
                        bbox,
                        width: frame.width,
                        height: frame.height,
                    });
                }
            }
        }
        Ok(Self {
            id,
            frames,
            annotations,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
    pub fn annotations(&self) -> &[FrameAnnotations] {
        &self.annotations
    }
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, index: usize) -> Result<&Frame> {
        self.frames.get(index).ok_or(CorpusError::FrameOutOfRange {
            video: self.id.clone(),
            index,
            count: self.frames.len(),
        })
    }

    pub fn annotation(&self, index: usize) -> Result<&FrameAnnotations> {
        self.annotations
            .get(index)
            .ok_or(CorpusError::FrameOutOfRange {
                video: self.id.clone(),
                index,
                count: self.frames.len(),
            })
    }
}

/// Whether the evidence for a question sits in one frame or spans several.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalScope {
    Single,
    Multi,
}

/// Whether the evidence is primarily OCR text or visual objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceModality {
    Text,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawInstance")]
pub struct QAInstance {
    pub id: String,
    pub video: String,
    pub question: String,
    pub answers: Vec<String>,
    pub src_temporal: TemporalScope,
    pub src_modality: EvidenceModality,
}

#[derive(Deserialize)]
struct RawInstance {
    id: String,
    video: String,
    question: String,
    answers: Vec<String>,
    src_temporal: TemporalScope,
    src_modality: EvidenceModality,
}

impl TryFrom<RawInstance> for QAInstance {
    type Error = String;

    fn try_from(raw: RawInstance) -> std::result::Result<Self, String> {
        if raw.id.trim().is_empty() {
            return Err("instance id is empty".into());
        }
        if raw.answers.is_empty() {
            return Err("answers must be nonempty".into());
        }
        Ok(Self {
            id: raw.id,
            video: raw.video,
            question: raw.question,
            answers: raw.answers,
            src_temporal: raw.src_temporal,
            src_modality: raw.src_modality,
        })
    }
}

/// Validated, immutable collection of videos and the questions about them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    videos: BTreeMap<String, Video>,
    instances: Vec<QAInstance>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(videos: Vec<Video>, instances: Vec<QAInstance>) -> Result<Self> {
        let videos: BTreeMap<String, Video> =
            videos.into_iter().map(|v| (v.id.clone(), v)).collect();
        let mut by_id = BTreeMap::new();
        for (pos, inst) in instances.iter().enumerate() {
            if !videos.contains_key(&inst.video) {
                return Err(CorpusError::DanglingReference {
                    instance_id: inst.id.clone(),
                    video: inst.video.clone(),
                });
            }
            if by_id.insert(inst.id.clone(), pos).is_some() {
                return Err(CorpusError::Malformed {
                    file: PathBuf::from(INSTANCES_FILE),
                    line: Some(pos + 1),
                    field: "id".into(),
                    message: format!("duplicate instance id `{}`", inst.id),
                });
            }
        }
        Ok(Self {
            videos,
            instances,
            by_id,
        })
    }

    pub fn videos(&self) -> impl Iterator<Item = &Video> {
        self.videos.values()
    }

    pub fn video(&self, id: &str) -> Option<&Video> {
        self.videos.get(id)
    }

    pub fn instances(&self) -> &[QAInstance] {
        &self.instances
    }

    pub fn instance(&self, id: &str) -> Option<&QAInstance> {
        self.by_id.get(id).map(|&pos| &self.instances[pos])
    }

    pub fn video_of(&self, instance: &QAInstance) -> Result<&Video> {
        self.video(&instance.video)
            .ok_or_else(|| CorpusError::DanglingReference {
                instance_id: instance.id.clone(),
                video: instance.video.clone(),
            })
    }
}

/// Copies the boxed region of `frame` into a new frame with the same index.
pub fn crop_pixels(frame: &Frame, bbox: &BoundingBox) -> Result<Frame> {
    if !bbox.fits_within(frame.width, frame.height) {
        return Err(CorpusError::BoxOutOfBounds {
            bbox: *bbox,
            width: frame.width,
            height: frame.height,
        });
    }
    let mut pixels = Vec::with_capacity(bbox.area() as usize);
    let stride = frame.width as usize;
    for y in bbox.y1..bbox.y2 {
        let row = y as usize * stride;
        pixels.extend_from_slice(&frame.pixels[row + bbox.x1 as usize..row + bbox.x2 as usize]);
    }
    Frame::new(frame.index, bbox.width(), bbox.height(), pixels)
}

/// Returns the frames at `indices`, in the given order.
pub fn select_frames<'v>(video: &'v Video, indices: &[usize]) -> Result<Vec<&'v Frame>> {
    let mut seen = BTreeSet::new();
    indices
        .iter()
        .map(|&index| {
            if !seen.insert(index) {
                return Err(CorpusError::DuplicateFrame { index });
            }
            video.frame(index)
        })
        .collect()
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    frames: Vec<FrameRecord>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    width: u32,
    height: u32,
    #[serde(default)]
    ocr: Vec<OcrDetection>,
    #[serde(default)]
    objects: Vec<ObjectDetection>,
}

fn malformed_json(
    file: &Path,
    line: Option<usize>,
    err: serde_path_to_error::Error<serde_json::Error>,
) -> CorpusError {
    let field = err.path().to_string();
    let inner = err.into_inner();
    CorpusError::Malformed {
        file: file.to_path_buf(),
        line: line.or(Some(inner.line()).filter(|&l| l > 0)),
        field,
        message: inner.to_string(),
    }
}

/// Loads and validates a corpus rooted at `root`.
///
/// Every sub-directory holding an `annotations.json` is a video, keyed by its
/// directory name.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let mut video_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.is_dir() && path.join(ANNOTATIONS_FILE).is_file() {
            video_dirs.push(path);
        }
    }
    video_dirs.sort();

    let videos = video_dirs
        .iter()
        .map(|dir| load_video(dir))
        .collect::<Result<Vec<_>>>()?;
    let instances = load_instances(&root.join(INSTANCES_FILE))?;
    Corpus::new(videos, instances)
}

pub fn load_instances(path: &Path) -> Result<Vec<QAInstance>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut instances = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let inst: QAInstance = serde_path_to_error::deserialize(de)
            .map_err(|e| malformed_json(path, Some(n + 1), e))?;
        instances.push(inst);
    }
    Ok(instances)
}

fn load_video(dir: &Path) -> Result<Video> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let file: AnnotationFile =
        serde_path_to_error::deserialize(de).map_err(|e| malformed_json(&ann_path, None, e))?;

    let count = file.frames.len();
    let mut frames = Vec::with_capacity(count);
    let mut annotations = Vec::with_capacity(count);
    for (pos, rec) in file.frames.into_iter().enumerate() {
        if rec.index != pos {
            return Err(CorpusError::FrameOutOfRange {
                video: id,
                index: rec.index,
                count,
            });
        }
        for (k, det) in rec.ocr.iter().enumerate() {
            check_box_fits(
                &ann_path,
                &format!("frames[{pos}].ocr[{k}].box"),
                det.bbox,
                rec.width,
                rec.height,
            )?;
        }
        for (k, obj) in rec.objects.iter().enumerate() {
            check_box_fits(
                &ann_path,
                &format!("frames[{pos}].objects[{k}].box"),
                obj.bbox,
                rec.width,
                rec.height,
            )?;
        }
        let img_path = dir.join(frame_file_name(rec.index));
        let frame = read_gray_image(&img_path, rec.index)?;
        if frame.width != rec.width || frame.height != rec.height {
            return Err(CorpusError::Malformed {
                file: ann_path.clone(),
                line: None,
                field: format!("frames[{pos}]"),
                message: format!(
                    "declared {}x{} but image is {}x{}",
                    rec.width, rec.height, frame.width, frame.height
                ),
            });
        }
        frames.push(frame);
        annotations.push(FrameAnnotations {
            ocr: rec.ocr,
            objects: rec.objects,
        });
    }
    Video::new(id, frames, annotations)
}

fn check_box_fits(
    file: &Path,
    field: &str,
    bbox: BoundingBox,
    width: u32,
    height: u32,
) -> Result<()> {
    if bbox.fits_within(width, height) {
        Ok(())
    } else {
        Err(CorpusError::Malformed {
            file: file.to_path_buf(),
            line: None,
            field: field.to_string(),
            message: format!("box {bbox} exceeds frame {width}x{height}"),
        })
    }
}

/// Reads an image, converting colour to gray by averaging the RGB channels.
pub fn read_gray_image(path: &Path, index: usize) -> Result<Frame> {
    if !path.is_file() {
        return Err(CorpusError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "frame image missing"),
        });
    }
    let img = image::open(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (width, height) = (img.width(), img.height());
    let pixels = if img.color().has_color() {
        img.to_rgb8()
            .pixels()
            .map(|p| ((u16::from(p[0]) + u16::from(p[1]) + u16::from(p[2]) + 1) / 3) as u8)
            .collect()
    } else {
        img.to_luma8().into_raw()
    };
    Frame::new(index, width, height, pixels)
}

pub fn write_gray_image(path: &Path, frame: &Frame) -> Result<()> {
    let img = image::GrayImage::from_raw(frame.width, frame.height, frame.pixels.clone())
        .ok_or_else(|| CorpusError::InvalidFrame("pixel buffer size mismatch".into()))?;
    img.save(path).map_err(|e| CorpusError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Encodes a frame as PNG bytes.
pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(frame.width, frame.height, frame.pixels.clone())
        .ok_or_else(|| CorpusError::InvalidFrame("pixel buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CorpusError::Image {
            path: PathBuf::from("<memory>"),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

/// Writes `corpus` in the layout [`load_corpus`] reads.
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for video in corpus.videos() {
        let dir = root.join(&video.id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let records = video
            .frames
            .iter()
            .zip(&video.annotations)
            .map(|(f, a)| FrameRecord {
                index: f.index,
                width: f.width,
                height: f.height,
                ocr: a.ocr.clone(),
                objects: a.objects.clone(),
            })
            .collect();
        let ann_path = dir.join(ANNOTATIONS_FILE);
        let json = serde_json::to_string_pretty(&AnnotationFile { frames: records })
            .expect("annotation records serialize");
        fs::write(&ann_path, json).map_err(io_err(&ann_path))?;
        for frame in &video.frames {
            write_gray_image(&dir.join(frame_file_name(frame.index)), frame)?;
        }
    }
    let inst_path = root.join(INSTANCES_FILE);
    let mut out = String::new();
    for inst in &corpus.instances {
        out.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        out.push('\n');
    }
    fs::write(&inst_path, out).map_err(io_err(&inst_path))
}
