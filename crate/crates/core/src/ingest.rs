//! On-disk formats: QA samples, subtitles, per-frame perception annotations,
//! frame feature matrices and the plot-summary knowledge base.
//!
//! Every JSONL record may carry a `schema_version`; records written by this
//! crate always do. See `docs/formats.md` for the full layouts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Dimension of face descriptors in annotations and galleries.
pub const FACE_EMBEDDING_DIM: usize = 128;

/// Label shared by the unknown character and the unknown place.
pub const UNKNOWN: &str = "unknown";

/// Upper bound on distinct action labels carried by a scene.
pub const ACTION_VOCABULARY_SIZE: usize = 157;

/// Upper bound on raw place labels per frame before remapping.
pub const PLACE_SOURCE_LABELS: usize = 365;

/// Environment variable consulted when `--data-root` is not given.
pub const DATA_ROOT_ENV: &str = "ROLL_DATA_ROOT";

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// Pixel box `(x, y, w, h)`, serialized as a four-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Intersection over union; zero for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    pub(crate) fn total_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Visual,
    Textual,
    Temporal,
    Knowledge,
    None,
}

impl Category {
    /// The four categories reported separately by the evaluator.
    pub const SCORED: [Category; 4] = [
        Category::Visual,
        Category::Textual,
        Category::Temporal,
        Category::Knowledge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Visual => "visual",
            Category::Textual => "textual",
            Category::Temporal => "temporal",
            Category::Knowledge => "knowledge",
            Category::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtitleFormat {
    Srt,
    #[default]
    Plain,
}

/// One multiple-choice question about a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub sample_id: String,
    pub scene_id: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub gold_index: usize,
    pub category: Category,
    pub subtitles: String,
    #[serde(default)]
    pub subtitle_format: SubtitleFormat,
}

impl QASample {
    const REQUIRED: &'static [&'static str] = &[
        "sample_id",
        "scene_id",
        "question",
        "candidates",
        "gold_index",
        "category",
        "subtitles",
    ];

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.candidates.is_empty() {
            return Err("candidates must be non-empty".into());
        }
        if self.gold_index >= self.candidates.len() {
            return Err(format!(
                "gold_index {} out of range for {} candidates",
                self.gold_index,
                self.candidates.len()
            ));
        }
        Ok(())
    }

    /// Subtitles as plain text, decoding SRT when the sample says so.
    pub fn plain_subtitles(&self) -> Result<String> {
        parse_subtitles(&self.subtitles, self.subtitle_format)
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub bbox: BBox,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedTriplet {
    pub subject_label: String,
    pub relation_label: String,
    pub object_label: String,
    pub subject_bbox: BBox,
    pub object_bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_feature: Option<Vec<f64>>,
    #[serde(default)]
    pub faces: Vec<FaceObservation>,
    #[serde(default)]
    pub place_scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub triplets: Vec<DetectedTriplet>,
}

fn default_fps() -> f64 {
    1.0
}

/// Perception outputs for one scene, sampled at `fps_slow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotations {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub scene_id: String,
    pub episode_id: String,
    #[serde(default = "default_fps")]
    pub fps_slow: f64,
    #[serde(default)]
    pub action_scores: BTreeMap<String, f64>,
    pub frames: Vec<FrameAnnotation>,
}

impl SceneAnnotations {
    const REQUIRED: &'static [&'static str] = &["scene_id", "episode_id", "frames"];

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.action_scores.len() > ACTION_VOCABULARY_SIZE {
            return Err(format!(
                "{} action labels exceeds vocabulary of {ACTION_VOCABULARY_SIZE}",
                self.action_scores.len()
            ));
        }
        for pair in self.frames.windows(2) {
            if pair[0].frame_index >= pair[1].frame_index {
                return Err(format!(
                    "frames out of order: {} then {}",
                    pair[0].frame_index, pair[1].frame_index
                ));
            }
        }
        for frame in &self.frames {
            let at = frame.frame_index;
            if frame.place_scores.len() > PLACE_SOURCE_LABELS {
                return Err(format!("frame {at}: more than {PLACE_SOURCE_LABELS} place labels"));
            }
            for face in &frame.faces {
                if !face.bbox.is_valid() {
                    return Err(format!("frame {at}: face box must have positive size"));
                }
                if face.embedding.len() != FACE_EMBEDDING_DIM {
                    return Err(format!(
                        "frame {at}: face embedding has dimension {}, expected {FACE_EMBEDDING_DIM}",
                        face.embedding.len()
                    ));
                }
            }
            for t in &frame.triplets {
                if !t.subject_bbox.is_valid() || !t.object_bbox.is_valid() {
                    return Err(format!("frame {at}: triplet box must have positive size"));
                }
                if !t.score.is_finite() {
                    return Err(format!("frame {at}: triplet score is not finite"));
                }
            }
        }
        Ok(())
    }

    /// Frame features in frame order; fails if any frame lacks one.
    pub fn frame_features(&self) -> Result<Vec<&[f64]>> {
        self.frames
            .iter()
            .map(|f| {
                f.frame_feature.as_deref().ok_or_else(|| {
                    Error::NotFound(format!(
                        "frame feature for scene {} frame {}",
                        self.scene_id, f.frame_index
                    ))
                })
            })
            .collect()
    }
}

fn check_schema(value: &serde_json::Value, line: usize) -> Result<()> {
    if let Some(v) = value.get("schema_version") {
        match v.as_u64() {
            Some(v) if v as u32 == SCHEMA_VERSION => {}
            _ => {
                return Err(Error::MalformedLine {
                    line,
                    message: format!("unsupported schema_version {v}"),
                })
            }
        }
    }
    Ok(())
}

fn parse_jsonl<T, R>(
    reader: R,
    required: &[&'static str],
    validate: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        if let Some(field) = required.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::MissingField { field, line: line_no });
        }
        check_schema(&value, line_no)?;
        let record: T = serde_json::from_value(value).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        validate(&record).map_err(|message| Error::MalformedLine { line: line_no, message })?;
        out.push(record);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<QASample>> {
    parse_jsonl(reader, QASample::REQUIRED, QASample::validate)
}

/// Loads a JSONL file of QA samples, preserving file order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QASample>> {
    parse_dataset(open(path.as_ref())?)
}

pub fn parse_scenes(reader: impl BufRead) -> Result<Vec<SceneAnnotations>> {
    parse_jsonl(reader, SceneAnnotations::REQUIRED, SceneAnnotations::validate)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneAnnotations>> {
    parse_scenes(open(path.as_ref())?)
}

/// Writes records as JSONL, one compact object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

static MARKUP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^>]*>|\{[^}]*\}").unwrap());

fn parse_timestamp(s: &str) -> Option<u64> {
    let (hms, ms) = s.split_once([',', '.'])?;
    let mut parts = hms.split(':');
    let (h, m, sec) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || m.len() != 2 || sec.len() != 2 || ms.is_empty() || ms.len() > 3 {
        return None;
    }
    let all_digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    if ![h, m, sec, ms].into_iter().all(all_digits) {
        return None;
    }
    let (h, m, sec, ms): (u64, u64, u64, u64) = (h.parse().ok()?, m.parse().ok()?, sec.parse().ok()?, ms.parse().ok()?);
    if m >= 60 || sec >= 60 {
        return None;
    }
    Some(((h * 60 + m) * 60 + sec) * 1000 + ms)
}

fn parse_timecode_line(line: &str) -> Option<(u64, u64)> {
    let (start, rest) = line.split_once("-->")?;
    // Anything after the end stamp (positioning hints) is ignored.
    let end = rest.split_whitespace().next()?;
    Some((parse_timestamp(start.trim())?, parse_timestamp(end)?))
}

/// Extracts the spoken text of a subtitle file.
///
/// SRT input loses sequence numbers, timecodes and markup; cue texts are
/// joined with single spaces. Plain input is returned untouched.
pub fn parse_subtitles(raw: &str, format: SubtitleFormat) -> Result<String> {
    match format {
        SubtitleFormat::Plain => Ok(raw.to_string()),
        SubtitleFormat::Srt => parse_srt(raw),
    }
}

fn parse_srt(raw: &str) -> Result<String> {
    let raw = raw.trim_start_matches('\u{feff}').replace("\r\n", "\n");
    let mut words: Vec<String> = Vec::new();
    let mut cue = 0;
    let mut lines = raw.lines().peekable();
    loop {
        while lines.peek().is_some_and(|l| l.trim().is_empty()) {
            lines.next();
        }
        let Some(first) = lines.next() else { break };
        cue += 1;
        let first = first.trim();
        let timing = if first.bytes().all(|b| b.is_ascii_digit()) {
            lines.next().map(str::trim).unwrap_or("")
        } else {
            first
        };
        if !timing.contains("-->") {
            return Err(Error::Subtitle {
                cue,
                message: format!("expected timecode, found {timing:?}"),
            });
        }
        let (start, end) = parse_timecode_line(timing).ok_or_else(|| Error::Subtitle {
            cue,
            message: format!("unparseable timecode {timing:?}"),
        })?;
        if end < start {
            return Err(Error::Subtitle {
                cue,
                message: "cue ends before it starts".into(),
            });
        }
        while let Some(text) = lines.next_if(|l| !l.trim().is_empty()) {
            let clean = MARKUP.replace_all(text, " ");
            words.extend(clean.split_whitespace().map(str::to_string));
        }
    }
    Ok(words.join(" "))
}

/// Whitespace tokenization used everywhere a "word" is counted.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Plot summaries keyed by episode identifier.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KnowledgeBase {
    entries: BTreeMap<String, String>,
}

impl KnowledgeBase {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, doc) in entries {
            if map.insert(id.clone(), doc).is_some() {
                return Err(Error::KnowledgeBase(format!("duplicate episode_id {id}")));
            }
        }
        Ok(KnowledgeBase { entries: map })
    }

    pub fn get(&self, episode_id: &str) -> Option<&str> {
        self.entries.get(episode_id).map(String::as_str)
    }

    pub fn word_count(&self, episode_id: &str) -> Option<usize> {
        self.get(episode_id).map(word_count)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Checks that every scene's episode resolves to a document.
    pub fn validate_scenes<'a>(&self, scenes: impl IntoIterator<Item = &'a SceneAnnotations>) -> Result<()> {
        let mut missing: Vec<&str> = scenes
            .into_iter()
            .filter(|s| !self.entries.contains_key(&s.episode_id))
            .map(|s| s.episode_id.as_str())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::KnowledgeBase(format!(
                "unresolved episode ids: {}",
                missing.join(", ")
            )))
        }
    }
}

/// Loads one UTF-8 document per file; the file stem is the episode id.
pub fn load_knowledge_base(dir: impl AsRef<Path>) -> Result<KnowledgeBase> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            !p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.'))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::KnowledgeBase(format!("{} contains no documents", dir.display())));
    }
    let mut entries = Vec::with_capacity(files.len());
    for path in files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::KnowledgeBase(format!("bad file name {}", path.display())))?
            .to_string();
        let doc = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if word_count(&doc) == 0 {
            log::warn!("knowledge base document {id} is empty");
        }
        entries.push((id, doc));
    }
    KnowledgeBase::from_entries(entries)
}

/// Metadata for one row of a [`FeatureMatrix`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRow {
    pub scene_id: String,
    pub episode_id: String,
    pub frame_index: u32,
}

#[derive(Serialize, Deserialize)]
struct FeatureSidecar {
    schema_version: u32,
    dim: usize,
    dtype: String,
    rows: Vec<FrameRow>,
}

/// Dense row-major frame features plus the sidecar index.
///
/// On disk: little-endian `f32` rows in `<name>.bin`, the index in
/// `<name>.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
    pub rows: Vec<FrameRow>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        FeatureMatrix {
            dim,
            data: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: FrameRow, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: feature.len(),
            });
        }
        self.data.extend_from_slice(feature);
        self.rows.push(row);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    pub fn write(&self, bin: impl AsRef<Path>) -> Result<()> {
        let bin = bin.as_ref();
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
        let sidecar = FeatureSidecar {
            schema_version: SCHEMA_VERSION,
            dim: self.dim,
            dtype: "f32le".into(),
            rows: self.rows.clone(),
        };
        let side = Self::sidecar_path(bin);
        let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::to_writer_pretty(&mut f, &sidecar).expect("sidecar serializes");
        f.write_all(b"\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(bin: impl AsRef<Path>) -> Result<Self> {
        let bin = bin.as_ref();
        let side = Self::sidecar_path(bin);
        let sidecar: FeatureSidecar = serde_json::from_reader(open(&side)?)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", side.display())))?;
        if sidecar.schema_version != SCHEMA_VERSION || sidecar.dtype != "f32le" {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported schema {} / dtype {}",
                side.display(),
                sidecar.schema_version,
                sidecar.dtype
            )));
        }
        let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
        let expected = sidecar.rows.len() * sidecar.dim * 4;
        if bytes.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{}: {} bytes, sidecar implies {expected}",
                bin.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(FeatureMatrix {
            dim: sidecar.dim,
            data,
            rows: sidecar.rows,
        })
    }
}

/// Fills `frame_feature` for frames that have a matching matrix row.
/// Returns how many frames were filled.
pub fn attach_features(scenes: &mut [SceneAnnotations], matrix: &FeatureMatrix) -> usize {
    let index: HashMap<(&str, u32), usize> = matrix
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.scene_id.as_str(), r.frame_index), i))
        .collect();
    let mut filled = 0;
    for scene in scenes.iter_mut() {
        for frame in scene.frames.iter_mut().filter(|f| f.frame_feature.is_none()) {
            if let Some(&i) = index.get(&(scene.scene_id.as_str(), frame.frame_index)) {
                frame.frame_feature = Some(matrix.row(i).to_vec());
                filled += 1;
            }
        }
    }
    filled
}

/// Standard layout of a data directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataRoot(PathBuf);

impl DataRoot {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DataRoot(path.into())
    }

    /// Flag value, else `$ROLL_DATA_ROOT`, else the working directory.
    pub fn resolve(flag: Option<PathBuf>) -> Self {
        let path = flag
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        DataRoot(path)
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn dataset(&self) -> PathBuf {
        self.0.join("qa.jsonl")
    }

    pub fn scenes(&self) -> PathBuf {
        self.0.join("scenes.jsonl")
    }

    pub fn features(&self) -> PathBuf {
        self.0.join("features.bin")
    }

    pub fn gallery(&self) -> PathBuf {
        self.0.join("gallery.jsonl")
    }

    pub fn places(&self) -> PathBuf {
        self.0.join("places.txt")
    }

    pub fn knowledge_base(&self) -> PathBuf {
        self.0.join("kb")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_line(id: &str) -> String {
        format!(
            r#"{{"sample_id":"{id}","scene_id":"s1","question":"Who?","candidates":["a","b","c","d"],"gold_index":2,"category":"visual","subtitles":"Hi."}}"#
        )
    }

    #[test]
    fn dataset_preserves_order() {
        let text = [sample_line("q1"), sample_line("q2"), sample_line("q3")].join("\n");
        let samples = parse_dataset(text.as_bytes()).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
        assert_eq!(samples[0].n_candidates(), 4);
        assert_eq!(samples[0].schema_version, SCHEMA_VERSION);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let bad =
            r#"{"sample_id":"q2","scene_id":"s1","question":"Who?","gold_index":0,"category":"none","subtitles":""}"#;
        let text = format!("{}\n{bad}\n", sample_line("q1"));
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "missing field: candidates @ line 2");
    }

    #[test]
    fn malformed_line_is_reported() {
        let text = format!("{}\n{{not json\n", sample_line("q1"));
        match parse_dataset(text.as_bytes()).unwrap_err() {
            Error::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn gold_index_out_of_range_rejected() {
        let text = sample_line("q1").replace("\"gold_index\":2", "\"gold_index\":4");
        assert!(matches!(
            parse_dataset(text.as_bytes()),
            Err(Error::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn unsupported_schema_rejected() {
        let text = sample_line("q1").replacen('{', "{\"schema_version\":9,", 1);
        assert!(parse_dataset(text.as_bytes()).is_err());
    }

    #[test]
    fn srt_single_cue() {
        let raw = "1\n00:00:01,000 --> 00:00:02,000\nHello there\n";
        assert_eq!(parse_subtitles(raw, SubtitleFormat::Srt).unwrap(), "Hello there");
    }

    #[test]
    fn srt_two_cues_join_with_space() {
        let raw = "1\r\n00:00:01,000 --> 00:00:02,000\r\nA\r\n\r\n2\r\n00:00:03,000 --> 00:00:04,500\r\nB\r\n";
        assert_eq!(parse_subtitles(raw, SubtitleFormat::Srt).unwrap(), "A B");
    }

    #[test]
    fn srt_strips_markup_and_multiline() {
        let raw = "1\n00:00:01,000 --> 00:00:02,000 X1:10\n<i>So how</i>\n{\\an8}was your   day?\n";
        assert_eq!(
            parse_subtitles(raw, SubtitleFormat::Srt).unwrap(),
            "So how was your day?"
        );
    }

    #[test]
    fn srt_bad_timecode_names_cue() {
        let raw = "1\n00:00:01,000 --> 00:00:02,000\nA\n\n2\n00:0x:03,000 --> 00:00:04,000\nB\n";
        match parse_subtitles(raw, SubtitleFormat::Srt).unwrap_err() {
            Error::Subtitle { cue, .. } => assert_eq!(cue, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn plain_is_verbatim() {
        let s = "So how was your day?";
        assert_eq!(parse_subtitles(s, SubtitleFormat::Plain).unwrap(), s);
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn knowledge_base_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("e101.txt"), "one two three").unwrap();
        fs::write(dir.path().join("e102.txt"), "").unwrap();
        let kb = load_knowledge_base(dir.path()).unwrap();
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.word_count("e101"), Some(3));
        assert_eq!(kb.word_count("e102"), Some(0));
    }

    #[test]
    fn knowledge_base_word_count_of_long_summary() {
        let doc = vec!["word"; 1605].join(" ");
        let kb = KnowledgeBase::from_entries([("e1".to_string(), doc)]).unwrap();
        assert_eq!(kb.word_count("e1"), Some(1605));
    }

    #[test]
    fn knowledge_base_rejects_empty_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_knowledge_base(dir.path()).is_err());
        fs::write(dir.path().join("e1.txt"), "a").unwrap();
        fs::write(dir.path().join("e1.md"), "b").unwrap();
        assert!(matches!(load_knowledge_base(dir.path()), Err(Error::KnowledgeBase(_))));
    }

    #[test]
    fn feature_matrix_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = FeatureMatrix::new(3);
        let row = |f| FrameRow {
            scene_id: "s1".into(),
            episode_id: "e1".into(),
            frame_index: f,
        };
        m.push(row(0), &[1.0, 0.5, -2.0]).unwrap();
        m.push(row(1), &[0.25, 0.0, 3.0]).unwrap();
        assert!(m.push(row(2), &[1.0]).is_err());
        let path = dir.path().join("features.bin");
        m.write(&path).unwrap();
        assert_eq!(FeatureMatrix::load(&path).unwrap(), m);
    }

    #[test]
    fn scene_validation_catches_bad_embedding() {
        let line = r#"{"scene_id":"s1","episode_id":"e1","frames":[{"frame_index":0,"faces":[{"bbox":[0,0,10,10],"embedding":[1.0,2.0]}]}]}"#;
        assert!(parse_scenes(line.as_bytes()).is_err());
        let missing = r#"{"scene_id":"s1","frames":[]}"#;
        assert_eq!(
            parse_scenes(missing.as_bytes()).unwrap_err().to_string(),
            "missing field: episode_id @ line 1"
        );
    }

    fn arb_sample() -> impl Strategy<Value = QASample> {
        (
            "[a-z0-9]{1,8}",
            "[ -~]{0,30}",
            prop::collection::vec("[ -~]{0,12}", 1..6),
            any::<prop::sample::Index>(),
            prop::sample::select(vec![
                Category::Visual,
                Category::Textual,
                Category::Temporal,
                Category::Knowledge,
                Category::None,
            ]),
            "\\PC{0,40}",
        )
            .prop_map(|(id, question, candidates, gold, category, subtitles)| QASample {
                schema_version: SCHEMA_VERSION,
                sample_id: id.clone(),
                scene_id: format!("scene-{id}"),
                question,
                gold_index: gold.index(candidates.len()),
                candidates,
                category,
                subtitles,
                subtitle_format: SubtitleFormat::Plain,
            })
    }

    proptest! {
        #[test]
        fn sample_jsonl_roundtrip(s in arb_sample()) {
            let line = serde_json::to_string(&s).unwrap();
            let back = parse_dataset(line.as_bytes()).unwrap();
            prop_assert_eq!(back, vec![s]);
        }

        #[test]
        fn plain_output_is_fixed_point(words in prop::collection::vec("[A-Za-z?.!]{1,8}", 0..20)) {
            let mut srt = String::new();
            for (i, w) in words.iter().enumerate() {
                srt.push_str(&format!("{}\n00:00:{:02},000 --> 00:00:{:02},500\n{w}\n\n", i + 1, i % 60, i % 60));
            }
            let once = parse_subtitles(&srt, SubtitleFormat::Srt).unwrap();
            prop_assert_eq!(&once, &words.join(" "));
            prop_assert_eq!(parse_subtitles(&once, SubtitleFormat::Plain).unwrap(), once);
        }

        #[test]
        fn word_count_counts_whitespace_runs(text in "[a-z \t\n]{0,200}") {
            let kb = KnowledgeBase::from_entries([("e".to_string(), text.clone())]).unwrap();
            let mut runs = 0;
            let mut in_word = false;
            for c in text.chars() {
                let ws = c.is_whitespace();
                if !ws && !in_word {
                    runs += 1;
                }
                in_word = !ws;
            }
            prop_assert_eq!(kb.word_count("e"), Some(runs));
        }
    }
}
