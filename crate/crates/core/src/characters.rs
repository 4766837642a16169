//! Character identification: kNN over face descriptors followed by a
//! shot-aware spatio-temporal filter that merges nearby faces into tracks and
//! relabels each track by majority vote.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use indexmap::IndexMap;
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BBox, FrameAnnotation, SceneAnnotations, FACE_EMBEDDING_DIM, UNKNOWN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub name: String,
    pub embedding: Vec<f64>,
}

/// Labelled reference faces for the cast.
#[derive(Clone, Debug)]
pub struct FaceGallery {
    entries: Vec<GalleryEntry>,
    n_classes: usize,
}

impl FaceGallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("face gallery is empty".into()));
        }
        for e in &entries {
            if e.embedding.len() != FACE_EMBEDDING_DIM {
                return Err(Error::Dimension {
                    expected: FACE_EMBEDDING_DIM,
                    got: e.embedding.len(),
                });
            }
            if e.name == UNKNOWN || e.name.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "gallery class name {:?} is reserved",
                    e.name
                )));
            }
        }
        let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        let n_classes = names.len();
        Ok(FaceGallery { entries, n_classes })
    }

    /// Reads a JSONL file of `{"name": .., "embedding": [..]}` records.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    /// Number of distinct character classes.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Neighbourhood size: one neighbour per class, capped by the gallery size.
    pub fn k(&self) -> usize {
        self.n_classes.min(self.entries.len())
    }

    pub fn contains_class(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// kNN label for one face descriptor.
///
/// The score is the fraction of the `k` neighbours that vote for the winner.
/// Vote ties go to the smaller mean distance, then to the smaller name.
/// Scores under `threshold` yield [`UNKNOWN`].
pub fn classify_face(gallery: &FaceGallery, embedding: &[f64], threshold: f64) -> Result<(String, f64)> {
    if embedding.len() != FACE_EMBEDDING_DIM {
        return Err(Error::Dimension {
            expected: FACE_EMBEDDING_DIM,
            got: embedding.len(),
        });
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("face embedding".into()));
    }
    let mut ranked: Vec<(f64, &str)> = gallery
        .entries
        .iter()
        .map(|e| (euclidean(&e.embedding, embedding), e.name.as_str()))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let k = gallery.k();

    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(d, name) in &ranked[..k] {
        let slot = votes.entry(name).or_default();
        slot.0 += 1;
        slot.1 += d;
    }
    let (name, (count, _)) = votes
        .into_iter()
        .min_by(|(na, (ca, da)), (nb, (cb, db))| {
            cb.cmp(ca)
                .then_with(|| (da / *ca as f64).total_cmp(&(db / *cb as f64)))
                .then_with(|| na.cmp(nb))
        })
        .expect("k >= 1");
    let score = count as f64 / k as f64;
    if score < threshold {
        Ok((UNKNOWN.to_string(), score))
    } else {
        Ok((name.to_string(), score))
    }
}

/// A face with its (possibly revised) character label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterDetection {
    pub frame_index: u32,
    pub bbox: BBox,
    pub name: String,
    pub knn_score: f64,
}

impl CharacterDetection {
    pub fn is_unknown(&self) -> bool {
        self.name == UNKNOWN
    }
}

/// Inclusive range of frame indices captured by one camera.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub first_frame: u32,
    pub last_frame: u32,
}

impl Shot {
    pub fn contains(&self, frame_index: u32) -> bool {
        (self.first_frame..=self.last_frame).contains(&frame_index)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Splits a feature sequence into runs where each adjacent pair has cosine
/// similarity at least `sim_threshold`. The runs partition `0..features.len()`.
pub fn segment_by_similarity(features: &[&[f64]], sim_threshold: f64) -> Result<Vec<Range<usize>>> {
    for (i, f) in features.iter().enumerate() {
        if f.len() != features[0].len() {
            return Err(Error::Dimension {
                expected: features[0].len(),
                got: f.len(),
            });
        }
        if f.iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNorm(format!("frame position {i}")));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frame feature at position {i}")));
        }
    }
    let mut shots = Vec::new();
    let mut start = 0;
    for i in 1..features.len() {
        if cosine(features[i - 1], features[i]) < sim_threshold {
            shots.push(start..i);
            start = i;
        }
    }
    if !features.is_empty() {
        shots.push(start..features.len());
    }
    Ok(shots)
}

/// Shot boundaries for a scene's frames, from their scene-retrieval features.
pub fn detect_shots(frames: &[FrameAnnotation], sim_threshold: f64) -> Result<Vec<Shot>> {
    let features: Vec<&[f64]> = frames
        .iter()
        .map(|f| {
            f.frame_feature
                .as_deref()
                .ok_or_else(|| Error::NotFound(format!("frame feature for frame {}", f.frame_index)))
        })
        .collect::<Result<_>>()?;
    Ok(segment_by_similarity(&features, sim_threshold)?
        .into_iter()
        .map(|r| Shot {
            first_frame: frames[r.start].frame_index,
            last_frame: frames[r.end - 1].frame_index,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// Maximum centroid distance, in pixels, for two faces to be the same person.
    pub dist_threshold: f64,
    /// Fraction of a track's frames the winning name must cover.
    pub majority: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            dist_threshold: 50.0,
            majority: 0.7,
        }
    }
}

/// Groups faces into tracks within each shot and relabels every track.
///
/// Faces whose box centroids are closer than `dist_threshold` are linked and
/// tracks are the connected components. A track keeps its most frequent
/// name if that name occurs in at least `majority` of the frames the track
/// spans, otherwise it becomes [`UNKNOWN`]. One detection per track and
/// frame survives. Output is sorted by frame, then box.
pub fn spatio_temporal_filter(
    detections: &[CharacterDetection],
    shots: &[Shot],
    params: FilterParams,
) -> Result<Vec<CharacterDetection>> {
    if !(params.majority > 0.0 && params.majority <= 1.0) {
        return Err(Error::Config(format!("majority {} not in (0, 1]", params.majority)));
    }
    if params.dist_threshold.is_nan() || params.dist_threshold < 0.0 {
        return Err(Error::Config("dist_threshold must be non-negative".into()));
    }
    let mut by_shot: Vec<Vec<usize>> = vec![Vec::new(); shots.len()];
    for (i, d) in detections.iter().enumerate() {
        if !d.bbox.is_valid() {
            return Err(Error::InvalidInput(format!(
                "detection in frame {} has an invalid box",
                d.frame_index
            )));
        }
        let shot = shots
            .iter()
            .position(|s| s.contains(d.frame_index))
            .ok_or_else(|| Error::InvalidInput(format!("frame {} lies outside every shot", d.frame_index)))?;
        by_shot[shot].push(i);
    }

    let mut out = Vec::new();
    for members in by_shot.iter().filter(|m| !m.is_empty()) {
        let mut uf = UnionFind::<usize>::new(members.len());
        for a in 0..members.len() {
            let (ax, ay) = detections[members[a]].bbox.centroid();
            for b in a + 1..members.len() {
                let (bx, by) = detections[members[b]].bbox.centroid();
                if ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() < params.dist_threshold {
                    uf.union(a, b);
                }
            }
        }
        let mut tracks: BTreeMap<usize, Vec<&CharacterDetection>> = BTreeMap::new();
        for (local, &global) in members.iter().enumerate() {
            tracks.entry(uf.find(local)).or_default().push(&detections[global]);
        }
        for track in tracks.values() {
            let name = track_label(track, params.majority);
            let mut best: HashMap<u32, &CharacterDetection> = HashMap::new();
            for &d in track {
                best.entry(d.frame_index)
                    .and_modify(|cur| {
                        if prefer(d, cur) == Ordering::Less {
                            *cur = d;
                        }
                    })
                    .or_insert(d);
            }
            out.extend(best.into_values().map(|d| CharacterDetection {
                name: name.clone(),
                ..d.clone()
            }));
        }
    }
    out.sort_by(|a, b| {
        a.frame_index
            .cmp(&b.frame_index)
            .then_with(|| a.bbox.total_cmp(&b.bbox))
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(out)
}

/// Higher kNN score first, then the smaller box, so survivors do not depend
/// on input order.
fn prefer(a: &CharacterDetection, b: &CharacterDetection) -> Ordering {
    b.knn_score
        .total_cmp(&a.knn_score)
        .then_with(|| a.bbox.total_cmp(&b.bbox))
        .then_with(|| a.name.cmp(&b.name))
}

fn track_label(track: &[&CharacterDetection], majority: f64) -> String {
    let mut frames: Vec<u32> = track.iter().map(|d| d.frame_index).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut frames_per_name: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for d in track {
        frames_per_name.entry(d.name.as_str()).or_default().push(d.frame_index);
    }
    let (name, votes) = frames_per_name
        .into_iter()
        .map(|(name, mut f)| {
            f.sort_unstable();
            f.dedup();
            (name, f.len())
        })
        // Ties resolve to the lexicographically smaller name.
        .max_by(|(na, ca), (nb, cb)| ca.cmp(cb).then_with(|| nb.cmp(na)))
        .expect("tracks are non-empty");
    if votes as f64 / frames.len() as f64 >= majority {
        name.to_string()
    } else {
        UNKNOWN.to_string()
    }
}

/// Named characters of a scene with their boxes, in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CharacterSet {
    pub boxes: IndexMap<String, Vec<(u32, BBox)>>,
    /// Detections labelled unknown; they never reach the scene graph.
    pub unknown_detections: usize,
}

impl CharacterSet {
    pub fn from_detections(detections: &[CharacterDetection]) -> Self {
        let mut set = CharacterSet::default();
        for d in detections {
            if d.is_unknown() {
                set.unknown_detections += 1;
            } else {
                set.boxes
                    .entry(d.name.clone())
                    .or_default()
                    .push((d.frame_index, d.bbox));
            }
        }
        set
    }

    /// Builds a set from bare names, with no boxes.
    pub fn from_names<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        let mut set = CharacterSet::default();
        for n in names {
            set.boxes.entry(n.into()).or_default();
        }
        set
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.boxes.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.boxes.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Named boxes present in one frame.
    pub fn in_frame(&self, frame_index: u32) -> impl Iterator<Item = (&str, &BBox)> {
        self.boxes.iter().flat_map(move |(name, boxes)| {
            boxes
                .iter()
                .filter(move |(f, _)| *f == frame_index)
                .map(move |(_, b)| (name.as_str(), b))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CharacterParams {
    pub knn_threshold: f64,
    pub shot_threshold: f64,
    #[serde(flatten)]
    pub filter: FilterParams,
}

impl Default for CharacterParams {
    fn default() -> Self {
        CharacterParams {
            knn_threshold: 0.5,
            shot_threshold: 0.9,
            filter: FilterParams::default(),
        }
    }
}

/// Output of the full character stage for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneCharacters {
    pub shots: Vec<Shot>,
    pub raw: Vec<CharacterDetection>,
    pub filtered: Vec<CharacterDetection>,
    pub characters: CharacterSet,
}

/// Classifies every face of a scene, detects shots and applies the filter.
pub fn recognize_characters(
    scene: &SceneAnnotations,
    gallery: &FaceGallery,
    params: &CharacterParams,
) -> Result<SceneCharacters> {
    let mut raw = Vec::new();
    for frame in &scene.frames {
        for face in &frame.faces {
            let (name, knn_score) = classify_face(gallery, &face.embedding, params.knn_threshold)?;
            raw.push(CharacterDetection {
                frame_index: frame.frame_index,
                bbox: face.bbox,
                name,
                knn_score,
            });
        }
    }
    let shots = detect_shots(&scene.frames, params.shot_threshold)?;
    let filtered = spatio_temporal_filter(&raw, &shots, params.filter)?;
    let characters = CharacterSet::from_detections(&filtered);
    Ok(SceneCharacters {
        shots,
        raw,
        filtered,
        characters,
    })
}
