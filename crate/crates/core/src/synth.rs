//! Seeded synthetic fixtures: a complete data root whose answers are
//! recoverable by keyword overlap, plus small corpora for the character
//! filter and episode retrieval.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::characters::{CharacterDetection, FaceGallery, GalleryEntry, Shot};
use crate::error::{Error, Result};
use crate::eval::{analyze_scene, scene_knowledge, EvalConfig, Resources};
use crate::ingest::{
    write_jsonl, BBox, Category, DataRoot, DetectedTriplet, FaceObservation, FeatureMatrix, FrameAnnotation, FrameRow,
    KnowledgeBase, QASample, SceneAnnotations, SubtitleFormat, FACE_EMBEDDING_DIM, SCHEMA_VERSION,
};
use crate::places::PlaceVocabulary;
use crate::scoring::mock_tokens;

pub const CAST: [&str; 17] = [
    "Sheldon",
    "Leonard",
    "Penny",
    "Howard",
    "Raj",
    "Amy",
    "Bernadette",
    "Dr. Beverly Hofstadter",
    "Stuart",
    "Barry",
    "Emily",
    "Leslie",
    "Lucy",
    "Mary Cooper",
    "Priya",
    "Dr. VM Koothrappali",
    "Wil Wheaton",
];

/// Place labels as they appear inside generated sentences.
pub const PLACES: [&str; 32] = [
    "Penny's apartment",
    "the main building",
    "Sheldon and Leonard's apartment",
    "Penny's apartment door",
    "a lab",
    "a restaurant",
    "a party",
    "a car",
    "Sheldon's bedroom",
    "an office",
    "the Cheesecake Factory",
    "a room",
    "Leonard's bedroom",
    "Howard's bedroom",
    "the cinema",
    "the Caltech cafeteria",
    "Caltech University",
    "Sheldon's office",
    "a store",
    "the hospital",
    "Raj's apartment",
    "the laundry room",
    "Penny's bedroom",
    "the comic book store",
    "a house",
    "a bathroom",
    "outside a house or a building",
    "a bar",
    "Howard's house",
    "Amy's apartment",
    "Howard and Bernadette's apartment",
    "Howard and Bernadette's house",
];

const OBJECTS: [&str; 20] = [
    "bottle", "book", "cup", "laptop", "chair", "table", "door", "bag", "phone", "board", "lamp", "pizza", "guitar",
    "shirt", "shorts", "jacket", "glasses", "sofa", "box", "plate",
];

const RELATIONS: [&str; 6] = ["holding", "wearing", "next to", "sitting on", "behind", "looking at"];

const ACTIONS: [&str; 10] = [
    "talking",
    "eating",
    "drinking",
    "laughing",
    "sitting",
    "walking",
    "reading",
    "smiling",
    "playing a game",
    "watching tv",
];

const PERSON_LABELS: [&str; 3] = ["man", "woman", "person"];

const TEXTUAL_QUESTIONS: [&str; 3] = [
    "Which word comes up in the conversation?",
    "What gets mentioned while they speak?",
    "Which item do they bring up?",
];
const TEMPORAL_QUESTIONS: [&str; 2] = [
    "What is mentioned right after the greeting?",
    "What comes up before the goodbye?",
];
const KNOWLEDGE_QUESTIONS: [&str; 3] = [
    "What happened earlier in the story?",
    "Which past event explains this moment?",
    "What did they learn in an earlier episode?",
];
const WHO_QUESTION: &str = "Who appears in the scene?";
const WHERE_QUESTION: &str = "Where does the scene take place?";
const WHAT_QUESTION: &str = "Which object can be seen?";

const GREETING: &str = "hello everyone";
const GOODBYE: &str = "goodbye now";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub episodes: usize,
    pub scenes_per_episode: usize,
    pub questions_per_scene: usize,
    pub frames_per_scene: usize,
    pub feature_dim: usize,
    pub candidates: usize,
    /// Every candidate, gold included, is absent from every context.
    pub stripped: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            episodes: 20,
            scenes_per_episode: 5,
            questions_per_scene: 4,
            frames_per_scene: 6,
            feature_dim: 64,
            candidates: 4,
            stripped: false,
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        self.episodes * self.scenes_per_episode * self.questions_per_scene
    }
}

/// Unique pronounceable tokens that collide with no fixed vocabulary.
struct WordGen {
    used: HashSet<String>,
}

impl WordGen {
    fn new() -> Self {
        let mut used = HashSet::new();
        let fixed = CAST
            .iter()
            .chain(&PLACES)
            .chain(&OBJECTS)
            .chain(&RELATIONS)
            .chain(&ACTIONS)
            .chain(&PERSON_LABELS)
            .chain(&TEXTUAL_QUESTIONS)
            .chain(&TEMPORAL_QUESTIONS)
            .chain(&KNOWLEDGE_QUESTIONS)
            .chain(&[
                WHO_QUESTION,
                WHERE_QUESTION,
                WHAT_QUESTION,
                GREETING,
                GOODBYE,
                "someone is are",
            ]);
        for text in fixed {
            used.extend(mock_tokens(text));
        }
        WordGen { used }
    }

    fn word(&mut self, rng: &mut impl Rng) -> String {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let syllables = rng.random_range(3..=4);
            let w: String = (0..syllables)
                .flat_map(|_| [*C.choose(rng).unwrap() as char, *V.choose(rng).unwrap() as char])
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sigma).expect("valid sigma");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Every file of a data root, in memory.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub samples: Vec<QASample>,
    pub scenes: Vec<SceneAnnotations>,
    pub gallery: Vec<GalleryEntry>,
    pub places: Vec<String>,
    pub kb: Vec<(String, String)>,
    pub features: FeatureMatrix,
}

/// What a planned question asks about, fixed before the contexts exist.
enum Plan {
    Visual,
    Subtitle { category: Category, keyword: String },
    Knowledge { keyword: String },
}

impl SyntheticCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.candidates < 2 || cfg.episodes == 0 || cfg.frames_per_scene == 0 || cfg.questions_per_scene == 0 {
            return Err(Error::Config(
                "synthetic corpus needs 2+ candidates and non-empty sizes".into(),
            ));
        }
        if cfg.scenes_per_episode < 2 {
            return Err(Error::Config("retrieval needs two scenes per episode".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut words = WordGen::new();

        let class_centers: Vec<Vec<f64>> = CAST.iter().map(|_| unit(&mut rng, FACE_EMBEDDING_DIM)).collect();
        let mut gallery = Vec::new();
        for (name, center) in CAST.iter().zip(&class_centers) {
            for _ in 0..10 {
                gallery.push(GalleryEntry {
                    name: name.to_string(),
                    embedding: add(center, &gaussian(&mut rng, FACE_EMBEDDING_DIM, 0.03)),
                });
            }
        }

        let episode_ids: Vec<String> = (0..cfg.episodes).map(|e| format!("s01e{:02}", e + 1)).collect();
        let mut docs: Vec<Vec<String>> = episode_ids
            .iter()
            .enumerate()
            .map(|(e, _)| {
                // The first document has the longest-summary length.
                let len = if e == 0 { 1605 } else { rng.random_range(250..=900) };
                (0..len).map(|_| words.word(&mut rng)).collect()
            })
            .collect();

        let mut scenes = Vec::new();
        let mut features = FeatureMatrix::new(cfg.feature_dim);
        let mut plans: Vec<(usize, Vec<Plan>, String, SubtitleFormat)> = Vec::new();
        for (e, episode_id) in episode_ids.iter().enumerate() {
            let center = unit(&mut rng, cfg.feature_dim);
            let mut used_positions = HashSet::new();
            for s in 0..cfg.scenes_per_episode {
                let scene_id = format!("{episode_id}_sc{:02}", s + 1);
                let scene_center = add(&center, &gaussian(&mut rng, cfg.feature_dim, 0.03));
                let scene = synth_scene(&mut rng, &scene_id, episode_id, cfg, &class_centers);
                for f in &scene.frames {
                    let feat = add(&scene_center, &gaussian(&mut rng, cfg.feature_dim, 0.01));
                    features.push(
                        FrameRow {
                            scene_id: scene_id.clone(),
                            episode_id: episode_id.clone(),
                            frame_index: f.frame_index,
                        },
                        &feat,
                    )?;
                }

                let mut cats = [
                    Category::Visual,
                    Category::Textual,
                    Category::Temporal,
                    Category::Knowledge,
                ];
                cats.shuffle(&mut rng);
                let mut plan = Vec::new();
                for q in 0..cfg.questions_per_scene {
                    let mut cat = cats[q % 4];
                    if cat == Category::Textual && rng.random_bool(0.1) {
                        cat = Category::None;
                    }
                    plan.push(match cat {
                        Category::Visual => Plan::Visual,
                        Category::Knowledge => {
                            let keyword = words.word(&mut rng);
                            // Inside the retained windows of the default slicing.
                            let limit = docs[e].len().min(550);
                            let pos = loop {
                                let p = rng.random_range(0..limit);
                                if used_positions.insert(p) {
                                    break p;
                                }
                            };
                            docs[e][pos] = keyword.clone();
                            Plan::Knowledge { keyword }
                        }
                        category => Plan::Subtitle {
                            category,
                            keyword: words.word(&mut rng),
                        },
                    });
                }
                let subs = subtitles(&mut rng, &mut words, &plan);
                let format = if rng.random_bool(0.3) {
                    SubtitleFormat::Srt
                } else {
                    SubtitleFormat::Plain
                };
                let subs = match format {
                    SubtitleFormat::Srt => to_srt(&subs),
                    SubtitleFormat::Plain => subs.join(" "),
                };
                plans.push((scenes.len(), plan, subs, format));
                scenes.push(scene);
            }
        }

        let kb: Vec<(String, String)> = episode_ids
            .iter()
            .cloned()
            .zip(docs.iter().map(|d| d.join(" ")))
            .collect();
        let places: Vec<String> = PLACES.iter().map(|p| p.to_string()).collect();

        let mut corpus = SyntheticCorpus {
            samples: Vec::new(),
            scenes,
            gallery,
            places,
            kb,
            features,
        };
        let res = corpus.resources()?;
        let eval_cfg = EvalConfig::default();
        for (scene_idx, plan, subs, format) in plans {
            let scene = &corpus.scenes[scene_idx];
            let annotated = res.scene(&scene.scene_id)?;
            let analysis = analyze_scene(annotated, &res.gallery, &res.places, &eval_cfg)?;
            let knowledge = scene_knowledge(annotated, &res.store, &res.kb, &eval_cfg)?;
            let plain_subs = crate::ingest::parse_subtitles(&subs, format)?;
            let mut context: HashSet<String> = HashSet::new();
            context.extend(mock_tokens(&plain_subs));
            context.extend(mock_tokens(&analysis.description.text));
            for (_, seg) in knowledge.segments.retained() {
                context.extend(mock_tokens(&seg.text));
            }
            let absent = |c: &str, context: &HashSet<String>| mock_tokens(c).iter().all(|t| !context.contains(t));

            for (q, p) in plan.into_iter().enumerate() {
                let (category, question, gold, pool): (Category, String, String, Vec<String>) = match p {
                    Plan::Subtitle { category, keyword } => {
                        let question = match category {
                            Category::Temporal => TEMPORAL_QUESTIONS.choose(&mut rng).unwrap(),
                            _ => TEXTUAL_QUESTIONS.choose(&mut rng).unwrap(),
                        };
                        (category, question.to_string(), keyword, Vec::new())
                    }
                    Plan::Knowledge { keyword } => (
                        Category::Knowledge,
                        KNOWLEDGE_QUESTIONS.choose(&mut rng).unwrap().to_string(),
                        keyword,
                        Vec::new(),
                    ),
                    Plan::Visual => {
                        let g = &analysis.graph;
                        let mut kinds = vec![0];
                        if g.place.is_some() {
                            kinds.push(1);
                        }
                        if !g.objects.is_empty() {
                            kinds.push(2);
                        }
                        if g.characters.is_empty() {
                            kinds.retain(|k| *k != 0);
                        }
                        match kinds.choose(&mut rng) {
                            Some(0) => (
                                Category::Visual,
                                WHO_QUESTION.into(),
                                g.characters.choose(&mut rng).unwrap().clone(),
                                CAST.iter().map(|s| s.to_string()).collect(),
                            ),
                            Some(1) => (
                                Category::Visual,
                                WHERE_QUESTION.into(),
                                g.place.clone().unwrap(),
                                PLACES.iter().map(|s| s.to_string()).collect(),
                            ),
                            Some(_) => (
                                Category::Visual,
                                WHAT_QUESTION.into(),
                                g.objects.choose(&mut rng).unwrap().clone(),
                                OBJECTS.iter().map(|s| s.to_string()).collect(),
                            ),
                            None => (
                                Category::Visual,
                                WHAT_QUESTION.into(),
                                analysis.action.clone(),
                                ACTIONS.iter().map(|s| s.to_string()).collect(),
                            ),
                        }
                    }
                };
                let mut ctx_q = context.clone();
                ctx_q.extend(mock_tokens(&question));
                let mut pool: Vec<String> = pool.into_iter().filter(|c| absent(c, &ctx_q) && *c != gold).collect();
                pool.shuffle(&mut rng);
                let needed = cfg.candidates - 1 + usize::from(cfg.stripped);
                let mut others: Vec<String> = Vec::with_capacity(needed);
                while others.len() < needed {
                    others.push(pool.pop().unwrap_or_else(|| words.word(&mut rng)));
                }
                let gold = if cfg.stripped {
                    others.pop().expect("absent gold")
                } else {
                    gold
                };
                let gold_index = rng.random_range(0..cfg.candidates);
                others.insert(gold_index, gold);
                corpus.samples.push(QASample {
                    schema_version: SCHEMA_VERSION,
                    sample_id: format!("{}_q{}", corpus.scenes[scene_idx].scene_id, q + 1),
                    scene_id: corpus.scenes[scene_idx].scene_id.clone(),
                    question,
                    candidates: others,
                    gold_index,
                    category,
                    subtitles: subs.clone(),
                    subtitle_format: format,
                });
            }
        }
        Ok(corpus)
    }

    /// In-memory resources equivalent to loading the written data root.
    pub fn resources(&self) -> Result<Resources> {
        // The on-disk matrix is f32; round-trip so both paths agree bit for bit.
        let mut features = self.features.clone();
        features.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        Resources::new(
            self.scenes.clone(),
            FaceGallery::new(self.gallery.clone())?,
            PlaceVocabulary::new(self.places.clone())?,
            KnowledgeBase::from_entries(self.kb.clone())?,
            &features,
        )
    }

    pub fn write(&self, root: &DataRoot) -> Result<()> {
        let dir = root.path();
        std::fs::create_dir_all(root.knowledge_base()).map_err(|e| Error::io(dir, e))?;
        write_jsonl(root.dataset(), &self.samples)?;
        write_jsonl(root.scenes(), &self.scenes)?;
        write_jsonl(root.gallery(), &self.gallery)?;
        self.features.write(root.features())?;
        let places = root.places();
        std::fs::write(&places, self.places.join("\n") + "\n").map_err(|e| Error::io(&places, e))?;
        for (id, doc) in &self.kb {
            let p = root.knowledge_base().join(format!("{id}.txt"));
            std::fs::write(&p, doc).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.write(&DataRoot::new(dir.as_ref()))
    }
}

fn synth_scene(
    rng: &mut ChaCha8Rng,
    scene_id: &str,
    episode_id: &str,
    cfg: &SynthConfig,
    class_centers: &[Vec<f64>],
) -> SceneAnnotations {
    let n_chars = rng.random_range(1..=3);
    let chars: Vec<usize> = rand::seq::index::sample(rng, CAST.len(), n_chars).into_vec();
    let place = rng.random_range(0..PLACES.len());
    let action = rng.random_range(0..ACTIONS.len());
    // One relation per character at most; some scenes have none.
    let rels: Vec<Option<(usize, usize, bool)>> = chars
        .iter()
        .map(|_| {
            rng.random_bool(0.7).then(|| {
                (
                    rng.random_range(0..RELATIONS.len()),
                    rng.random_range(0..OBJECTS.len()),
                    rng.random_bool(0.25),
                )
            })
        })
        .collect();
    let person: Vec<&str> = chars.iter().map(|_| *PERSON_LABELS.choose(rng).unwrap()).collect();
    let mut action_scores = BTreeMap::new();
    for a in rand::seq::index::sample(rng, ACTIONS.len(), 4) {
        action_scores.insert(ACTIONS[a].to_string(), rng.random_range(0.0..0.4));
    }
    action_scores.insert(ACTIONS[action].to_string(), rng.random_range(0.6..0.95));

    let frames = (0..cfg.frames_per_scene as u32)
        .map(|fi| {
            let mut faces = Vec::new();
            let mut triplets = Vec::new();
            for (slot, &c) in chars.iter().enumerate() {
                let bbox = BBox::new(
                    80.0 + 300.0 * slot as f64 + rng.random_range(-3.0..3.0),
                    120.0 + rng.random_range(-3.0..3.0),
                    90.0,
                    90.0,
                );
                faces.push(FaceObservation {
                    bbox,
                    embedding: add(&class_centers[c], &gaussian(rng, FACE_EMBEDDING_DIM, 0.03)),
                });
                if let Some((r, o, object_first)) = rels[slot] {
                    let obox = BBox::new(bbox.x + 20.0, bbox.y + 120.0, 60.0, 40.0);
                    let (subject_label, object_label, subject_bbox, object_bbox) = if object_first {
                        (OBJECTS[o].to_string(), person[slot].to_string(), obox, bbox)
                    } else {
                        (person[slot].to_string(), OBJECTS[o].to_string(), bbox, obox)
                    };
                    triplets.push(DetectedTriplet {
                        subject_label,
                        relation_label: RELATIONS[r].to_string(),
                        object_label,
                        subject_bbox,
                        object_bbox,
                        score: rng.random_range(0.5..0.95),
                    });
                }
            }
            let mut place_scores = BTreeMap::new();
            for p in rand::seq::index::sample(rng, PLACES.len(), 5) {
                place_scores.insert(PLACES[p].to_string(), rng.random_range(0.0..0.3));
            }
            place_scores.insert(PLACES[place].to_string(), rng.random_range(0.5..0.9));
            if rng.random_bool(0.2) {
                place_scores.insert("a shower".into(), rng.random_range(0.0..0.2));
            }
            FrameAnnotation {
                frame_index: fi,
                frame_feature: None,
                faces,
                place_scores,
                triplets,
            }
        })
        .collect();
    SceneAnnotations {
        schema_version: SCHEMA_VERSION,
        scene_id: scene_id.to_string(),
        episode_id: episode_id.to_string(),
        fps_slow: 1.0,
        action_scores,
        frames,
    }
}

/// Dialogue lines: filler words with each planned keyword placed once.
fn subtitles(rng: &mut ChaCha8Rng, words: &mut WordGen, plan: &[Plan]) -> Vec<String> {
    let mut lines = vec![format!("{GREETING} {}", words.word(rng))];
    for p in plan {
        if let Plan::Subtitle { keyword, .. } = p {
            let mut line: Vec<String> = (0..rng.random_range(3..7)).map(|_| words.word(rng)).collect();
            let at = rng.random_range(0..=line.len());
            line.insert(at, keyword.clone());
            lines.push(line.join(" "));
        }
    }
    lines.push(format!("{} {GOODBYE}", words.word(rng)));
    lines
}

fn to_srt(lines: &[String]) -> String {
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let t = i * 2;
        out.push_str(&format!(
            "{}\n00:00:{:02},000 --> 00:00:{:02},500\n<i>{l}</i>\n\n",
            i + 1,
            t,
            t + 1
        ));
    }
    out
}

/// Ground truth of one synthetic face track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterTrack {
    pub true_name: String,
    pub shot: usize,
    /// Horizontal position index; track boxes sit at `x = 100 + 300 * slot`.
    pub slot: usize,
    pub frames: Vec<u32>,
    /// Raw kNN name per frame, after error injection.
    pub votes: Vec<String>,
    pub injected_errors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterScene {
    pub detections: Vec<CharacterDetection>,
    pub shots: Vec<Shot>,
    pub tracks: Vec<FilterTrack>,
}

/// Scenes of two shots, each with two or three well-separated tracks whose
/// kNN names are wrong in exactly `round(error_rate * frames)` frames.
pub fn filter_corpus(n_scenes: usize, frames_per_shot: usize, error_rate: f64, seed: u64) -> Vec<FilterScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes)
        .map(|_| {
            let mut detections = Vec::new();
            let mut tracks = Vec::new();
            let mut shots = Vec::new();
            for shot in 0..2 {
                let first = (shot * frames_per_shot) as u32;
                let last = first + frames_per_shot as u32 - 1;
                shots.push(Shot {
                    first_frame: first,
                    last_frame: last,
                });
                let n_tracks = rng.random_range(2..=3);
                let names: Vec<usize> = rand::seq::index::sample(&mut rng, CAST.len(), n_tracks).into_vec();
                for (slot, &name) in names.iter().enumerate() {
                    let n_err = (error_rate * frames_per_shot as f64).round() as usize;
                    let wrong: HashSet<usize> = rand::seq::index::sample(&mut rng, frames_per_shot, n_err)
                        .into_iter()
                        .collect();
                    let mut votes = Vec::new();
                    let frames: Vec<u32> = (first..=last).collect();
                    for (k, &f) in frames.iter().enumerate() {
                        let label = if wrong.contains(&k) {
                            let mut other = rng.random_range(0..CAST.len() - 1);
                            if other >= name {
                                other += 1;
                            }
                            CAST[other]
                        } else {
                            CAST[name]
                        };
                        votes.push(label.to_string());
                        detections.push(CharacterDetection {
                            frame_index: f,
                            bbox: BBox::new(
                                100.0 + 300.0 * slot as f64 + rng.random_range(-5.0..5.0),
                                150.0 + rng.random_range(-5.0..5.0),
                                80.0,
                                80.0,
                            ),
                            name: label.to_string(),
                            knn_score: rng.random_range(0.5..1.0),
                        });
                    }
                    tracks.push(FilterTrack {
                        true_name: CAST[name].to_string(),
                        shot,
                        slot,
                        frames,
                        votes,
                        injected_errors: n_err,
                    });
                }
            }
            detections.shuffle(&mut rng);
            FilterScene {
                detections,
                shots,
                tracks,
            }
        })
        .collect()
}

/// A query scene held out of the store.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeQuery {
    pub episode_id: String,
    pub frames: Vec<Vec<f64>>,
}

/// Stored frames are Gaussian perturbations (std `sigma` per dimension) of
/// a unit-norm centre per episode; queries are fresh perturbations.
pub fn episode_store(
    episodes: usize,
    frames_per_episode: usize,
    dim: usize,
    sigma: f64,
    queries_per_episode: usize,
    frames_per_query: usize,
    seed: u64,
) -> (FeatureMatrix, Vec<EpisodeQuery>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..episodes).map(|_| unit(&mut rng, dim)).collect();
    let mut m = FeatureMatrix::new(dim);
    for (e, c) in centers.iter().enumerate() {
        for f in 0..frames_per_episode {
            m.push(
                FrameRow {
                    scene_id: format!("e{e}_sc{}", f / 20),
                    episode_id: format!("e{e}"),
                    frame_index: f as u32,
                },
                &add(c, &gaussian(&mut rng, dim, sigma)),
            )
            .expect("matching dimension");
        }
    }
    let mut queries = Vec::new();
    for (e, c) in centers.iter().enumerate() {
        for _ in 0..queries_per_episode {
            queries.push(EpisodeQuery {
                episode_id: format!("e{e}"),
                frames: (0..frames_per_query)
                    .map(|_| add(c, &gaussian(&mut rng, dim, sigma)))
                    .collect(),
            });
        }
    }
    (m, queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Pipeline;
    use crate::scoring::{BranchHeads, MockBackend};

    fn small() -> SynthConfig {
        SynthConfig {
            episodes: 4,
            scenes_per_episode: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_generation() {
        let a = SyntheticCorpus::generate(&small()).unwrap();
        let b = SyntheticCorpus::generate(&small()).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.kb, b.kb);
        assert_eq!(a.samples.len(), small().n_samples());
        assert_eq!(a.kb[0].1.split_whitespace().count(), 1605);
    }

    #[test]
    fn candidates_are_distinct_and_gold_in_range() {
        let c = SyntheticCorpus::generate(&small()).unwrap();
        for s in &c.samples {
            s.validate().unwrap();
            let set: HashSet<_> = s.candidates.iter().collect();
            assert_eq!(set.len(), s.candidates.len(), "{}", s.sample_id);
        }
    }

    #[test]
    fn small_corpus_is_solved_by_mock() {
        let c = SyntheticCorpus::generate(&small()).unwrap();
        let res = c.resources().unwrap();
        let backend = MockBackend::new(32).unwrap();
        let p = Pipeline::new(&res, &backend, BranchHeads::reference(32), EvalConfig::default()).unwrap();
        let r = p.evaluate(&c.samples).unwrap();
        assert_eq!(r.accuracy(), 1.0, "{}", r.to_text());
        assert_eq!(r.warnings, 0);
    }

    #[test]
    fn written_root_loads_identically() {
        let c = SyntheticCorpus::generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_to(dir.path()).unwrap();
        let root = DataRoot::new(dir.path());
        assert_eq!(crate::ingest::load_dataset(root.dataset()).unwrap(), c.samples);
        let loaded = Resources::load(&root).unwrap();
        let mem = c.resources().unwrap();
        assert_eq!(
            loaded.scenes.keys().collect::<Vec<_>>(),
            mem.scenes.keys().collect::<Vec<_>>()
        );
        assert_eq!(loaded.kb, mem.kb);
        let backend = MockBackend::new(32).unwrap();
        let predictions = |res: &Resources| {
            let p = Pipeline::new(res, &backend, BranchHeads::reference(32), EvalConfig::default()).unwrap();
            let r = p.evaluate(&c.samples).unwrap();
            r.samples.iter().map(|s| s.prediction).collect::<Vec<_>>()
        };
        assert_eq!(predictions(&loaded), predictions(&mem));
    }

    #[test]
    fn filter_corpus_injects_exact_errors() {
        for s in filter_corpus(5, 10, 0.2, 1) {
            for t in &s.tracks {
                let wrong = t.votes.iter().filter(|v| **v != t.true_name).count();
                assert_eq!(wrong, 2);
            }
        }
    }
}
