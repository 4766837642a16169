//! End-to-end evaluation: scene analysis, branch scoring, fusion and
//! per-category accuracy, plus the ablation and fusion-comparison grids.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::characters::{recognize_characters, CharacterParams, FaceGallery, SceneCharacters};
use crate::describe::{generate_description, Description};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, sample_scores, train_attention, train_fc, FusionEmbeddings, FusionHead, FusionMethod, MWConfig, TrainConfig,
    TrainingSample,
};
use crate::ingest::{
    attach_features, load_knowledge_base, load_scenes, Category, DataRoot, FeatureMatrix, KnowledgeBase, QASample,
    SceneAnnotations, SCHEMA_VERSION,
};
use crate::places::{aggregate_place, PlacePrediction, PlaceVocabulary};
use crate::recall::{episode_votes, slice_document, EpisodeVote, FrameIndexStore, SegmentSet, WindowParams};
use crate::scenegraph::{build_graph, resolve_person_boxes, scene_action, ResolvedTriplet, SceneGraph};
use crate::scoring::{
    assemble_qa, embed_inputs, observe_inputs, read_inputs, recall_inputs, Branch, BranchHeads, BranchInput,
    BranchScores, ScorerBackend,
};

/// Non-empty subset of branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BranchSet {
    pub read: bool,
    pub observe: bool,
    pub recall: bool,
}

impl BranchSet {
    pub const ALL: BranchSet = BranchSet {
        read: true,
        observe: true,
        recall: true,
    };

    /// The seven non-empty subsets, singles first.
    pub const ABLATION: [BranchSet; 7] = [
        BranchSet::of(true, false, false),
        BranchSet::of(false, true, false),
        BranchSet::of(false, false, true),
        BranchSet::of(true, true, false),
        BranchSet::of(true, false, true),
        BranchSet::of(false, true, true),
        BranchSet::of(true, true, true),
    ];

    pub const fn of(read: bool, observe: bool, recall: bool) -> Self {
        BranchSet { read, observe, recall }
    }

    pub fn contains(&self, b: Branch) -> bool {
        match b {
            Branch::Read => self.read,
            Branch::Observe => self.observe,
            Branch::Recall => self.recall,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.read || self.observe || self.recall)
    }

    pub fn without(mut self, b: Branch) -> Self {
        match b {
            Branch::Read => self.read = false,
            Branch::Observe => self.observe = false,
            Branch::Recall => self.recall = false,
        }
        self
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        BranchSet::ALL
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Branch::ALL
            .into_iter()
            .filter(|b| self.contains(*b))
            .map(|b| b.as_str())
            .collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for BranchSet {
    type Err = Error;

    /// `read+observe`, `read,recall`, `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(BranchSet::ALL);
        }
        let mut set = BranchSet::of(false, false, false);
        for part in s.split(['+', ',']).filter(|p| !p.trim().is_empty()) {
            match part.parse::<Branch>()? {
                Branch::Read => set.read = true,
                Branch::Observe => set.observe = true,
                Branch::Recall => set.recall = true,
            }
        }
        if set.is_empty() {
            return Err(Error::Config("branch set is empty".into()));
        }
        Ok(set)
    }
}

impl TryFrom<String> for BranchSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BranchSet> for String {
    fn from(b: BranchSet) -> String {
        b.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub branches: BranchSet,
    pub fusion: FusionHead,
    pub characters: CharacterParams,
    /// Minimum IoU between a person box and a character box.
    pub iou_threshold: f64,
    pub window: WindowParams,
    /// Leave the query scene's own frames out of episode retrieval.
    pub exclude_own_scene: bool,
    pub betas: MWConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            branches: BranchSet::ALL,
            fusion: FusionHead::uniform_fc(),
            characters: CharacterParams::default(),
            iou_threshold: 0.5,
            window: WindowParams::default(),
            exclude_own_scene: true,
            betas: MWConfig::default(),
        }
    }
}

impl EvalConfig {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: EvalConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("branch set is empty".into()));
        }
        self.window.validate()?;
        self.betas.validate()?;
        self.fusion.validate()?;
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!(
                "iou_threshold {} outside [0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Everything loaded from a data root.
pub struct Resources {
    pub scenes: BTreeMap<String, SceneAnnotations>,
    pub gallery: FaceGallery,
    pub places: PlaceVocabulary,
    pub kb: KnowledgeBase,
    pub store: FrameIndexStore,
}

impl Resources {
    /// Attaches frame features to scenes and indexes them for retrieval.
    pub fn new(
        mut scenes: Vec<SceneAnnotations>,
        gallery: FaceGallery,
        places: PlaceVocabulary,
        kb: KnowledgeBase,
        features: &FeatureMatrix,
    ) -> Result<Self> {
        let filled = attach_features(&mut scenes, features);
        log::debug!("attached {filled} frame features");
        if let Err(e) = kb.validate_scenes(&scenes) {
            // Unresolved episodes mask the recall branch per sample.
            log::warn!("{e}");
        }
        let store = FrameIndexStore::new(features)?;
        let mut map = BTreeMap::new();
        for s in scenes {
            let id = s.scene_id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(Error::InvalidInput(format!("duplicate scene_id {id}")));
            }
        }
        Ok(Resources {
            scenes: map,
            gallery,
            places,
            kb,
            store,
        })
    }

    pub fn load(root: &DataRoot) -> Result<Self> {
        Resources::new(
            load_scenes(root.scenes())?,
            FaceGallery::load(root.gallery())?,
            PlaceVocabulary::load(root.places())?,
            load_knowledge_base(root.knowledge_base())?,
            &FeatureMatrix::load(root.features())?,
        )
    }

    pub fn scene(&self, scene_id: &str) -> Result<&SceneAnnotations> {
        self.scenes
            .get(scene_id)
            .ok_or_else(|| Error::NotFound(format!("scene {scene_id}")))
    }
}

/// Observe-branch intermediate results for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneAnalysis {
    pub scene_id: String,
    pub characters: SceneCharacters,
    pub place: PlacePrediction,
    pub triplets: Vec<ResolvedTriplet>,
    pub action: String,
    pub graph: SceneGraph,
    pub description: Description,
}

pub fn analyze_scene(
    scene: &SceneAnnotations,
    gallery: &FaceGallery,
    places: &PlaceVocabulary,
    cfg: &EvalConfig,
) -> Result<SceneAnalysis> {
    let characters = recognize_characters(scene, gallery, &cfg.characters)?;
    let place = aggregate_place(&scene.frames, places)?;
    let triplets = resolve_person_boxes(
        scene
            .frames
            .iter()
            .flat_map(|f| f.triplets.iter().map(move |t| (f.frame_index, t))),
        &characters.characters,
        cfg.iou_threshold,
    );
    let action = scene_action(&scene.action_scores)?;
    let graph = build_graph(&characters.characters, &place, &triplets, &action)?;
    let description = generate_description(&graph);
    Ok(SceneAnalysis {
        scene_id: scene.scene_id.clone(),
        characters,
        place,
        triplets,
        action,
        graph,
        description,
    })
}

/// Recall-branch intermediate results for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneKnowledge {
    pub episode_id: String,
    pub votes: Vec<EpisodeVote>,
    pub segments: SegmentSet,
}

pub fn scene_knowledge(
    scene: &SceneAnnotations,
    store: &FrameIndexStore,
    kb: &KnowledgeBase,
    cfg: &EvalConfig,
) -> Result<SceneKnowledge> {
    let frames = scene.frame_features()?;
    if frames.is_empty() {
        return Err(Error::NotFound(format!("frames for scene {}", scene.scene_id)));
    }
    let exclude = cfg.exclude_own_scene.then_some(scene.scene_id.as_str());
    let votes = episode_votes(&frames, store, exclude)?;
    let episode_id = votes
        .first()
        .map(|v| v.episode_id.clone())
        .ok_or_else(|| Error::NotFound(format!("no stored frame outside scene {}", scene.scene_id)))?;
    let doc = kb
        .get(&episode_id)
        .ok_or_else(|| Error::NotFound(format!("knowledge base entry for episode {episode_id}")))?;
    let segments = slice_document(doc, cfg.window)?;
    Ok(SceneKnowledge {
        episode_id,
        votes,
        segments,
    })
}

/// Per-scene context shared by all questions about the scene. A `None`
/// branch input is masked and its warning says why.
#[derive(Clone, Debug, Default)]
pub struct SceneContext {
    pub description: Option<String>,
    pub segments: Option<SegmentSet>,
    pub episode_id: Option<String>,
    pub observe_warning: Option<String>,
    pub recall_warning: Option<String>,
}

fn maskable(e: &Error) -> bool {
    matches!(e, Error::NotFound(_) | Error::KnowledgeBase(_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

impl CategoryStats {
    fn new(correct: usize, total: usize) -> Self {
        CategoryStats {
            correct,
            total,
            accuracy: (total > 0).then(|| correct as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub category: Category,
    pub gold: usize,
    pub prediction: usize,
    pub correct: bool,
    pub omega: Vec<f64>,
    pub scores: BranchScores,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub backend: String,
    pub branches: BranchSet,
    pub fusion: FusionMethod,
    pub overall: CategoryStats,
    /// Scored categories only; `none` samples count toward `overall`.
    pub categories: BTreeMap<Category, CategoryStats>,
    pub uncategorized: usize,
    pub warnings: usize,
    pub config: EvalConfig,
    pub fingerprint: String,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy.unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Short human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "backend {} | branches {} | fusion {} | fingerprint {}",
            self.backend,
            self.branches,
            self.fusion,
            &self.fingerprint[..12.min(self.fingerprint.len())]
        );
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>6} {:>9}",
            "category", "correct", "total", "accuracy"
        );
        let mut row = |name: &str, st: &CategoryStats| {
            let acc = st.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(s, "{name:<10} {:>8} {:>6} {acc:>9}", st.correct, st.total);
        };
        for (c, st) in &self.categories {
            row(c.as_str(), st);
        }
        row("overall", &self.overall);
        let _ = writeln!(s, "warnings {}", self.warnings);
        s
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    config: &'a EvalConfig,
    backend: &'a str,
    dim: usize,
    heads: String,
}

fn heads_digest(heads: &BranchHeads) -> String {
    let mut h = Sha256::new();
    for b in Branch::ALL {
        let head = heads.get(b);
        for w in &head.weights {
            h.update(w.to_le_bytes());
        }
        h.update(head.bias.to_le_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Scorer, heads, configuration and a per-scene context cache.
pub struct Pipeline<'a> {
    pub resources: &'a Resources,
    pub backend: &'a dyn ScorerBackend,
    pub heads: BranchHeads,
    pub config: EvalConfig,
    cache: Mutex<HashMap<String, Arc<SceneContext>>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        resources: &'a Resources,
        backend: &'a dyn ScorerBackend,
        heads: BranchHeads,
        config: EvalConfig,
    ) -> Result<Self> {
        config.validate()?;
        heads.check_dim(backend.dim())?;
        if let Some(d) = config.fusion.embedding_dim() {
            if d != backend.dim() {
                return Err(Error::Dimension {
                    expected: backend.dim(),
                    got: d,
                });
            }
        }
        Ok(Pipeline {
            resources,
            backend,
            heads,
            config,
            cache: Mutex::new(HashMap::new()),
        })
    }

    /// Same resources, backend and cache with another config or heads.
    pub fn with(&self, heads: BranchHeads, config: EvalConfig) -> Result<Pipeline<'a>> {
        let p = Pipeline::new(self.resources, self.backend, heads, config)?;
        *p.cache.lock().expect("cache poisoned") = self.cache.lock().expect("cache poisoned").clone();
        Ok(p)
    }

    pub fn fingerprint(&self) -> String {
        let input = FingerprintInput {
            config: &self.config,
            backend: self.backend.name(),
            dim: self.backend.dim(),
            heads: heads_digest(&self.heads),
        };
        let json = serde_json::to_vec(&input).expect("fingerprint serializes");
        hex(&Sha256::digest(json))
    }

    /// Description and segments of a scene; cached. Both are computed
    /// regardless of which branches are enabled.
    pub fn context(&self, scene_id: &str) -> Result<Arc<SceneContext>> {
        if let Some(c) = self.cache.lock().expect("cache poisoned").get(scene_id) {
            return Ok(c.clone());
        }
        let ctx = Arc::new(self.build_context(scene_id)?);
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(scene_id.to_string(), ctx.clone());
        Ok(ctx)
    }

    fn build_context(&self, scene_id: &str) -> Result<SceneContext> {
        let res = self.resources;
        let Some(scene) = res.scenes.get(scene_id) else {
            let w = format!("scene {scene_id} has no annotations");
            return Ok(SceneContext {
                observe_warning: Some(w.clone()),
                recall_warning: Some(w),
                ..Default::default()
            });
        };
        let mut ctx = SceneContext::default();
        match analyze_scene(scene, &res.gallery, &res.places, &self.config) {
            Ok(a) => ctx.description = Some(a.description.text),
            Err(e) if maskable(&e) => ctx.observe_warning = Some(format!("observe masked for {scene_id}: {e}")),
            Err(e) => return Err(e),
        }
        match scene_knowledge(scene, &res.store, &res.kb, &self.config) {
            Ok(k) => {
                ctx.episode_id = Some(k.episode_id);
                ctx.segments = Some(k.segments);
            }
            Err(e) if maskable(&e) => ctx.recall_warning = Some(format!("recall masked for {scene_id}: {e}")),
            Err(e) => return Err(e),
        }
        Ok(ctx)
    }

    /// Encoder outputs for every enabled, unmasked branch.
    pub fn sample_embeddings(&self, sample: &QASample, want_qa: bool) -> Result<(FusionEmbeddings, Vec<String>)> {
        let ctx = self.context(&sample.scene_id)?;
        let br = self.config.branches;
        let q = sample.question.as_str();
        let cands = &sample.candidates;
        let mut warnings = Vec::new();
        let mut emb = FusionEmbeddings::default();
        let embed = |inputs: &[BranchInput]| embed_inputs(self.backend, inputs);
        if br.read {
            let subs = sample.plain_subtitles()?;
            emb.read = Some(embed(&read_inputs(&subs, q, cands))?);
        }
        if br.observe {
            match &ctx.description {
                Some(d) => emb.observe = Some(embed(&observe_inputs(d, q, cands))?),
                None => warnings.extend(ctx.observe_warning.clone()),
            }
        }
        if br.recall {
            match &ctx.segments {
                Some(segs) => {
                    let inputs = recall_inputs(q, cands, segs);
                    let ys = embed(&inputs)?;
                    let mut slots = vec![vec![None; segs.segments.len()]; cands.len()];
                    for (input, y) in inputs.iter().zip(ys) {
                        slots[input.candidate_index][input.segment_index.expect("recall segment")] = Some(y);
                    }
                    emb.recall = Some(slots);
                }
                None => warnings.extend(ctx.recall_warning.clone()),
            }
        }
        if want_qa {
            emb.qa = Some(
                cands
                    .par_iter()
                    .map(|a| self.backend.embed(&assemble_qa(q, a)))
                    .collect::<Result<_>>()?,
            );
        }
        Ok((emb, warnings))
    }

    pub fn score_sample(&self, sample: &QASample) -> Result<SampleRecord> {
        let want_qa = self.config.fusion.method() == FusionMethod::QaAtt;
        let (emb, mut warnings) = self.sample_embeddings(sample, want_qa)?;
        let scores = sample_scores(&self.heads, &emb)?;
        if scores.active().next().is_none() {
            warnings.push(format!("sample {}: every branch masked", sample.sample_id));
            let n = sample.n_candidates();
            return Ok(SampleRecord {
                sample_id: sample.sample_id.clone(),
                category: sample.category,
                gold: sample.gold_index,
                prediction: 0,
                correct: sample.gold_index == 0,
                omega: vec![0.0; n],
                scores,
                warnings,
            });
        }
        let fused = fuse(&scores, Some(&emb), &self.config.fusion)?;
        Ok(SampleRecord {
            sample_id: sample.sample_id.clone(),
            category: sample.category,
            gold: sample.gold_index,
            prediction: fused.prediction,
            correct: fused.prediction == sample.gold_index,
            omega: fused.omega,
            scores,
            warnings,
        })
    }

    /// Scores every sample (in parallel) and aggregates the report.
    pub fn evaluate(&self, samples: &[QASample]) -> Result<EvalReport> {
        let records: Vec<SampleRecord> = samples
            .par_iter()
            .map(|s| self.score_sample(s))
            .collect::<Result<_>>()?;
        Ok(self.report(records))
    }

    fn report(&self, records: Vec<SampleRecord>) -> EvalReport {
        let correct = records.iter().filter(|r| r.correct).count();
        let mut categories = BTreeMap::new();
        for c in Category::SCORED {
            let of: Vec<&SampleRecord> = records.iter().filter(|r| r.category == c).collect();
            categories.insert(c, CategoryStats::new(of.iter().filter(|r| r.correct).count(), of.len()));
        }
        let uncategorized = records.iter().filter(|r| r.category == Category::None).count();
        let warnings = records.iter().map(|r| r.warnings.len()).sum();
        EvalReport {
            schema_version: SCHEMA_VERSION,
            backend: self.backend.name().to_string(),
            branches: self.config.branches,
            fusion: self.config.fusion.method(),
            overall: CategoryStats::new(correct, records.len()),
            categories,
            uncategorized,
            warnings,
            config: self.config.clone(),
            fingerprint: self.fingerprint(),
            samples: records,
        }
    }

    /// One report per non-empty branch subset.
    pub fn ablation(&self, samples: &[QASample]) -> Result<Vec<EvalReport>> {
        BranchSet::ABLATION
            .iter()
            .map(|&branches| {
                let cfg = EvalConfig {
                    branches,
                    ..self.config.clone()
                };
                self.with(self.heads.clone(), cfg)?.evaluate(samples)
            })
            .collect()
    }

    /// Embeddings of every enabled branch plus question-answer embeddings.
    pub fn training_samples(&self, samples: &[QASample]) -> Result<Vec<TrainingSample>> {
        samples
            .par_iter()
            .map(|s| {
                let (embeddings, _) = self.sample_embeddings(s, true)?;
                Ok(TrainingSample {
                    embeddings,
                    gold: s.gold_index,
                })
            })
            .collect()
    }

    /// Trains the requested fusion (and, for fc, the heads) on `train`.
    /// Parameter-free methods return unchanged heads.
    pub fn train(
        &self,
        method: FusionMethod,
        train: &[QASample],
        cfg: &TrainConfig,
    ) -> Result<(BranchHeads, FusionHead)> {
        match method {
            FusionMethod::Average => Ok((self.heads.clone(), FusionHead::Average)),
            FusionMethod::Maximum => Ok((self.heads.clone(), FusionHead::Maximum)),
            FusionMethod::Fc => {
                let out = train_fc(&self.training_samples(train)?, &self.heads, cfg)?;
                Ok((out.heads, out.fusion))
            }
            FusionMethod::SelfAtt | FusionMethod::QaAtt => {
                let out = train_attention(&self.training_samples(train)?, &self.heads, method, cfg)?;
                Ok((out.heads, out.fusion))
            }
        }
    }

    /// Average, maximum, self-att, qa-att, fc without and with the MW loss.
    pub fn compare_fusion(&self, train: &[QASample], eval: &[QASample], cfg: &TrainConfig) -> Result<Vec<FusionRow>> {
        let rows: [(&str, FusionMethod, MWConfig); 6] = [
            ("average", FusionMethod::Average, cfg.betas),
            ("maximum", FusionMethod::Maximum, cfg.betas),
            ("self-att", FusionMethod::SelfAtt, cfg.betas),
            ("qa-att", FusionMethod::QaAtt, cfg.betas),
            ("fc w/o mw", FusionMethod::Fc, MWConfig::fused_only()),
            ("fc w/ mw", FusionMethod::Fc, cfg.betas),
        ];
        rows.into_iter()
            .map(|(label, method, betas)| {
                let tc = TrainConfig { betas, ..cfg.clone() };
                let (heads, fusion) = self.train(method, train, &tc)?;
                let ec = EvalConfig {
                    fusion,
                    betas,
                    ..self.config.clone()
                };
                Ok(FusionRow {
                    label: label.to_string(),
                    report: self.with(heads, ec)?.evaluate(eval)?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub label: String,
    pub report: EvalReport,
}

/// Accuracy grid, one row per report.
pub fn grid_text<'r>(rows: impl IntoIterator<Item = (String, &'r EvalReport)>) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<22}", "config");
    for c in Category::SCORED {
        let _ = write!(s, " {:>9}", c.as_str());
    }
    let _ = writeln!(s, " {:>9}", "overall");
    for (label, r) in rows {
        let _ = write!(s, "{label:<22}");
        for c in Category::SCORED {
            let acc = r.categories[&c].accuracy.map_or("-".into(), |a| format!("{a:.3}"));
            let _ = write!(s, " {acc:>9}");
        }
        let _ = writeln!(s, " {:>9.3}", r.accuracy());
    }
    s
}
