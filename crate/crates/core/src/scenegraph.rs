//! Typed video scene graph built from characters, place, relation triplets
//! and the scene action.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::characters::CharacterSet;
use crate::error::{Error, Result};
use crate::ingest::{DetectedTriplet, SCHEMA_VERSION, UNKNOWN};
use crate::places::PlacePrediction;

/// Detector labels that denote a person and can be resolved to a character.
pub const PERSON_CLASSES: [&str; 8] = ["boy", "girl", "guy", "lady", "man", "person", "player", "woman"];

pub fn is_person_label(label: &str) -> bool {
    PERSON_CLASSES.iter().any(|p| p.eq_ignore_ascii_case(label.trim()))
}

/// A triplet whose person endpoints have been replaced by character names.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolvedTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub subject_is_character: bool,
    pub object_is_character: bool,
}

fn resolve_endpoint(
    label: &str,
    bbox: &crate::ingest::BBox,
    frame_index: u32,
    chars: &CharacterSet,
    iou_threshold: f64,
) -> Option<(String, bool)> {
    if !is_person_label(label) {
        return Some((label.to_string(), chars.contains(label)));
    }
    chars
        .in_frame(frame_index)
        .map(|(name, b)| (name, b.iou(bbox)))
        .filter(|(_, iou)| *iou >= iou_threshold)
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(name, _)| (name.to_string(), true))
}

/// Renames person endpoints to the best-overlapping character in the same
/// frame and keeps only triplets that touch a known character.
///
/// A person endpoint without a box match at `iou_threshold` drops its
/// triplet. Exact duplicates collapse to their first occurrence, keeping
/// the highest detector score.
pub fn resolve_person_boxes<'a>(
    triplets: impl IntoIterator<Item = (u32, &'a DetectedTriplet)>,
    chars: &CharacterSet,
    iou_threshold: f64,
) -> Vec<ResolvedTriplet> {
    let mut kept: Vec<(ResolvedTriplet, f64)> = Vec::new();
    let mut index: HashMap<(String, String, String), usize> = HashMap::new();
    for (frame_index, t) in triplets {
        let Some((subject, s_char)) =
            resolve_endpoint(&t.subject_label, &t.subject_bbox, frame_index, chars, iou_threshold)
        else {
            continue;
        };
        let Some((object, o_char)) =
            resolve_endpoint(&t.object_label, &t.object_bbox, frame_index, chars, iou_threshold)
        else {
            continue;
        };
        if !s_char && !o_char {
            continue;
        }
        let key = (subject.clone(), t.relation_label.clone(), object.clone());
        match index.get(&key) {
            Some(&i) => kept[i].1 = kept[i].1.max(t.score),
            None => {
                index.insert(key, kept.len());
                kept.push((
                    ResolvedTriplet {
                        subject,
                        relation: t.relation_label.clone(),
                        object,
                        subject_is_character: s_char,
                        object_is_character: o_char,
                    },
                    t.score,
                ));
            }
        }
    }
    kept.into_iter().map(|(t, _)| t).collect()
}

/// Argmax of scene-level action scores; ties go to the smaller label.
pub fn scene_action(action_scores: &BTreeMap<String, f64>) -> Result<String> {
    if let Some((label, _)) = action_scores.iter().find(|(_, s)| s.is_nan()) {
        return Err(Error::NonFinite(format!("action score for {label:?}")));
    }
    action_scores
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(l, _)| l.clone())
        .ok_or_else(|| Error::InvalidInput("scene has no action scores".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "index", rename_all = "lowercase")]
pub enum NodeRef {
    Character(usize),
    Place,
    Object(usize),
    Relation(usize),
    Action,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    #[serde(rename = "P->A")]
    PlaceAction,
    #[serde(rename = "A->C")]
    ActionCharacter,
    #[serde(rename = "C->R")]
    CharacterRelation,
    #[serde(rename = "R->C")]
    RelationCharacter,
    #[serde(rename = "O->R")]
    ObjectRelation,
    #[serde(rename = "R->O")]
    RelationObject,
}

impl EdgeKind {
    fn endpoints_match(&self, src: &NodeRef, dst: &NodeRef) -> bool {
        use NodeRef::*;
        matches!(
            (self, src, dst),
            (EdgeKind::PlaceAction, Place, Action)
                | (EdgeKind::ActionCharacter, Action, Character(_))
                | (EdgeKind::CharacterRelation, Character(_), Relation(_))
                | (EdgeKind::RelationCharacter, Relation(_), Character(_))
                | (EdgeKind::ObjectRelation, Object(_), Relation(_))
                | (EdgeKind::RelationObject, Relation(_), Object(_))
        )
    }

    pub fn for_endpoints(src: &NodeRef, dst: &NodeRef) -> Option<EdgeKind> {
        [
            EdgeKind::PlaceAction,
            EdgeKind::ActionCharacter,
            EdgeKind::CharacterRelation,
            EdgeKind::RelationCharacter,
            EdgeKind::ObjectRelation,
            EdgeKind::RelationObject,
        ]
        .into_iter()
        .find(|k| k.endpoints_match(src, dst))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TypedEdge {
    pub kind: EdgeKind,
    pub src: NodeRef,
    pub dst: NodeRef,
}

impl TypedEdge {
    pub fn new(src: NodeRef, dst: NodeRef) -> Result<Self> {
        EdgeKind::for_endpoints(&src, &dst)
            .map(|kind| TypedEdge { kind, src, dst })
            .ok_or_else(|| Error::InvalidInput(format!("no edge kind joins {src:?} -> {dst:?}")))
    }
}

/// Relation node; `label` is the predicate text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationNode {
    pub label: String,
}

/// `G = (V, E)` for one scene. Node lists keep first-insertion order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    #[serde(default = "crate::scenegraph::schema")]
    pub schema_version: u32,
    pub characters: Vec<String>,
    pub place: Option<String>,
    pub objects: Vec<String>,
    pub relations: Vec<RelationNode>,
    pub action: String,
    pub edges: Vec<TypedEdge>,
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

impl SceneGraph {
    pub fn node_label(&self, node: &NodeRef) -> Option<&str> {
        match *node {
            NodeRef::Character(i) => self.characters.get(i).map(String::as_str),
            NodeRef::Place => self.place.as_deref(),
            NodeRef::Object(i) => self.objects.get(i).map(String::as_str),
            NodeRef::Relation(i) => self.relations.get(i).map(|r| r.label.as_str()),
            NodeRef::Action => Some(self.action.as_str()),
        }
    }

    /// Subject-side nodes (characters or objects) pointing into relation `k`.
    pub fn relation_subjects(&self, k: usize) -> impl Iterator<Item = &NodeRef> {
        self.edges
            .iter()
            .filter(move |e| e.dst == NodeRef::Relation(k))
            .map(|e| &e.src)
    }

    /// Object-side nodes that relation `k` points to.
    pub fn relation_objects(&self, k: usize) -> impl Iterator<Item = &NodeRef> {
        self.edges
            .iter()
            .filter(move |e| e.src == NodeRef::Relation(k))
            .map(|e| &e.dst)
    }

    /// Structural checks: typed edges, no unknown labels, disjoint
    /// character/object sets, and every relation wired on both sides with at
    /// least one character endpoint.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.action.trim().is_empty() {
            return bad("action node is empty".into());
        }
        let labels = self
            .characters
            .iter()
            .chain(&self.objects)
            .chain(self.place.iter())
            .chain(std::iter::once(&self.action))
            .chain(self.relations.iter().map(|r| &r.label));
        for l in labels {
            if l == UNKNOWN {
                return bad("unknown label inside the graph".into());
            }
        }
        let chars: HashSet<&str> = self.characters.iter().map(String::as_str).collect();
        if chars.len() != self.characters.len() {
            return bad("duplicate character node".into());
        }
        let objs: HashSet<&str> = self.objects.iter().map(String::as_str).collect();
        if objs.len() != self.objects.len() {
            return bad("duplicate object node".into());
        }
        if let Some(o) = self.objects.iter().find(|o| chars.contains(o.as_str())) {
            return bad(format!("{o:?} is both a character and an object"));
        }
        for e in &self.edges {
            if !e.kind.endpoints_match(&e.src, &e.dst) {
                return bad(format!("edge {:?} joins {:?} -> {:?}", e.kind, e.src, e.dst));
            }
            if self.node_label(&e.src).is_none() || self.node_label(&e.dst).is_none() {
                return bad(format!("edge {:?} references a missing node", e.kind));
            }
        }
        for k in 0..self.relations.len() {
            let subj: Vec<_> = self.relation_subjects(k).collect();
            let obj: Vec<_> = self.relation_objects(k).collect();
            if subj.is_empty() || obj.is_empty() {
                return bad(format!("relation {k} lacks a subject or object edge"));
            }
            let touches_char = subj.iter().chain(&obj).any(|n| matches!(n, NodeRef::Character(_)));
            if !touches_char {
                return bad(format!("relation {k} has no character endpoint"));
            }
        }
        Ok(())
    }
}

/// Assembles the scene graph.
///
/// Characters become `V_C` (unknowns never reach the set), a non-unknown
/// place becomes `V_P`, every triplet endpoint that is not a character
/// becomes an object node, and every triplet gets its own relation node
/// wired with exactly two edges.
pub fn build_graph(
    chars: &CharacterSet,
    place: &PlacePrediction,
    triplets: &[ResolvedTriplet],
    action: &str,
) -> Result<SceneGraph> {
    if action.trim().is_empty() {
        return Err(Error::InvalidInput("scene action is empty".into()));
    }
    if action == UNKNOWN {
        return Err(Error::InvalidInput("scene action cannot be unknown".into()));
    }
    let characters: Vec<String> = chars.names().filter(|n| *n != UNKNOWN).map(str::to_string).collect();
    let char_index: HashMap<&str, usize> = characters.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let place_node = (!place.is_unknown()).then(|| place.label.clone());

    let mut objects: Vec<String> = Vec::new();
    let mut object_index: HashMap<String, usize> = HashMap::new();
    let mut relations = Vec::with_capacity(triplets.len());
    let mut edges = Vec::new();
    if place_node.is_some() {
        edges.push(TypedEdge {
            kind: EdgeKind::PlaceAction,
            src: NodeRef::Place,
            dst: NodeRef::Action,
        });
    }
    for i in 0..characters.len() {
        edges.push(TypedEdge {
            kind: EdgeKind::ActionCharacter,
            src: NodeRef::Action,
            dst: NodeRef::Character(i),
        });
    }

    let mut node_for = |label: &str, objects: &mut Vec<String>| -> Result<NodeRef> {
        if let Some(&i) = char_index.get(label) {
            return Ok(NodeRef::Character(i));
        }
        if label == UNKNOWN || label.trim().is_empty() {
            return Err(Error::InvalidInput(format!("triplet endpoint {label:?}")));
        }
        let next = objects.len();
        let i = *object_index.entry(label.to_string()).or_insert(next);
        if i == next {
            objects.push(label.to_string());
        }
        Ok(NodeRef::Object(i))
    };

    for t in triplets {
        if !char_index.contains_key(t.subject.as_str()) && !char_index.contains_key(t.object.as_str()) {
            return Err(Error::InvalidInput(format!(
                "triplet ({}, {}, {}) has no known character",
                t.subject, t.relation, t.object
            )));
        }
        let subject = node_for(&t.subject, &mut objects)?;
        let object = node_for(&t.object, &mut objects)?;
        let rel = NodeRef::Relation(relations.len());
        relations.push(RelationNode {
            label: t.relation.clone(),
        });
        edges.push(TypedEdge::new(subject, rel)?);
        edges.push(TypedEdge::new(rel, object)?);
    }

    let graph = SceneGraph {
        schema_version: SCHEMA_VERSION,
        characters,
        place: place_node,
        objects,
        relations,
        action: action.to_string(),
        edges,
    };
    graph.validate()?;
    Ok(graph)
}
