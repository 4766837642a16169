//! Rule-based scene descriptions rendered from a [`SceneGraph`].
//!
//! One sentence for the action (with its characters and place), then one
//! sentence per relation node in node order:
//!
//! | characters | place | sentence                                   |
//! |------------|-------|--------------------------------------------|
//! | 0          | no    | `Someone is <action>.`                     |
//! | 1          | no    | `<C> is <action>.`                         |
//! | >1         | no    | `<C1>, ..., <Cn-1> and <Cn> are <action>.` |
//! | 0          | yes   | `Someone is <action> at <place>.`          |
//! | 1          | yes   | `<C> is <action> at <place>.`              |
//! | >1         | yes   | `<C1> ... and <Cn> are <action> at <place>.` |
//!
//! Relation sentences read `<subjects> <relation> <objects>.` where either
//! side may list several nodes (`Chair, table and door behind Penny.`).

use serde::{Deserialize, Serialize};

use crate::scenegraph::SceneGraph;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub sentences: Vec<String>,
    pub text: String,
}

impl Description {
    fn from_sentences(sentences: Vec<String>) -> Self {
        let text = sentences.join(" ");
        Description { sentences, text }
    }
}

/// `a`, `a and b`, `a, b and c`. No serial comma.
pub fn join_list<S: AsRef<str>>(items: &[S]) -> String {
    match items {
        [] => String::new(),
        [only] => only.as_ref().to_string(),
        [init @ .., last] => {
            let head: Vec<&str> = init.iter().map(AsRef::as_ref).collect();
            format!("{} and {}", head.join(", "), last.as_ref())
        }
    }
}

fn sentence(body: String) -> String {
    let mut chars = body.chars();
    let mut out = match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect::<String>(),
        None => String::new(),
    };
    out.push('.');
    out
}

fn action_sentence(g: &SceneGraph) -> String {
    let subject = match g.characters.len() {
        0 => "Someone is".to_string(),
        1 => format!("{} is", g.characters[0]),
        _ => format!("{} are", join_list(&g.characters)),
    };
    match &g.place {
        Some(place) => sentence(format!("{subject} {} at {place}", g.action)),
        None => sentence(format!("{subject} {}", g.action)),
    }
}

fn relation_sentence(g: &SceneGraph, k: usize) -> String {
    let label = |n| g.node_label(n).unwrap_or_default();
    let subjects: Vec<&str> = g.relation_subjects(k).map(label).collect();
    let objects: Vec<&str> = g.relation_objects(k).map(label).collect();
    sentence(format!(
        "{} {} {}",
        join_list(&subjects),
        g.relations[k].label,
        join_list(&objects)
    ))
}

/// Renders the description of a valid graph; total on valid input.
pub fn generate_description(g: &SceneGraph) -> Description {
    let mut sentences = Vec::with_capacity(1 + g.relations.len());
    sentences.push(action_sentence(g));
    sentences.extend((0..g.relations.len()).map(|k| relation_sentence(g, k)));
    Description::from_sentences(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SCHEMA_VERSION;
    use crate::scenegraph::{EdgeKind, NodeRef, RelationNode, TypedEdge};

    fn graph(chars: &[&str], place: Option<&str>, action: &str) -> SceneGraph {
        let mut edges = Vec::new();
        if place.is_some() {
            edges.push(TypedEdge {
                kind: EdgeKind::PlaceAction,
                src: NodeRef::Place,
                dst: NodeRef::Action,
            });
        }
        for i in 0..chars.len() {
            edges.push(TypedEdge {
                kind: EdgeKind::ActionCharacter,
                src: NodeRef::Action,
                dst: NodeRef::Character(i),
            });
        }
        SceneGraph {
            schema_version: SCHEMA_VERSION,
            characters: chars.iter().map(|s| s.to_string()).collect(),
            place: place.map(str::to_string),
            objects: vec![],
            relations: vec![],
            action: action.into(),
            edges,
        }
    }

    #[test]
    fn list_joining() {
        assert_eq!(join_list::<&str>(&[]), "");
        assert_eq!(join_list(&["a"]), "a");
        assert_eq!(join_list(&["a", "b"]), "a and b");
        assert_eq!(join_list(&["a", "b", "c"]), "a, b and c");
    }

    /// Hand-expanded action/place templates for |V_C| in 0..=3 and |V_P| in {0, 1}.
    #[test]
    fn exhaustive_action_templates() {
        let names = ["Amy", "Raj", "Bernadette"];
        let expected = [
            ("Someone is eating.", "Someone is eating at a bar."),
            ("Amy is eating.", "Amy is eating at a bar."),
            ("Amy and Raj are eating.", "Amy and Raj are eating at a bar."),
            (
                "Amy, Raj and Bernadette are eating.",
                "Amy, Raj and Bernadette are eating at a bar.",
            ),
        ];
        for (n, (no_place, with_place)) in expected.iter().enumerate() {
            let g = graph(&names[..n], None, "eating");
            assert_eq!(generate_description(&g).text, *no_place);
            let g = graph(&names[..n], Some("a bar"), "eating");
            assert_eq!(generate_description(&g).text, *with_place);
        }
    }

    #[test]
    fn sentence_count_and_join() {
        let mut g = graph(&["Raj"], None, "drinking");
        g.objects = vec!["bottle".into(), "book".into()];
        g.relations = vec![
            RelationNode {
                label: "holding".into(),
            },
            RelationNode { label: "near".into() },
        ];
        g.edges.extend([
            TypedEdge::new(NodeRef::Character(0), NodeRef::Relation(0)).unwrap(),
            TypedEdge::new(NodeRef::Relation(0), NodeRef::Object(0)).unwrap(),
            TypedEdge::new(NodeRef::Character(0), NodeRef::Relation(1)).unwrap(),
            TypedEdge::new(NodeRef::Relation(1), NodeRef::Object(1)).unwrap(),
        ]);
        g.validate().unwrap();
        let d = generate_description(&g);
        assert_eq!(d.sentences.len(), 1 + g.relations.len());
        assert_eq!(d.text, "Raj is drinking. Raj holding bottle. Raj near book.");
        assert!(d.sentences.iter().all(|s| s.ends_with('.')));
    }

    #[test]
    fn character_to_character_relation_uses_subject_form() {
        let mut g = graph(&["Penny", "Amy"], None, "talking");
        g.relations = vec![RelationNode {
            label: "next to".into(),
        }];
        g.edges.extend([
            TypedEdge::new(NodeRef::Character(0), NodeRef::Relation(0)).unwrap(),
            TypedEdge::new(NodeRef::Relation(0), NodeRef::Character(1)).unwrap(),
        ]);
        assert_eq!(generate_description(&g).sentences[1], "Penny next to Amy.");
    }
}
