//! Scene place label from per-frame place scores.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FrameAnnotation, UNKNOWN};

/// Per-frame classes that contribute to the scene vote.
pub const TOP_K_PER_FRAME: usize = 5;

/// Place labels known to the classifier, always including [`UNKNOWN`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaceVocabulary {
    labels: Vec<String>,
}

impl PlaceVocabulary {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for l in &labels {
            if l.trim().is_empty() {
                return Err(Error::InvalidInput("empty place label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate place label {l:?}")));
            }
        }
        if !seen.contains(UNKNOWN) {
            labels.push(UNKNOWN.to_string());
        }
        Ok(PlaceVocabulary { labels })
    }

    /// One label per line; blank lines and `#` comments are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Labels outside the vocabulary map to [`UNKNOWN`].
    pub fn remap<'a>(&self, label: &'a str) -> &'a str {
        if self.contains(label) {
            label
        } else {
            UNKNOWN
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacePrediction {
    pub label: String,
    pub accumulated_score: f64,
}

impl PlacePrediction {
    pub fn is_unknown(&self) -> bool {
        self.label == UNKNOWN
    }
}

/// Top-5 (label, score) pairs of one frame after vocabulary remapping.
///
/// Out-of-vocabulary labels collapse into [`UNKNOWN`] keeping their best
/// score. Ranking ties at the cut keep the smaller label.
pub fn frame_top_k<'a>(scores: &'a BTreeMap<String, f64>, vocab: &PlaceVocabulary) -> Result<Vec<(&'a str, f64)>> {
    let mut merged: BTreeMap<&str, f64> = BTreeMap::new();
    for (label, &score) in scores {
        if score.is_nan() {
            return Err(Error::NonFinite(format!("place score for {label:?}")));
        }
        let key = vocab.remap(label);
        merged.entry(key).and_modify(|s| *s = s.max(score)).or_insert(score);
    }
    let mut ranked: Vec<(&str, f64)> = merged.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(TOP_K_PER_FRAME);
    Ok(ranked)
}

/// Sums each frame's top-5 scores per label and returns the best label.
/// An empty frame list predicts [`UNKNOWN`] with score zero.
pub fn aggregate_place(frames: &[FrameAnnotation], vocab: &PlaceVocabulary) -> Result<PlacePrediction> {
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for frame in frames {
        for (label, score) in frame_top_k(&frame.place_scores, vocab)? {
            *totals.entry(label).or_default() += score;
        }
    }
    let best = totals
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(a.0)));
    Ok(match best {
        Some((label, accumulated_score)) => PlacePrediction {
            label: label.to_string(),
            accumulated_score,
        },
        None => PlacePrediction {
            label: UNKNOWN.to_string(),
            accumulated_score: 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> PlaceVocabulary {
        PlaceVocabulary::new(["kitchen", "apartment", "the bedroom", "a lab", "a bar", "a car"]).unwrap()
    }

    fn frame(scores: &[(&str, f64)]) -> FrameAnnotation {
        FrameAnnotation {
            frame_index: 0,
            frame_feature: None,
            faces: vec![],
            place_scores: scores.iter().map(|(l, s)| (l.to_string(), *s)).collect(),
            triplets: vec![],
        }
    }

    #[test]
    fn single_frame_top_label() {
        let p = aggregate_place(&[frame(&[("kitchen", 0.9), ("a lab", 0.05)])], &vocab()).unwrap();
        assert_eq!(p.label, "kitchen");
        assert!((p.accumulated_score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn accumulation_beats_single_frame_peak() {
        let frames = [
            frame(&[("kitchen", 0.6), ("a bar", 0.2)]),
            frame(&[("apartment", 0.7), ("kitchen", 0.3)]),
        ];
        let p = aggregate_place(&frames, &vocab()).unwrap();
        assert_eq!(p.label, "kitchen");
        assert!((p.accumulated_score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn unknown_competes() {
        let frames = [frame(&[(UNKNOWN, 0.8), ("a car", 0.1)]), frame(&[(UNKNOWN, 0.7)])];
        let p = aggregate_place(&frames, &vocab()).unwrap();
        assert!(p.is_unknown());
        assert!((p.accumulated_score - 1.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocabulary_maps_to_unknown() {
        let p = aggregate_place(&[frame(&[("shower", 0.9), ("kitchen", 0.5)])], &vocab()).unwrap();
        assert!(p.is_unknown());
    }

    #[test]
    fn empty_scene_is_unknown() {
        let p = aggregate_place(&[], &vocab()).unwrap();
        assert_eq!(
            p,
            PlacePrediction {
                label: UNKNOWN.into(),
                accumulated_score: 0.0
            }
        );
    }

    #[test]
    fn nan_rejected() {
        assert!(aggregate_place(&[frame(&[("kitchen", f64::NAN)])], &vocab()).is_err());
    }

    #[test]
    fn only_top_five_count() {
        // The sixth label never accumulates even when present in every frame.
        let f = frame(&[
            ("kitchen", 0.5),
            ("apartment", 0.4),
            ("the bedroom", 0.3),
            ("a lab", 0.2),
            ("a bar", 0.1),
            ("a car", 0.09),
        ]);
        let top = frame_top_k(&f.place_scores, &vocab()).unwrap();
        assert_eq!(top.len(), 5);
        assert!(!top.iter().any(|(l, _)| *l == "a car"));
    }

    #[test]
    fn vocabulary_rules() {
        assert!(vocab().contains(UNKNOWN));
        assert!(PlaceVocabulary::new(["a", "a"]).is_err());
    }

    const LABELS: [&str; 7] = [
        "kitchen",
        "apartment",
        "the bedroom",
        "a lab",
        "a bar",
        "a car",
        UNKNOWN,
    ];

    fn arb_frames() -> impl Strategy<Value = Vec<FrameAnnotation>> {
        prop::collection::vec(
            prop::collection::btree_map(prop::sample::select(LABELS.to_vec()), 0.0f64..1.0, 1..7),
            1..8,
        )
        .prop_map(|maps| {
            maps.into_iter()
                .map(|m| FrameAnnotation {
                    frame_index: 0,
                    frame_feature: None,
                    faces: vec![],
                    place_scores: m.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                    triplets: vec![],
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_bruteforce_accumulation(frames in arb_frames()) {
            // Oracle: for every label, add its score in each frame where fewer
            // than five labels beat it under (score desc, label asc).
            let v = vocab();
            let mut best = (String::new(), f64::NEG_INFINITY);
            for label in LABELS {
                let mut total = 0.0;
                let mut seen = false;
                for f in &frames {
                    if let Some(&s) = f.place_scores.get(label) {
                        let beaten_by = f.place_scores.iter()
                            .filter(|(l, &o)| o > s || (o == s && l.as_str() < label))
                            .count();
                        if beaten_by < 5 {
                            total += s;
                            seen = true;
                        }
                    }
                }
                if seen && (total > best.1 || (total == best.1 && label < best.0.as_str())) {
                    best = (label.to_string(), total);
                }
            }
            let got = aggregate_place(&frames, &v).unwrap();
            prop_assert_eq!(got.label, best.0);
            prop_assert!((got.accumulated_score - best.1).abs() < 1e-12);
        }

        #[test]
        fn invariant_to_frame_order(mut frames in arb_frames()) {
            let v = vocab();
            let a = aggregate_place(&frames, &v).unwrap();
            frames.reverse();
            let b = aggregate_place(&frames, &v).unwrap();
            prop_assert_eq!(a.label, b.label);
            prop_assert!((a.accumulated_score - b.accumulated_score).abs() < 1e-9);
        }

        #[test]
        fn winner_at_least_its_best_single_frame(frames in arb_frames()) {
            let v = vocab();
            let p = aggregate_place(&frames, &v).unwrap();
            for f in &frames {
                if let Some(&s) = f.place_scores.get(&p.label) {
                    let top1 = frame_top_k(&f.place_scores, &v).unwrap()[0];
                    if top1.0 == p.label {
                        prop_assert!(p.accumulated_score >= s - 1e-12);
                    }
                }
            }
            if frames.len() == 1 {
                let top1 = frame_top_k(&frames[0].place_scores, &v).unwrap()[0];
                prop_assert_eq!(p.label.as_str(), top1.0);
            }
        }
    }
}
