//! Knowledge acquisition: episode identification by frame retrieval and
//! sliding-window slicing of the retrieved plot summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FeatureMatrix, FrameRow};

/// Exact cosine-similarity index over every stored frame.
#[derive(Clone, Debug)]
pub struct FrameIndexStore {
    dim: usize,
    rows: Vec<f64>,
    meta: Vec<FrameRow>,
}

impl FrameIndexStore {
    /// Normalizes rows on construction; zero rows are rejected.
    pub fn new(matrix: &FeatureMatrix) -> Result<Self> {
        if matrix.is_empty() {
            return Err(Error::InvalidInput("frame store is empty".into()));
        }
        let mut rows = Vec::with_capacity(matrix.data.len());
        for i in 0..matrix.len() {
            let row = matrix.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("frame store row {i}")));
            }
            if norm == 0.0 {
                let r = &matrix.rows[i];
                return Err(Error::ZeroNorm(format!("scene {} frame {}", r.scene_id, r.frame_index)));
            }
            rows.extend(row.iter().map(|v| v / norm));
        }
        Ok(FrameIndexStore {
            dim: matrix.dim,
            rows,
            meta: matrix.rows.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self, i: usize) -> &FrameRow {
        &self.meta[i]
    }

    /// Most similar stored row for a query, skipping rows of `exclude_scene`.
    /// Equal similarities keep the earlier row.
    pub fn nearest(&self, query: &[f64], exclude_scene: Option<&str>) -> Result<Option<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: query.len(),
            });
        }
        let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm("query frame".into()));
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite("query frame".into()));
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.rows.chunks_exact(self.dim).enumerate() {
            if exclude_scene.is_some_and(|s| self.meta[i].scene_id == s) {
                continue;
            }
            let sim = row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / norm;
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        Ok(best)
    }
}

/// Tally of per-frame nearest-neighbour votes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeVote {
    pub episode_id: String,
    pub votes: usize,
    pub similarity: f64,
}

/// Votes per episode, best first.
pub fn episode_votes(
    scene_frames: &[&[f64]],
    store: &FrameIndexStore,
    exclude_scene: Option<&str>,
) -> Result<Vec<EpisodeVote>> {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for frame in scene_frames {
        if let Some((row, sim)) = store.nearest(frame, exclude_scene)? {
            let slot = tally.entry(store.meta[row].episode_id.as_str()).or_default();
            slot.0 += 1;
            slot.1 += sim;
        }
    }
    let mut votes: Vec<EpisodeVote> = tally
        .into_iter()
        .map(|(episode_id, (votes, similarity))| EpisodeVote {
            episode_id: episode_id.to_string(),
            votes,
            similarity,
        })
        .collect();
    // Most votes, then higher summed similarity, then smaller id.
    votes.sort_by(|a, b| {
        b.votes
            .cmp(&a.votes)
            .then_with(|| b.similarity.total_cmp(&a.similarity))
            .then_with(|| a.episode_id.cmp(&b.episode_id))
    });
    Ok(votes)
}

/// Episode whose frames win the most per-frame nearest-neighbour votes.
pub fn identify_episode(
    scene_frames: &[&[f64]],
    store: &FrameIndexStore,
    exclude_scene: Option<&str>,
) -> Result<String> {
    if scene_frames.is_empty() {
        return Err(Error::InvalidInput("scene has no frames to identify".into()));
    }
    episode_votes(scene_frames, store, exclude_scene)?
        .into_iter()
        .next()
        .map(|v| v.episode_id)
        .ok_or_else(|| Error::NotFound("no stored frame outside the query scene".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    /// Window length in words.
    pub window: usize,
    /// Stride in words; a stride longer than the window leaves gaps.
    pub stride: usize,
    /// Segments kept per document; shorter lists are padded.
    pub max_segments: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            window: 200,
            stride: 100,
            max_segments: 5,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if self.max_segments == 0 {
            return Err(Error::Config("max_segments must be positive".into()));
        }
        Ok(())
    }

    /// Number of windows before truncation or padding; at least one.
    pub fn segment_count(&self, doc_words: usize) -> usize {
        if doc_words <= self.window {
            1
        } else {
            (doc_words - self.window).div_ceil(self.stride) + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    /// Word offset of the first word; `None` for padding.
    pub start_word: Option<usize>,
}

impl Segment {
    pub fn is_padded(&self) -> bool {
        self.start_word.is_none()
    }
}

/// Exactly `max_segments` entries: retained windows followed by padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    pub params: WindowParams,
    pub doc_words: usize,
    /// Window count before truncation and padding.
    pub total_segments: usize,
}

impl SegmentSet {
    pub fn retained(&self) -> impl Iterator<Item = (usize, &Segment)> {
        self.segments.iter().enumerate().filter(|(_, s)| !s.is_padded())
    }

    pub fn retained_count(&self) -> usize {
        self.segments.iter().filter(|s| !s.is_padded()).count()
    }
}

/// Slices a document into overlapping word windows.
pub fn slice_document(doc: &str, params: WindowParams) -> Result<SegmentSet> {
    params.validate()?;
    let words: Vec<&str> = doc.split_whitespace().collect();
    let total = params.segment_count(words.len());
    let mut segments: Vec<Segment> = (0..total.min(params.max_segments))
        .map(|j| {
            let start = j * params.stride;
            let end = (start + params.window).min(words.len());
            Segment {
                text: words[start.min(end)..end].join(" "),
                start_word: Some(start),
            }
        })
        .collect();
    segments.resize(
        params.max_segments,
        Segment {
            text: String::new(),
            start_word: None,
        },
    );
    Ok(SegmentSet {
        segments,
        params,
        doc_words: words.len(),
        total_segments: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(rows: &[(&str, &str, Vec<f64>)]) -> FrameIndexStore {
        let mut m = FeatureMatrix::new(rows[0].2.len());
        for (i, (scene, ep, v)) in rows.iter().enumerate() {
            m.push(
                FrameRow {
                    scene_id: scene.to_string(),
                    episode_id: ep.to_string(),
                    frame_index: i as u32,
                },
                v,
            )
            .unwrap();
        }
        FrameIndexStore::new(&m).unwrap()
    }

    #[test]
    fn majority_vote_wins() {
        let s = store(&[
            ("a", "e2", vec![1.0, 0.0, 0.0]),
            ("b", "e5", vec![0.0, 1.0, 0.0]),
            ("c", "e9", vec![0.0, 0.0, 1.0]),
        ]);
        let q = [[0.9, 0.1, 0.0], [1.0, 0.2, 0.1], [0.0, 1.0, 0.1]];
        let refs: Vec<&[f64]> = q.iter().map(|v| v.as_slice()).collect();
        assert_eq!(identify_episode(&refs, &s, None).unwrap(), "e2");
    }

    #[test]
    fn exact_frame_identifies_episode() {
        let s = store(&[("a", "e1", vec![1.0, 2.0]), ("b", "e7", vec![-3.0, 1.0])]);
        assert_eq!(identify_episode(&[&[-3.0, 1.0]], &s, None).unwrap(), "e7");
    }

    #[test]
    fn tie_goes_to_higher_similarity_then_id() {
        let s = store(&[("a", "e1", vec![1.0, 0.0]), ("b", "e2", vec![0.0, 1.0])]);
        let refs: Vec<&[f64]> = vec![&[1.0, 0.1], &[0.5, 1.0]];
        // One vote each; e1 has the closer match.
        assert_eq!(identify_episode(&refs, &s, None).unwrap(), "e1");
        let refs: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.0, 1.0]];
        assert_eq!(identify_episode(&refs, &s, None).unwrap(), "e1");
    }

    #[test]
    fn excluded_scene_is_skipped() {
        let s = store(&[("own", "e1", vec![1.0, 0.0]), ("other", "e2", vec![0.7, 0.7])]);
        assert_eq!(identify_episode(&[&[1.0, 0.0]], &s, Some("own")).unwrap(), "e2");
        let only = store(&[("own", "e1", vec![1.0, 0.0])]);
        assert!(matches!(
            identify_episode(&[&[1.0, 0.0]], &only, Some("own")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let s = store(&[("a", "e1", vec![1.0, 0.0])]);
        assert!(matches!(
            identify_episode(&[&[1.0, 0.0, 0.0]], &s, None),
            Err(Error::Dimension { .. })
        ));
    }

    fn doc(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn boundary_document_is_one_segment() {
        let s = slice_document(&doc(200), WindowParams::default()).unwrap();
        assert_eq!(s.total_segments, 1);
        assert_eq!(s.retained_count(), 1);
        assert_eq!(s.segments.len(), 5);
        assert_eq!(s.segments[0].text, doc(200));
    }

    #[test]
    fn long_summary_truncates_to_five() {
        let s = slice_document(&doc(1605), WindowParams::default()).unwrap();
        assert_eq!(s.total_segments, 16);
        assert_eq!(s.retained_count(), 5);
        assert_eq!(s.segments[4].start_word, Some(400));
    }

    #[test]
    fn short_document_is_padded() {
        let s = slice_document(&doc(250), WindowParams::default()).unwrap();
        assert_eq!(s.total_segments, 2);
        assert_eq!(s.retained_count(), 2);
        let expected: Vec<String> = (100..250).map(|i| format!("w{i}")).collect();
        assert_eq!(s.segments[1].text, expected.join(" "));
        assert!(s.segments[2..].iter().all(Segment::is_padded));
    }

    #[test]
    fn empty_document_keeps_one_segment() {
        let s = slice_document("", WindowParams::default()).unwrap();
        assert_eq!(s.retained_count(), 1);
        assert_eq!(s.segments[0].text, "");
    }

    #[test]
    fn invalid_params() {
        for p in [
            WindowParams {
                window: 0,
                ..Default::default()
            },
            WindowParams {
                stride: 0,
                ..Default::default()
            },
            WindowParams {
                max_segments: 0,
                ..Default::default()
            },
        ] {
            assert!(slice_document("a b", p).is_err());
        }
    }

    #[test]
    fn stride_longer_than_window_skips_words() {
        let doc: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let p = WindowParams {
            window: 2,
            stride: 4,
            max_segments: 5,
        };
        let s = slice_document(&doc.join(" "), p).unwrap();
        assert_eq!(s.total_segments, 3);
        let texts: Vec<&str> = s.retained().map(|(_, seg)| seg.text.as_str()).collect();
        assert_eq!(texts, ["0 1", "4 5", "8 9"]);
    }

    proptest! {
        #[test]
        fn windows_reconstruct_prefix(n in 0usize..700, window in 1usize..60, stride_frac in 0.05f64..1.0, max in 1usize..8) {
            let stride = ((window as f64 * stride_frac).ceil() as usize).clamp(1, window);
            let p = WindowParams { window, stride, max_segments: max };
            let d = doc(n);
            let words: Vec<&str> = d.split_whitespace().collect();
            let s = slice_document(&d, p).unwrap();
            prop_assert_eq!(s.segments.len(), max);
            let kept: Vec<&Segment> = s.segments.iter().filter(|x| !x.is_padded()).collect();
            // Padding only trails.
            prop_assert!(s.segments[..kept.len()].iter().all(|x| !x.is_padded()));
            let mut rebuilt: Vec<&str> = Vec::new();
            for (j, seg) in kept.iter().enumerate() {
                let seg_words: Vec<&str> = seg.text.split_whitespace().collect();
                prop_assert_eq!(seg.start_word, Some(j * stride));
                prop_assert!(seg_words.len() <= window);
                if j + 1 < kept.len() {
                    rebuilt.extend(&seg_words[..stride]);
                    let next: Vec<&str> = kept[j + 1].text.split_whitespace().collect();
                    if seg_words.len() == window && next.len() == window {
                        prop_assert_eq!(&seg_words[stride..], &next[..window - stride]);
                    }
                } else {
                    rebuilt.extend(&seg_words);
                }
            }
            let covered = rebuilt.len();
            prop_assert_eq!(&rebuilt[..], &words[..covered]);
        }

        #[test]
        fn vote_ignores_query_order(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<(String, String, Vec<f64>)> = (0..30)
                .map(|i| (format!("s{i}"), format!("e{}", i % 4), (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let borrowed: Vec<(&str, &str, Vec<f64>)> = rows.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), c.clone())).collect();
            let s = store(&borrowed);
            let mut q: Vec<Vec<f64>> = (0..7).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let a = identify_episode(&q.iter().map(Vec::as_slice).collect::<Vec<_>>(), &s, None).unwrap();
            q.shuffle(&mut rng);
            let b = identify_episode(&q.iter().map(Vec::as_slice).collect::<Vec<_>>(), &s, None).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
