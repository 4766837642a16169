//! Fixtures shared by the benchmarks under `benches/`.

use roll_core::fusion::FusionEmbeddings;
use roll_core::{BranchScores, FusionHead, FusionMethod};

/// A plot summary of `n` distinct words.
pub fn document(n: usize) -> String {
    (0..n).map(|i| format!("word{i}")).collect::<Vec<_>>().join(" ")
}

/// Deterministic scores and embeddings for `n` candidates and 5 segments.
pub fn fusion_inputs(n: usize, dim: usize) -> (BranchScores, FusionEmbeddings) {
    let val = |c: usize, k: usize| ((c * 31 + k * 17) % 23) as f64 / 23.0 - 0.5;
    let vecs = |salt: usize| (0..n).map(|c| (0..dim).map(|k| val(c + salt, k)).collect()).collect();
    let per_segment: Vec<Vec<Option<f64>>> = (0..n)
        .map(|c| (0..5).map(|j| (j < 4).then(|| val(c, j))).collect())
        .collect();
    let recall_emb = (0..n)
        .map(|c| {
            (0..5)
                .map(|j| (j < 4).then(|| (0..dim).map(|k| val(c + j, k)).collect()))
                .collect()
        })
        .collect();
    let scores = BranchScores::from_triple(
        (0..n).map(|c| val(c, 1)).collect(),
        (0..n).map(|c| val(c, 2)).collect(),
        vec![0.0; n],
    )
    .with_recall_segments(per_segment)
    .expect("every candidate has segments");
    let emb = FusionEmbeddings {
        read: Some(vecs(1)),
        observe: Some(vecs(2)),
        recall: Some(recall_emb),
        qa: Some(vecs(3)),
    };
    (scores, emb)
}

/// A fusion head of every method at embedding dimension `dim`.
pub fn heads(dim: usize) -> Vec<FusionHead> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    FusionMethod::ALL
        .iter()
        .map(|m| FusionHead::init(*m, dim, &mut rng))
        .collect()
}
