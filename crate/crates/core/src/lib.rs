//! Knowledge-based video question answering by reading, observing and
//! recalling: scene description, episode-summary retrieval, per-branch
//! answer scoring and score fusion.

pub mod characters;
pub mod describe;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod ingest;
pub mod places;
pub mod recall;
pub mod scenegraph;
pub mod scoring;
pub mod synth;

pub use characters::{CharacterParams, CharacterSet, FaceGallery, FilterParams, GalleryEntry};
pub use describe::{generate_description, Description};
pub use error::{Error, Result};
pub use eval::{BranchSet, EvalConfig, EvalReport, Pipeline, Resources, SampleRecord};
pub use fusion::{fuse, Fused, FusionEmbeddings, FusionHead, FusionMethod, MWConfig, TrainConfig};
pub use ingest::{BBox, Category, DataRoot, FeatureMatrix, KnowledgeBase, QASample, SceneAnnotations, SubtitleFormat};
pub use places::{PlacePrediction, PlaceVocabulary};
pub use recall::{identify_episode, slice_document, FrameIndexStore, SegmentSet, WindowParams};
pub use scenegraph::SceneGraph;
pub use scoring::{
    backend_from_spec, Branch, BranchHeads, BranchScores, LinearHead, MockBackend, RemoteBackend, ScorerBackend,
};
pub use synth::{SynthConfig, SyntheticCorpus};
