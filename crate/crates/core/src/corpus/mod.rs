//! Manifest ingestion, the synthetic corpus generator and cached feature preparation.

mod features;
mod manifest;
mod synthetic;

pub use features::{
    load_features, load_speaker_stats, open_features, prepare_features, save_speaker_stats, FeatureConfig, PreparedCorpus,
    PreparedUtterance, SPEAKER_STATS_FILE,
};
pub use manifest::{load_manifest, parse_manifest, save_manifest, write_manifest, Manifest, UtteranceRecord};
pub use synthetic::{
    generate_synthetic_corpus, symbol_duration_ms, symbol_name, synthesize_utterance, ContourFamily, GeneratedCorpus,
    SyntheticCorpusSpec, SyntheticSpeaker, MIN_RANGE_SEPARATION,
};
