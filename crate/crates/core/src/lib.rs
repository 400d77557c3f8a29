//! Medication information extraction from clinical notes: corpus handling,
//! word embeddings, term classifiers, relation extractors and scoring.

pub mod corpus;
pub mod embed_eval;
pub mod embeddings;
pub mod files;
pub mod ner;
pub mod metrics;
pub mod numkit;
pub mod pipeline;
pub mod preprocess;
pub mod rel;
pub mod rng;
