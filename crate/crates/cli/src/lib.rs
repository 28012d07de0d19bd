//! IO, file formats, and pipelines for the softseg toolkit.
//!
//! The algorithms live in `softseg-core`; this crate adds everything that
//! touches the filesystem: the ontology and annotation manifest schemas,
//! the `.slt` soft-label container, `MUN1` checkpoints, PNG handling,
//! report writers, and the batch pipelines behind the `softseg` binary.

pub mod cli;
pub mod formats;
pub mod pipeline;
pub mod png;
pub mod runmeta;
pub mod study;
pub mod synth;

/// Bundled three-level ontology (4/10/32 classes per level).
pub const DEFAULT_ONTOLOGY_JSON: &str = include_str!("../assets/default_ontology.json");
/// Bundled free-text synonym table at the sub-explanation level.
pub const DEFAULT_SYNONYMS_TSV: &str = include_str!("../assets/synonyms.tsv");

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
