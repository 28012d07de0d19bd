//! Versioned JSON schema for ontology files.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use softseg_core::ontology::{Level, Ontology, OntologyNode};

use super::FormatError;

#[derive(Debug, Serialize, Deserialize)]
pub struct OntologyFile {
    pub version: u32,
    pub levels: Vec<LevelSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LevelSpec {
    pub name: String,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u32,
    pub name: String,
    pub short_name: String,
    pub parent_id: Option<u32>,
    pub color: [u8; 3],
}

pub const SUPPORTED_VERSION: u32 = 1;

fn build(file: OntologyFile, path: &Path) -> Result<Ontology, FormatError> {
    if file.version != SUPPORTED_VERSION {
        return Err(FormatError::parse(
            path,
            format!("unsupported version {}, expected {SUPPORTED_VERSION}", file.version),
        ));
    }
    let mut nodes = Vec::new();
    for level_spec in file.levels {
        let level = Level::from_str(&level_spec.name)
            .map_err(|e| FormatError::parse(path, e))?;
        for class in level_spec.classes {
            nodes.push(OntologyNode {
                id: class.id,
                name: class.name,
                short_name: class.short_name,
                level,
                parent_id: class.parent_id,
                color: class.color,
            });
        }
    }
    Ok(Ontology::new(nodes)?)
}

/// Loads and validates an ontology file.
pub fn load_ontology(path: &Path) -> Result<Ontology, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let file: OntologyFile =
        serde_json::from_str(&text).map_err(|e| FormatError::parse(path, e.to_string()))?;
    build(file, path)
}

/// The bundled ontology transcribing the published hierarchy.
pub fn load_default_ontology() -> Ontology {
    let file: OntologyFile =
        serde_json::from_str(crate::DEFAULT_ONTOLOGY_JSON).expect("bundled ontology parses");
    build(file, Path::new("<bundled>")).expect("bundled ontology is valid")
}
