//! Annotation manifest files: one JSON document per image holding every
//! annotator's polygons, plus the synonym table format.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use softseg_core::annotations::{AnnotationSet, PolygonRecord, SynonymTable};
use softseg_core::ontology::{Level, Ontology};

use super::FormatError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub image_id: String,
    /// Image path, relative to the manifest file's directory.
    pub image_path: String,
    /// [height, width]
    pub size: [usize; 2],
    #[serde(default = "default_spacing")]
    pub pixel_spacing: f64,
    /// Level of the polygon label ids; defaults to sub_explanation.
    #[serde(default = "default_level")]
    pub level: String,
    pub annotators: Vec<AnnotatorSpec>,
}

fn default_spacing() -> f64 {
    1.392
}

fn default_level() -> String {
    "sub_explanation".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatorSpec {
    pub annotator_id: String,
    pub polygons: Vec<PolygonSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolygonSpec {
    /// [[x, y], ...] pixel coordinates.
    pub vertices: Vec<[f64; 2]>,
    /// Class ids; may be empty when `raw_label` carries free text or when
    /// the label is to be filled forward.
    #[serde(default)]
    pub labels: Vec<u32>,
    #[serde(default)]
    pub raw_label: Option<String>,
    pub created_seq: u64,
    pub source_grade: u32,
}

/// A manifest parsed into per-annotator [`AnnotationSet`]s.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub image_id: String,
    pub image_path: PathBuf,
    pub image_size: (usize, usize),
    pub pixel_spacing: f64,
    pub level: Level,
    pub sets: Vec<AnnotationSet>,
}

pub fn load_manifest(path: &Path) -> Result<LoadedManifest, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| FormatError::parse(path, e.to_string()))?;
    let level = Level::from_str(&file.level).map_err(|e| FormatError::parse(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let image_size = (file.size[0], file.size[1]);
    let sets = file
        .annotators
        .iter()
        .map(|annotator| AnnotationSet {
            image_id: file.image_id.clone(),
            annotator_id: annotator.annotator_id.clone(),
            level,
            polygons: annotator
                .polygons
                .iter()
                .map(|poly| PolygonRecord {
                    vertices: poly
                        .vertices
                        .iter()
                        .map(|&[x, y]| {
                            (x.clamp(0.0, image_size.1 as f64), y.clamp(0.0, image_size.0 as f64))
                        })
                        .collect(),
                    raw_label: poly.raw_label.clone(),
                    class_ids: poly.labels.clone(),
                    created_seq: poly.created_seq,
                    source_grade: poly.source_grade,
                })
                .collect(),
            image_size,
        })
        .collect();
    Ok(LoadedManifest {
        image_id: file.image_id,
        image_path: base.join(&file.image_path),
        image_size,
        pixel_spacing: file.pixel_spacing,
        level,
        sets,
    })
}

pub fn save_manifest(path: &Path, manifest: &ManifestFile) -> Result<(), FormatError> {
    let text = serde_json::to_string(manifest)
        .map_err(|e| FormatError::parse(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

/// Manifest files of a directory, sorted by file name for determinism.
pub fn manifest_paths(dir: &Path) -> Result<Vec<PathBuf>, FormatError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| FormatError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Parses a synonym table: `raw text<TAB>short name` per line, resolved to
/// class ids through the ontology at the given level.
pub fn parse_synonyms(
    text: &str,
    ontology: &Ontology,
    level: Level,
    origin: &Path,
) -> Result<SynonymTable, FormatError> {
    let mut table = SynonymTable::new(level);
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (raw, short) = line.split_once('\t').ok_or_else(|| {
            FormatError::parse(origin, format!("line {}: expected tab-separated pair", line_no + 1))
        })?;
        let short = short.trim();
        let class = ontology
            .nodes()
            .iter()
            .find(|n| n.level == level && n.short_name == short)
            .ok_or_else(|| {
                FormatError::parse(
                    origin,
                    format!("line {}: no class with short name '{short}'", line_no + 1),
                )
            })?;
        table.insert(raw, class.id);
    }
    Ok(table)
}

pub fn load_synonyms(
    path: Option<&Path>,
    ontology: &Ontology,
    level: Level,
) -> Result<SynonymTable, FormatError> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
            parse_synonyms(&text, ontology, level, path)
        }
        None => parse_synonyms(
            crate::DEFAULT_SYNONYMS_TSV,
            ontology,
            level,
            Path::new("<bundled>"),
        ),
    }
}
