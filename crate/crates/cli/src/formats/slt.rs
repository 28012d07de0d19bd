//! The `.slt` container for per-pixel distributions.
//!
//! Layout (little endian): magic `SLT1`, u32 height, u32 width, u32
//! classes, u8 level, f32 probabilities row-major [H][W][C], u8 foreground
//! [H][W], u8 ambiguous [H][W].

use std::io::{Read, Write};
use std::path::Path;

use softseg_core::fusion::SoftLabelMap;
use softseg_core::inference::PredictiveMap;
use softseg_core::ontology::Level;

use super::FormatError;

pub const MAGIC: &[u8; 4] = b"SLT1";

fn level_byte(level: Level) -> u8 {
    level.depth() as u8
}

fn level_from_byte(byte: u8, path: &Path) -> Result<Level, FormatError> {
    Level::from_depth(byte as usize)
        .ok_or_else(|| FormatError::parse(path, format!("bad level byte {byte}")))
}

struct RawSlt {
    height: usize,
    width: usize,
    classes: usize,
    level: Level,
    probs: Vec<f64>,
    foreground: Vec<bool>,
    ambiguous: Vec<bool>,
}

fn write_raw(path: &Path, raw: &RawSlt) -> Result<(), FormatError> {
    let mut buffer = Vec::with_capacity(
        16 + raw.probs.len() * 4 + raw.foreground.len() + raw.ambiguous.len(),
    );
    buffer.extend_from_slice(MAGIC);
    buffer.extend_from_slice(&(raw.height as u32).to_le_bytes());
    buffer.extend_from_slice(&(raw.width as u32).to_le_bytes());
    buffer.extend_from_slice(&(raw.classes as u32).to_le_bytes());
    buffer.push(level_byte(raw.level));
    for &p in &raw.probs {
        buffer.extend_from_slice(&(p as f32).to_le_bytes());
    }
    buffer.extend(raw.foreground.iter().map(|&f| f as u8));
    buffer.extend(raw.ambiguous.iter().map(|&a| a as u8));
    let mut file = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    file.write_all(&buffer).map_err(|e| FormatError::io(path, e))
}

fn read_raw(path: &Path) -> Result<RawSlt, FormatError> {
    let mut file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| FormatError::io(path, e))?;
    if data.len() < 17 || &data[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            path: path.display().to_string(),
            expected: "SLT1",
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
    let height = u32_at(4);
    let width = u32_at(8);
    let classes = u32_at(12);
    let level = level_from_byte(data[16], path)?;
    let pixels = height * width;
    let expected = 17 + pixels * classes * 4 + 2 * pixels;
    if data.len() != expected {
        return Err(FormatError::Truncated {
            path: path.display().to_string(),
        });
    }
    let mut probs = Vec::with_capacity(pixels * classes);
    let mut off = 17;
    for _ in 0..pixels * classes {
        probs.push(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64);
        off += 4;
    }
    let foreground = data[off..off + pixels].iter().map(|&b| b != 0).collect();
    off += pixels;
    let ambiguous = data[off..off + pixels].iter().map(|&b| b != 0).collect();
    Ok(RawSlt {
        height,
        width,
        classes,
        level,
        probs,
        foreground,
        ambiguous,
    })
}

pub fn save_soft_labels(path: &Path, map: &SoftLabelMap) -> Result<(), FormatError> {
    write_raw(
        path,
        &RawSlt {
            height: map.height,
            width: map.width,
            classes: map.classes,
            level: map.level,
            probs: map.probs.clone(),
            foreground: map.foreground.clone(),
            ambiguous: map.ambiguous.clone(),
        },
    )
}

/// Loads soft labels. The container does not carry the annotator count, so
/// `annotator_count`/`vote_denominator` come back as 0/1; statistics that
/// need vote quantization must rebuild labels from manifests instead.
pub fn load_soft_labels(path: &Path) -> Result<SoftLabelMap, FormatError> {
    let raw = read_raw(path)?;
    Ok(SoftLabelMap {
        height: raw.height,
        width: raw.width,
        classes: raw.classes,
        level: raw.level,
        annotator_count: 0,
        vote_denominator: 1,
        probs: raw.probs,
        foreground: raw.foreground,
        ambiguous: raw.ambiguous,
    })
}

pub fn save_prediction(path: &Path, map: &PredictiveMap) -> Result<(), FormatError> {
    let pixels = map.height * map.width;
    let foreground = map
        .foreground
        .clone()
        .unwrap_or_else(|| vec![true; pixels]);
    write_raw(
        path,
        &RawSlt {
            height: map.height,
            width: map.width,
            classes: map.classes,
            level: map.level,
            probs: map.probs.clone(),
            foreground,
            ambiguous: vec![false; pixels],
        },
    )
}

pub fn load_prediction(path: &Path) -> Result<PredictiveMap, FormatError> {
    let raw = read_raw(path)?;
    Ok(PredictiveMap {
        height: raw.height,
        width: raw.width,
        classes: raw.classes,
        level: raw.level,
        probs: raw.probs,
        foreground: Some(raw.foreground),
    })
}
