//! Polygon annotation cleaning and rasterization into per-annotator masks.
//!
//! Raw annotations arrive as per-annotator polygon lists. Cleaning applies
//! three rules, in order: free text is mapped onto ontology classes through
//! a synonym table, polygons without a label inherit the label of the next
//! polygon by creation time, and polygons carrying several classes become
//! linked copies that later split the annotator's vote. Rasterization then
//! paints polygons in ascending source-grade order (creation order within a
//! grade) with an even-odd fill evaluated at pixel centers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::ontology::{Level, Ontology};

/// One annotated polygon as ingested from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonRecord {
    /// (x, y) pixel coordinates.
    pub vertices: Vec<(f64, f64)>,
    /// Free text entered by the annotator, if any.
    pub raw_label: Option<String>,
    /// Class ids; empty before fill-forward, at least one entry afterwards.
    pub class_ids: Vec<u32>,
    /// Polygon creation order, unique per (image, annotator).
    pub created_seq: u64,
    /// Pattern id of the single-grade image the polygon was drawn on.
    pub source_grade: u32,
}

/// All polygons one annotator drew on one image.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    pub image_id: String,
    pub annotator_id: String,
    /// Level the polygon class ids refer to.
    pub level: Level,
    pub polygons: Vec<PolygonRecord>,
    /// (height, width)
    pub image_size: (usize, usize),
}

/// Curated free-text to class-id mapping.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    pub level: Level,
    entries: BTreeMap<String, u32>,
}

impl SynonymTable {
    pub fn new(level: Level) -> Self {
        SynonymTable {
            level,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, raw: &str, id: u32) {
        self.entries.insert(normalize_text(raw), id);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, raw: &str) -> Option<u32> {
        self.entries.get(&normalize_text(raw)).copied()
    }
}

/// Lowercases, trims, and collapses internal whitespace.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() {
            pending_space = true;
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lower in ch.to_lowercase() {
                out.push(lower);
            }
        }
    }
    out
}

/// Maps free text to a class id at the table's level.
///
/// Falls back to ontology names and short names when the synonym table has
/// no entry. `None` marks unmapped text; it must be resolved before
/// rasterization.
pub fn normalize_free_text(raw: &str, ontology: &Ontology, table: &SynonymTable) -> Option<u32> {
    if let Some(id) = table.lookup(raw) {
        return Some(id);
    }
    let needle = normalize_text(raw);
    ontology
        .nodes()
        .iter()
        .find(|n| {
            n.level == table.level
                && (normalize_text(&n.name) == needle || normalize_text(&n.short_name) == needle)
        })
        .map(|n| n.id)
}

/// Result of [`fill_forward_labels`].
#[derive(Debug, Clone)]
pub struct FillForwardOutcome {
    /// Polygons sorted by creation order, all labeled.
    pub polygons: Vec<PolygonRecord>,
    /// Trailing unlabeled polygons that had no successor to inherit from.
    pub dropped: usize,
    /// Number of `created_seq` ties encountered (broken by input index).
    pub seq_ties: usize,
}

/// Assigns unlabeled polygons the labels of the next labeled polygon in
/// creation order; trailing unlabeled polygons are dropped and counted.
pub fn fill_forward_labels(polygons: Vec<PolygonRecord>) -> FillForwardOutcome {
    let mut indexed: Vec<(usize, PolygonRecord)> = polygons.into_iter().enumerate().collect();
    indexed.sort_by_key(|(idx, p)| (p.created_seq, *idx));
    let seq_ties = indexed
        .windows(2)
        .filter(|w| w[0].1.created_seq == w[1].1.created_seq)
        .count();

    let mut polygons: Vec<PolygonRecord> = indexed.into_iter().map(|(_, p)| p).collect();
    let mut next_labels: Option<Vec<u32>> = None;
    let mut dropped = 0;
    for poly in polygons.iter_mut().rev() {
        if poly.class_ids.is_empty() {
            match &next_labels {
                Some(labels) => poly.class_ids = labels.clone(),
                None => dropped += 1,
            }
        } else {
            next_labels = Some(poly.class_ids.clone());
        }
    }
    polygons.retain(|p| !p.class_ids.is_empty());
    FillForwardOutcome {
        polygons,
        dropped,
        seq_ties,
    }
}

/// One single-class copy of a multi-label polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct PolygonCopy {
    /// Index of the source polygon in the input sequence.
    pub polygon_index: usize,
    pub class_id: u32,
    pub created_seq: u64,
    pub source_grade: u32,
    /// Copies of one polygon share a group; their weight is 1/group_size.
    pub group: u32,
    pub group_size: u32,
}

/// Expands polygons with k classes into k group-linked copies.
pub fn duplicate_multilabel(polygons: &[PolygonRecord]) -> Vec<PolygonCopy> {
    let mut out = Vec::new();
    for (idx, poly) in polygons.iter().enumerate() {
        let k = poly.class_ids.len() as u32;
        for &class_id in &poly.class_ids {
            out.push(PolygonCopy {
                polygon_index: idx,
                class_id,
                created_seq: poly.created_seq,
                source_grade: poly.source_grade,
                group: idx as u32,
                group_size: k,
            });
        }
    }
    out
}

/// Per-pixel weighted class assignments for one annotator.
///
/// Each annotated pixel carries a sparse class → weight map summing to 1;
/// unannotated pixels carry nothing. Stored compactly in CSR form.
#[derive(Debug, Clone)]
pub struct AnnotatorMask {
    pub height: usize,
    pub width: usize,
    pub level: Level,
    /// Least common multiple of the vote-split arities present, so every
    /// weight is an integer multiple of 1/weight_denominator.
    pub weight_denominator: u32,
    offsets: Vec<u32>,
    entries: Vec<(u32, f64)>,
}

impl AnnotatorMask {
    /// Weighted classes at flat pixel index `idx` (row-major).
    pub fn pixel(&self, idx: usize) -> &[(u32, f64)] {
        let start = self.offsets[idx] as usize;
        let end = self.offsets[idx + 1] as usize;
        &self.entries[start..end]
    }

    pub fn is_annotated(&self, idx: usize) -> bool {
        self.offsets[idx + 1] > self.offsets[idx]
    }

    pub fn annotated_pixels(&self) -> usize {
        (0..self.height * self.width)
            .filter(|&i| self.is_annotated(i))
            .count()
    }

    /// Builds a mask from a dense per-pixel label map (weight 1 each).
    pub fn from_dense(
        labels: &[Option<u32>],
        height: usize,
        width: usize,
        level: Level,
    ) -> AnnotatorMask {
        assert_eq!(labels.len(), height * width);
        let mut offsets = Vec::with_capacity(height * width + 1);
        let mut entries = Vec::new();
        offsets.push(0u32);
        for label in labels {
            if let Some(class) = label {
                entries.push((*class, 1.0));
            }
            offsets.push(entries.len() as u32);
        }
        AnnotatorMask {
            height,
            width,
            level,
            weight_denominator: 1,
            offsets,
            entries,
        }
    }

    /// Merges per-pixel weights onto ancestor classes at `target`.
    pub fn remap_up(
        &self,
        ontology: &Ontology,
        target: Level,
    ) -> Result<AnnotatorMask, crate::ontology::OntologyError> {
        let table = ontology.remap_table(self.level, target)?;
        let mut offsets = Vec::with_capacity(self.offsets.len());
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(self.entries.len());
        offsets.push(0u32);
        let mut merged: Vec<(u32, f64)> = Vec::new();
        for idx in 0..self.height * self.width {
            merged.clear();
            for &(class, weight) in self.pixel(idx) {
                let parent = table[class as usize];
                match merged.iter_mut().find(|(c, _)| *c == parent) {
                    Some((_, w)) => *w += weight,
                    None => merged.push((parent, weight)),
                }
            }
            merged.sort_unstable_by_key(|&(c, _)| c);
            entries.extend_from_slice(&merged);
            offsets.push(entries.len() as u32);
        }
        Ok(AnnotatorMask {
            height: self.height,
            width: self.width,
            level: target,
            weight_denominator: self.weight_denominator,
            offsets,
            entries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RasterizeError {
    UnlabeledPolygon { created_seq: u64 },
    ClassOutOfRange { class_id: u32, classes: usize },
    EmptyImage,
}

impl fmt::Display for RasterizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RasterizeError::UnlabeledPolygon { created_seq } => {
                write!(f, "polygon created_seq={created_seq} has no labels; run fill-forward first")
            }
            RasterizeError::ClassOutOfRange { class_id, classes } => {
                write!(f, "class id {class_id} out of range for level with {classes} classes")
            }
            RasterizeError::EmptyImage => f.write_str("image size is zero"),
        }
    }
}

impl core::error::Error for RasterizeError {}

/// Rasterization result plus data warnings.
#[derive(Debug, Clone)]
pub struct RasterizeOutcome {
    pub mask: AnnotatorMask,
    /// Polygons whose bounding box lay fully outside the image.
    pub skipped_outside: usize,
    pub seq_ties: usize,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Paints an annotator's polygons into a weighted per-pixel mask.
///
/// Paint order is (source_grade ascending, created_seq ascending); later
/// paint overwrites earlier paint. Copies of a multi-label polygon paint
/// simultaneously, each class receiving weight 1/k. Pixel-in-polygon uses
/// the even-odd rule evaluated at pixel centers (col+0.5, row+0.5).
pub fn rasterize(set: &AnnotationSet, ontology: &Ontology) -> Result<RasterizeOutcome, RasterizeError> {
    let (height, width) = set.image_size;
    if height == 0 || width == 0 {
        return Err(RasterizeError::EmptyImage);
    }
    let classes = ontology.class_count(set.level);
    for poly in &set.polygons {
        if poly.class_ids.is_empty() {
            return Err(RasterizeError::UnlabeledPolygon {
                created_seq: poly.created_seq,
            });
        }
        for &class_id in &poly.class_ids {
            if class_id as usize >= classes {
                return Err(RasterizeError::ClassOutOfRange { class_id, classes });
            }
        }
    }

    let mut order: Vec<usize> = (0..set.polygons.len()).collect();
    order.sort_by_key(|&i| {
        let p = &set.polygons[i];
        (p.source_grade, p.created_seq, i)
    });
    let seq_ties = order
        .windows(2)
        .filter(|w| {
            let a = &set.polygons[w[0]];
            let b = &set.polygons[w[1]];
            a.source_grade == b.source_grade && a.created_seq == b.created_seq
        })
        .count();

    // Per-pixel index of the last paint op covering it; u32::MAX = unpainted.
    let mut paint: Vec<u32> = vec![u32::MAX; height * width];
    let mut skipped_outside = 0;
    for (op, &poly_idx) in order.iter().enumerate() {
        let poly = &set.polygons[poly_idx];
        if fully_outside(&poly.vertices, height, width) {
            skipped_outside += 1;
            continue;
        }
        scanline_cover(&poly.vertices, height, width, |pixel| {
            paint[pixel] = op as u32;
        });
    }

    let mut weight_denominator = 1u64;
    for poly in &set.polygons {
        weight_denominator = lcm(weight_denominator, poly.class_ids.len() as u64);
    }

    let mut offsets = Vec::with_capacity(height * width + 1);
    let mut entries: Vec<(u32, f64)> = Vec::new();
    offsets.push(0u32);
    for &op in &paint {
        if op != u32::MAX {
            let poly = &set.polygons[order[op as usize]];
            let k = poly.class_ids.len() as f64;
            let mut classes: Vec<(u32, f64)> =
                poly.class_ids.iter().map(|&c| (c, 1.0 / k)).collect();
            classes.sort_unstable_by_key(|&(c, _)| c);
            // Duplicated class entries within one polygon merge their weight.
            let mut merged: Vec<(u32, f64)> = Vec::with_capacity(classes.len());
            for (c, w) in classes {
                match merged.last_mut() {
                    Some((lc, lw)) if *lc == c => *lw += w,
                    _ => merged.push((c, w)),
                }
            }
            entries.extend_from_slice(&merged);
        }
        offsets.push(entries.len() as u32);
    }

    Ok(RasterizeOutcome {
        mask: AnnotatorMask {
            height,
            width,
            level: set.level,
            weight_denominator: weight_denominator as u32,
            offsets,
            entries,
        },
        skipped_outside,
        seq_ties,
    })
}

fn fully_outside(vertices: &[(f64, f64)], height: usize, width: usize) -> bool {
    if vertices.is_empty() {
        return true;
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in vertices {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    max_x <= 0.0 || max_y <= 0.0 || min_x >= width as f64 || min_y >= height as f64
}

/// Visits every pixel whose center lies inside the polygon (even-odd rule).
///
/// Vertices are clamped to the image rectangle first, matching the
/// ingestion contract.
pub(crate) fn scanline_cover(
    vertices: &[(f64, f64)],
    height: usize,
    width: usize,
    mut visit: impl FnMut(usize),
) {
    if vertices.len() < 3 {
        return;
    }
    let clamped: Vec<(f64, f64)> = vertices
        .iter()
        .map(|&(x, y)| (x.clamp(0.0, width as f64), y.clamp(0.0, height as f64)))
        .collect();

    let min_y = clamped.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let max_y = clamped.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let row_start = math::ceil(min_y - 0.5).max(0.0) as usize;
    let row_end = (math::floor(max_y - 0.5) as i64).min(height as i64 - 1);
    if row_end < 0 {
        return;
    }

    let mut crossings: Vec<f64> = Vec::new();
    for row in row_start..=(row_end as usize) {
        let yc = row as f64 + 0.5;
        crossings.clear();
        for i in 0..clamped.len() {
            let (x0, y0) = clamped[i];
            let (x1, y1) = clamped[(i + 1) % clamped.len()];
            if y0 == y1 {
                continue;
            }
            // Half-open span [min_y, max_y) so shared vertices count once.
            let crosses = if y0 < y1 {
                y0 <= yc && yc < y1
            } else {
                y1 <= yc && yc < y0
            };
            if crosses {
                crossings.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_unstable_by(|a, b| a.total_cmp(b));
        for pair in crossings.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            // Pixel centers c+0.5 in [xa, xb).
            let c_start = math::ceil(xa - 0.5).max(0.0) as usize;
            let c_end = math::ceil(xb - 0.5) as i64;
            let c_end = c_end.min(width as i64);
            let mut c = c_start as i64;
            while c < c_end {
                visit(row * width + c as usize);
                c += 1;
            }
        }
    }
}
