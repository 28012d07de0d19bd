//! Three-level label hierarchy and probability-conserving upward remapping.
//!
//! Levels are ordered coarse to fine: patterns at the top, explanations in
//! the middle, sub-explanations at the bottom. Class ids are dense per level
//! and id 0 is always the benign class; benign is its own parent at every
//! level, so remapping never moves benign mass anywhere else.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Hierarchy level, ordered coarse (`Pattern`) to fine (`SubExplanation`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Pattern,
    Explanation,
    SubExplanation,
}

impl Level {
    /// Depth below the pattern level: 0, 1, 2.
    pub fn depth(self) -> usize {
        match self {
            Level::Pattern => 0,
            Level::Explanation => 1,
            Level::SubExplanation => 2,
        }
    }

    pub fn from_depth(depth: usize) -> Option<Level> {
        match depth {
            0 => Some(Level::Pattern),
            1 => Some(Level::Explanation),
            2 => Some(Level::SubExplanation),
            _ => None,
        }
    }

    /// The level one step coarser, if any.
    pub fn parent(self) -> Option<Level> {
        match self {
            Level::Pattern => None,
            Level::Explanation => Some(Level::Pattern),
            Level::SubExplanation => Some(Level::Explanation),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Pattern => "pattern",
            Level::Explanation => "explanation",
            Level::SubExplanation => "sub_explanation",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Level {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pattern" | "patterns" => Ok(Level::Pattern),
            "explanation" | "explanations" => Ok(Level::Explanation),
            "sub_explanation" | "sub-explanation" | "sub_explanations" => {
                Ok(Level::SubExplanation)
            }
            other => Err(alloc::format!(
                "unknown level '{other}' (expected pattern | explanation | sub_explanation)"
            )),
        }
    }
}

/// One class in the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OntologyNode {
    /// Class index, dense within the node's level.
    pub id: u32,
    pub name: String,
    pub short_name: String,
    pub level: Level,
    /// Id of the parent class one level up; `None` only for pattern nodes.
    pub parent_id: Option<u32>,
    /// Display color used when rendering overlays.
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OntologyError {
    EmptyLevel { level: Level },
    DuplicateId { level: Level, id: u32 },
    NonDenseIds { level: Level, missing: u32 },
    /// Non-pattern node without a parent, or pattern node with one.
    MissingParent { level: Level, id: u32 },
    PatternWithParent { id: u32 },
    /// Parent id does not exist one level up.
    OrphanNode { level: Level, id: u32, parent_id: u32 },
    /// Benign (id 0) must be the child of benign one level up.
    BenignParentMismatch { level: Level },
    LevelMismatch { from: Level, target: Level },
    DistributionShape { len: usize, classes: usize },
}

impl fmt::Display for OntologyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OntologyError::EmptyLevel { level } => write!(f, "level {level} has no classes"),
            OntologyError::DuplicateId { level, id } => {
                write!(f, "duplicate id {id} at level {level}")
            }
            OntologyError::NonDenseIds { level, missing } => {
                write!(f, "ids at level {level} are not dense: missing id {missing}")
            }
            OntologyError::MissingParent { level, id } => {
                write!(f, "node {id} at level {level} has no parent")
            }
            OntologyError::PatternWithParent { id } => {
                write!(f, "pattern node {id} must not have a parent")
            }
            OntologyError::OrphanNode { level, id, parent_id } => write!(
                f,
                "node {id} at level {level} references missing parent {parent_id} one level up"
            ),
            OntologyError::BenignParentMismatch { level } => {
                write!(f, "benign (id 0) at level {level} must have benign as parent")
            }
            OntologyError::LevelMismatch { from, target } => {
                write!(f, "target level {target} is not a strict ancestor of {from}")
            }
            OntologyError::DistributionShape { len, classes } => {
                write!(f, "distribution length {len} is not a multiple of {classes} classes")
            }
        }
    }
}

impl core::error::Error for OntologyError {}

/// Validated label hierarchy.
#[derive(Debug, Clone)]
pub struct Ontology {
    nodes: Vec<OntologyNode>,
    level_sizes: [usize; 3],
    /// explanation id -> pattern id
    parent_of_explanation: Vec<u32>,
    /// sub-explanation id -> explanation id
    parent_of_sub: Vec<u32>,
}

impl Ontology {
    /// Builds and validates an ontology from its node list.
    pub fn new(nodes: Vec<OntologyNode>) -> Result<Self, OntologyError> {
        let mut level_sizes = [0usize; 3];
        for node in &nodes {
            level_sizes[node.level.depth()] += 1;
        }
        for depth in 0..3 {
            if level_sizes[depth] == 0 {
                return Err(OntologyError::EmptyLevel {
                    level: Level::from_depth(depth).unwrap(),
                });
            }
        }

        // Dense ids per level.
        for depth in 0..3 {
            let level = Level::from_depth(depth).unwrap();
            let size = level_sizes[depth];
            let mut seen = vec![false; size];
            for node in nodes.iter().filter(|n| n.level == level) {
                let id = node.id as usize;
                if id >= size {
                    // Some id out of range means a lower id is missing.
                    let missing = (0..size as u32)
                        .find(|&i| !nodes.iter().any(|n| n.level == level && n.id == i))
                        .unwrap_or(node.id);
                    return Err(OntologyError::NonDenseIds { level, missing });
                }
                if seen[id] {
                    return Err(OntologyError::DuplicateId { level, id: node.id });
                }
                seen[id] = true;
            }
        }

        let mut parent_of_explanation = vec![0u32; level_sizes[1]];
        let mut parent_of_sub = vec![0u32; level_sizes[2]];
        for node in &nodes {
            match node.level {
                Level::Pattern => {
                    if node.parent_id.is_some() {
                        return Err(OntologyError::PatternWithParent { id: node.id });
                    }
                }
                Level::Explanation | Level::SubExplanation => {
                    let parent_id = node.parent_id.ok_or(OntologyError::MissingParent {
                        level: node.level,
                        id: node.id,
                    })?;
                    let parent_size = level_sizes[node.level.depth() - 1];
                    if parent_id as usize >= parent_size {
                        return Err(OntologyError::OrphanNode {
                            level: node.level,
                            id: node.id,
                            parent_id,
                        });
                    }
                    if node.id == 0 && parent_id != 0 {
                        return Err(OntologyError::BenignParentMismatch { level: node.level });
                    }
                    match node.level {
                        Level::Explanation => parent_of_explanation[node.id as usize] = parent_id,
                        Level::SubExplanation => parent_of_sub[node.id as usize] = parent_id,
                        Level::Pattern => unreachable!(),
                    }
                }
            }
        }

        Ok(Ontology {
            nodes,
            level_sizes,
            parent_of_explanation,
            parent_of_sub,
        })
    }

    /// Number of classes at `level`.
    pub fn class_count(&self, level: Level) -> usize {
        self.level_sizes[level.depth()]
    }

    pub fn nodes(&self) -> &[OntologyNode] {
        &self.nodes
    }

    pub fn node(&self, level: Level, id: u32) -> Option<&OntologyNode> {
        self.nodes.iter().find(|n| n.level == level && n.id == id)
    }

    /// Parent class id one level up. `None` for pattern-level input.
    pub fn parent(&self, level: Level, id: u32) -> Option<u32> {
        match level {
            Level::Pattern => None,
            Level::Explanation => self.parent_of_explanation.get(id as usize).copied(),
            Level::SubExplanation => self.parent_of_sub.get(id as usize).copied(),
        }
    }

    /// Ancestor class id of (`from`, `id`) at `target`, which must not be
    /// below `from`.
    pub fn ancestor_at(&self, from: Level, id: u32, target: Level) -> Result<u32, OntologyError> {
        if target.depth() > from.depth() {
            return Err(OntologyError::LevelMismatch { from, target });
        }
        let mut level = from;
        let mut id = id;
        while level != target {
            id = self
                .parent(level, id)
                .ok_or(OntologyError::LevelMismatch { from, target })?;
            level = level.parent().unwrap();
        }
        Ok(id)
    }

    /// Index map sending each class at `from` to its ancestor at `target`.
    ///
    /// `target` must be a strict ancestor level of `from`.
    pub fn remap_table(&self, from: Level, target: Level) -> Result<Vec<u32>, OntologyError> {
        if target.depth() >= from.depth() {
            return Err(OntologyError::LevelMismatch { from, target });
        }
        (0..self.class_count(from) as u32)
            .map(|id| self.ancestor_at(from, id, target))
            .collect()
    }

    /// Sums per-pixel probabilities over children: `out_k = Σ_{φ(i)=k} dist_i`.
    ///
    /// `dist` holds row-major per-pixel distributions over the classes of
    /// `from`; the result holds distributions over the classes of `target`.
    /// Row sums are preserved exactly up to accumulation order.
    pub fn remap_up(
        &self,
        dist: &[f64],
        from: Level,
        target: Level,
    ) -> Result<Vec<f64>, OntologyError> {
        let table = self.remap_table(from, target)?;
        let c_in = self.class_count(from);
        let c_out = self.class_count(target);
        if dist.len() % c_in != 0 {
            return Err(OntologyError::DistributionShape {
                len: dist.len(),
                classes: c_in,
            });
        }
        let rows = dist.len() / c_in;
        let mut out = vec![0.0; rows * c_out];
        for row in 0..rows {
            let src = &dist[row * c_in..(row + 1) * c_in];
            let dst = &mut out[row * c_out..(row + 1) * c_out];
            for (i, &v) in src.iter().enumerate() {
                dst[table[i] as usize] += v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn node(id: u32, level: Level, parent: Option<u32>) -> OntologyNode {
        OntologyNode {
            id,
            name: alloc::format!("{level}-{id}"),
            short_name: id.to_string(),
            level,
            parent_id: parent,
            color: [0, 0, 0],
        }
    }

    /// benign + one malignant branch at every level.
    fn toy() -> Ontology {
        Ontology::new(alloc::vec![
            node(0, Level::Pattern, None),
            node(1, Level::Pattern, None),
            node(0, Level::Explanation, Some(0)),
            node(1, Level::Explanation, Some(1)),
            node(0, Level::SubExplanation, Some(0)),
            node(1, Level::SubExplanation, Some(1)),
        ])
        .unwrap()
    }

    #[test]
    fn toy_ontology_is_valid_identity_like() {
        let ont = toy();
        assert_eq!(ont.class_count(Level::Pattern), 2);
        assert_eq!(
            ont.remap_table(Level::Explanation, Level::Pattern).unwrap(),
            alloc::vec![0, 1]
        );
    }

    #[test]
    fn orphan_parent_is_rejected() {
        let err = Ontology::new(alloc::vec![
            node(0, Level::Pattern, None),
            node(0, Level::Explanation, Some(0)),
            node(1, Level::Explanation, Some(3)),
            node(0, Level::SubExplanation, Some(0)),
        ])
        .unwrap_err();
        assert_eq!(
            err,
            OntologyError::OrphanNode {
                level: Level::Explanation,
                id: 1,
                parent_id: 3
            }
        );
    }

    #[test]
    fn non_dense_ids_are_rejected() {
        let err = Ontology::new(alloc::vec![
            node(0, Level::Pattern, None),
            node(2, Level::Pattern, None),
            node(0, Level::Explanation, Some(0)),
            node(0, Level::SubExplanation, Some(0)),
        ])
        .unwrap_err();
        assert!(matches!(err, OntologyError::NonDenseIds { missing: 1, .. }));
    }

    #[test]
    fn benign_must_nest() {
        let err = Ontology::new(alloc::vec![
            node(0, Level::Pattern, None),
            node(1, Level::Pattern, None),
            node(0, Level::Explanation, Some(1)),
            node(0, Level::SubExplanation, Some(0)),
        ])
        .unwrap_err();
        assert_eq!(
            err,
            OntologyError::BenignParentMismatch {
                level: Level::Explanation
            }
        );
    }

    #[test]
    fn remap_rejects_non_ancestor_target() {
        let ont = toy();
        let err = ont
            .remap_up(&[1.0, 0.0], Level::Pattern, Level::Explanation)
            .unwrap_err();
        assert!(matches!(err, OntologyError::LevelMismatch { .. }));
        let err = ont
            .remap_up(&[1.0, 0.0], Level::Explanation, Level::Explanation)
            .unwrap_err();
        assert!(matches!(err, OntologyError::LevelMismatch { .. }));
    }

    #[test]
    fn one_hot_remaps_to_parent_one_hot() {
        let ont = toy();
        let out = ont
            .remap_up(&[0.0, 1.0], Level::SubExplanation, Level::Pattern)
            .unwrap();
        assert_eq!(out, alloc::vec![0.0, 1.0]);
    }
}
