//! Facial concept tree: a manifest-driven hierarchy of atomic (leaf) and
//! parent (internal) facial region concepts.
//!
//! Atomic concepts carry a geometry rule id that the region module evaluates
//! against landmarks and a parsing map; parent concepts have no rule and
//! resolve to the union of their atomic descendants. Child order is manifest
//! order and is significant everywhere downstream.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shipped default manifest.
pub const DEFAULT_MANIFEST: &str = include_str!("../assets/concept_tree.json");

/// Display name required on the root of a facial concept tree.
pub const ROOT_DISPLAY_NAME: &str = "whole facial image";

pub const MIN_LEVEL: u8 = 1;
pub const MAX_LEVEL: u8 = 8;

/// Stable lowercase slug identifying a concept, e.g. `left_earring`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(String);

impl std::borrow::Borrow<str> for ConceptId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl ConceptId {
    /// Wraps an existing slug without validation.
    pub fn new(slug: impl Into<String>) -> Self {
        ConceptId(slug.into())
    }

    /// Lowercases and replaces every run of non-alphanumerics with `_`.
    pub fn from_display_name(name: &str) -> Self {
        let mut out = String::with_capacity(name.len());
        let mut pending_sep = false;
        for ch in name.chars().flat_map(char::to_lowercase) {
            if ch.is_ascii_alphanumeric() {
                if pending_sep && !out.is_empty() {
                    out.push('_');
                }
                pending_sep = false;
                out.push(ch);
            } else {
                pending_sep = true;
            }
        }
        ConceptId(out)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_valid_slug(&self) -> bool {
        !self.0.is_empty()
            && self
                .0
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConceptId {
    fn from(s: &str) -> Self {
        ConceptId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Atomic,
    Parent,
}

/// One node as written in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: ConceptId,
    pub name: String,
    pub level: u8,
    pub kind: ConceptKind,
    #[serde(default)]
    pub children: Vec<ConceptId>,
    #[serde(default)]
    pub geometry_rule: Option<String>,
    /// Free-form provenance note (`table`, `reconstructed`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl ConceptNode {
    pub fn is_atomic(&self) -> bool {
        self.kind == ConceptKind::Atomic
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    root: ConceptId,
    nodes: Vec<ConceptNode>,
}

/// A single violated tree invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    InvalidSlug { id: ConceptId },
    DuplicateId { id: ConceptId },
    UnknownRoot { id: ConceptId },
    UnknownChild { parent: ConceptId, child: ConceptId },
    CycleDetected { id: ConceptId },
    LevelOutOfRange { id: ConceptId, level: u8 },
    LevelViolation { parent: ConceptId, child: ConceptId, parent_level: u8, child_level: u8 },
    KindMismatch { id: ConceptId },
    MissingGeometryRule { id: ConceptId },
    UnexpectedGeometryRule { id: ConceptId },
    MultipleParents { id: ConceptId },
    Unreachable { id: ConceptId },
    RootNameMismatch { found: String },
    AtomicCountMismatch { expected: usize, found: usize },
    ParentCountMismatch { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidSlug { id } => write!(f, "invalid concept slug `{id}`"),
            Violation::DuplicateId { id } => write!(f, "duplicate concept id `{id}`"),
            Violation::UnknownRoot { id } => write!(f, "root `{id}` is not a node"),
            Violation::UnknownChild { parent, child } => {
                write!(f, "`{parent}` lists unknown child `{child}`")
            }
            Violation::CycleDetected { id } => write!(f, "cycle through `{id}`"),
            Violation::LevelOutOfRange { id, level } => {
                write!(f, "`{id}` has level {level} outside {MIN_LEVEL}..={MAX_LEVEL}")
            }
            Violation::LevelViolation { parent, child, parent_level, child_level } => write!(
                f,
                "child `{child}` (level {child_level}) of `{parent}` (level {parent_level}) must sit one level deeper"
            ),
            Violation::KindMismatch { id } => {
                write!(f, "`{id}`: atomic concepts have no children and parents have at least one")
            }
            Violation::MissingGeometryRule { id } => write!(f, "atomic `{id}` has no geometry rule"),
            Violation::UnexpectedGeometryRule { id } => {
                write!(f, "parent `{id}` must not carry a geometry rule")
            }
            Violation::MultipleParents { id } => write!(f, "`{id}` has more than one parent"),
            Violation::Unreachable { id } => write!(f, "`{id}` is not reachable from the root"),
            Violation::RootNameMismatch { found } => {
                write!(f, "root is named `{found}`, expected `{ROOT_DISPLAY_NAME}`")
            }
            Violation::AtomicCountMismatch { expected, found } => {
                write!(f, "expected {expected} atomic concepts, found {found}")
            }
            Violation::ParentCountMismatch { expected, found } => {
                write!(f, "expected {expected} parent concepts, found {found}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum FictError {
    #[error("manifest is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid concept tree: {0}")]
    Invalid(Violation),
    #[error("unknown concept `{0}`")]
    UnknownConcept(ConceptId),
}

/// An immutable facial concept tree.
#[derive(Debug, Clone)]
pub struct ConceptTree {
    root: ConceptId,
    nodes: Vec<ConceptNode>,
    index: HashMap<ConceptId, usize>,
    parent_of: HashMap<ConceptId, ConceptId>,
}

impl ConceptTree {
    /// Builds a tree without checking any invariant. Use [`validate_tree`] to
    /// inspect the result.
    pub fn from_nodes_unchecked(root: ConceptId, nodes: Vec<ConceptNode>) -> Self {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            index.entry(n.id.clone()).or_insert(i);
        }
        let mut parent_of = HashMap::new();
        for n in &nodes {
            for c in &n.children {
                parent_of.entry(c.clone()).or_insert_with(|| n.id.clone());
            }
        }
        ConceptTree { root, nodes, index, parent_of }
    }

    /// The shipped default tree.
    pub fn default_tree() -> Self {
        load_manifest(DEFAULT_MANIFEST).expect("shipped manifest is valid")
    }

    pub fn root(&self) -> &ConceptId {
        &self.root
    }

    pub fn root_node(&self) -> &ConceptNode {
        self.node(&self.root).expect("root exists")
    }

    pub fn node(&self, id: &ConceptId) -> Option<&ConceptNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn get(&self, id: &ConceptId) -> Result<&ConceptNode, FictError> {
        self.node(id).ok_or_else(|| FictError::UnknownConcept(id.clone()))
    }

    pub fn contains(&self, id: &ConceptId) -> bool {
        self.index.contains_key(id)
    }

    /// Nodes in manifest order.
    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn atomic_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_atomic()).count()
    }

    pub fn parent_count(&self) -> usize {
        self.nodes.len() - self.atomic_count()
    }

    pub fn parent_of(&self, id: &ConceptId) -> Option<&ConceptId> {
        self.parent_of.get(id)
    }

    pub fn display_name(&self, id: &ConceptId) -> Option<&str> {
        self.node(id).map(|n| n.name.as_str())
    }

    /// Atomic leaves below `id` in depth-first, manifest order. An atomic id
    /// yields itself.
    pub fn atomic_descendants(&self, id: &ConceptId) -> Result<Vec<ConceptId>, FictError> {
        let mut out = Vec::new();
        let mut stack = vec![self.get(id)?];
        while let Some(node) = stack.pop() {
            if node.is_atomic() {
                out.push(node.id.clone());
            } else {
                for c in node.children.iter().rev() {
                    stack.push(self.get(c)?);
                }
            }
        }
        Ok(out)
    }

    /// Children before parents; used for memoized bottom-up evaluation.
    pub fn post_order(&self) -> Vec<ConceptId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<(&ConceptId, bool)> = vec![(&self.root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                out.push(id.clone());
                continue;
            }
            stack.push((id, true));
            if let Some(n) = self.node(id) {
                for c in n.children.iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }

    /// Finds a concept by its display name after [`normalize_name`].
    pub fn find_by_name(&self, name: &str) -> Option<&ConceptNode> {
        let wanted = normalize_name(name);
        self.nodes.iter().find(|n| normalize_name(&n.name) == wanted)
    }

    pub fn to_manifest(&self) -> String {
        let m = Manifest { root: self.root.clone(), nodes: self.nodes.clone() };
        serde_json::to_string_pretty(&m).expect("manifest serializes")
    }
}

/// Lowercase, strip punctuation, collapse whitespace.
pub fn normalize_name(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses and validates a manifest. Count and root-name expectations are not
/// enforced here; see [`validate_tree`].
pub fn load_manifest(manifest_text: &str) -> Result<ConceptTree, FictError> {
    let manifest: Manifest = serde_json::from_str(manifest_text)?;
    let tree = ConceptTree::from_nodes_unchecked(manifest.root, manifest.nodes);
    let mut report = structural_violations(&tree);
    report.sort_by_key(load_priority);
    match report.into_iter().next() {
        Some(v) => Err(FictError::Invalid(v)),
        None => Ok(tree),
    }
}

// Cycles are reported ahead of the level violations they also cause.
fn load_priority(v: &Violation) -> u8 {
    match v {
        Violation::InvalidSlug { .. } | Violation::DuplicateId { .. } => 0,
        Violation::UnknownRoot { .. } | Violation::UnknownChild { .. } => 1,
        Violation::CycleDetected { .. } => 2,
        _ => 3,
    }
}

pub fn serialize_manifest(tree: &ConceptTree) -> String {
    tree.to_manifest()
}

/// Reports every violated invariant, including the root display name and the
/// optional expected atomic/parent counts.
pub fn validate_tree(
    tree: &ConceptTree,
    expected_atomic: Option<usize>,
    expected_parent: Option<usize>,
) -> ValidationReport {
    let mut violations = structural_violations(tree);
    if let Some(root) = tree.node(&tree.root) {
        if root.name != ROOT_DISPLAY_NAME {
            violations.push(Violation::RootNameMismatch { found: root.name.clone() });
        }
    }
    if let Some(expected) = expected_atomic {
        let found = tree.atomic_count();
        if found != expected {
            violations.push(Violation::AtomicCountMismatch { expected, found });
        }
    }
    if let Some(expected) = expected_parent {
        let found = tree.parent_count();
        if found != expected {
            violations.push(Violation::ParentCountMismatch { expected, found });
        }
    }
    ValidationReport { violations }
}

fn structural_violations(tree: &ConceptTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for n in &tree.nodes {
        if !n.id.is_valid_slug() {
            out.push(Violation::InvalidSlug { id: n.id.clone() });
        }
        if !seen.insert(&n.id) {
            out.push(Violation::DuplicateId { id: n.id.clone() });
        }
    }
    if !tree.contains(&tree.root) {
        out.push(Violation::UnknownRoot { id: tree.root.clone() });
    }

    let mut child_refs: HashMap<&ConceptId, usize> = HashMap::new();
    for n in &tree.nodes {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&n.level) {
            out.push(Violation::LevelOutOfRange { id: n.id.clone(), level: n.level });
        }
        let atomic = n.is_atomic();
        if atomic != n.children.is_empty() {
            out.push(Violation::KindMismatch { id: n.id.clone() });
        }
        match (atomic, &n.geometry_rule) {
            (true, None) => out.push(Violation::MissingGeometryRule { id: n.id.clone() }),
            (false, Some(_)) => out.push(Violation::UnexpectedGeometryRule { id: n.id.clone() }),
            _ => {}
        }
        for c in &n.children {
            *child_refs.entry(c).or_default() += 1;
            match tree.node(c) {
                None => out.push(Violation::UnknownChild { parent: n.id.clone(), child: c.clone() }),
                Some(child) if child.level != n.level.wrapping_add(1) => {
                    out.push(Violation::LevelViolation {
                        parent: n.id.clone(),
                        child: c.clone(),
                        parent_level: n.level,
                        child_level: child.level,
                    })
                }
                Some(_) => {}
            }
        }
    }
    for (id, count) in &child_refs {
        if *count > 1 && tree.contains(id) {
            out.push(Violation::MultipleParents { id: (*id).clone() });
        }
    }

    // Cycle detection over the whole graph (three-colour DFS), then reachability.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut marks = vec![Mark::White; tree.nodes.len()];
    let mut cycles = HashSet::new();
    for start in 0..tree.nodes.len() {
        if marks[start] != Mark::White {
            continue;
        }
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        marks[start] = Mark::Grey;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let children = &tree.nodes[node].children;
            if *next < children.len() {
                let c = &children[*next];
                *next += 1;
                if let Some(&ci) = tree.index.get(c) {
                    match marks[ci] {
                        Mark::White => {
                            marks[ci] = Mark::Grey;
                            stack.push((ci, 0));
                        }
                        Mark::Grey => {
                            if cycles.insert(ci) {
                                out.push(Violation::CycleDetected { id: c.clone() });
                            }
                        }
                        Mark::Black => {}
                    }
                }
            } else {
                marks[node] = Mark::Black;
                stack.pop();
            }
        }
    }
    if let Some(&root) = tree.index.get(&tree.root) {
        let mut reached = vec![false; tree.nodes.len()];
        let mut stack = vec![root];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut reached[i], true) {
                continue;
            }
            for c in &tree.nodes[i].children {
                if let Some(&ci) = tree.index.get(c) {
                    stack.push(ci);
                }
            }
        }
        for (i, n) in tree.nodes.iter().enumerate() {
            if !reached[i] && tree.index.get(&n.id) == Some(&i) {
                out.push(Violation::Unreachable { id: n.id.clone() });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, level: u8, children: &[&str]) -> ConceptNode {
        let atomic = children.is_empty();
        ConceptNode {
            id: id.into(),
            name: id.replace('_', " "),
            level,
            kind: if atomic { ConceptKind::Atomic } else { ConceptKind::Parent },
            children: children.iter().map(|c| ConceptId::from(*c)).collect(),
            geometry_rule: atomic.then(|| id.to_string()),
            source: None,
        }
    }

    fn manifest(root: &str, nodes: Vec<ConceptNode>) -> String {
        serde_json::to_string(&Manifest { root: root.into(), nodes }).unwrap()
    }

    #[test]
    fn minimal_tree_loads() {
        let text = manifest(
            "root",
            vec![node("root", 1, &["fg"]), node("fg", 2, &["neck"]), node("neck", 3, &[])],
        );
        let tree = load_manifest(&text).unwrap();
        assert_eq!(tree.atomic_count(), 1);
        assert_eq!(tree.parent_count(), 2);
        assert_eq!(tree.atomic_descendants(&"neck".into()).unwrap(), vec![ConceptId::from("neck")]);
    }

    #[test]
    fn default_manifest_counts() {
        let tree = ConceptTree::default_tree();
        assert_eq!(tree.atomic_count(), 112);
        assert_eq!(tree.parent_count(), 72);
        assert!(validate_tree(&tree, Some(112), Some(72)).is_valid());
        let all = tree.atomic_descendants(tree.root()).unwrap();
        assert_eq!(all.len(), 112);
        let earrings = tree.atomic_descendants(&"earrings".into()).unwrap();
        assert_eq!(earrings, vec![ConceptId::from("left_earring"), ConceptId::from("right_earring")]);
        assert_eq!(tree.root_node().name, ROOT_DISPLAY_NAME);
    }

    #[test]
    fn default_manifest_reaches_level_eight() {
        let tree = ConceptTree::default_tree();
        assert_eq!(tree.nodes().iter().map(|n| n.level).max(), Some(8));
        for name in ["foreground", "region around head", "region around face"] {
            assert!(tree.find_by_name(name).is_some(), "{name}");
        }
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let text = manifest("root", vec![node("root", 1, &["root"])]);
        assert!(matches!(
            load_manifest(&text),
            Err(FictError::Invalid(Violation::CycleDetected { .. }))
        ));
    }

    #[test]
    fn load_rejects_each_structural_error() {
        let dup = manifest("r", vec![node("r", 1, &["a"]), node("a", 2, &[]), node("a", 2, &[])]);
        assert!(matches!(load_manifest(&dup), Err(FictError::Invalid(Violation::DuplicateId { .. }))));

        let unknown = manifest("r", vec![node("r", 1, &["zz"])]);
        assert!(matches!(
            load_manifest(&unknown),
            Err(FictError::Invalid(Violation::UnknownChild { .. }))
        ));

        let mut no_rule = node("a", 2, &[]);
        no_rule.geometry_rule = None;
        let text = manifest("r", vec![node("r", 1, &["a"]), no_rule]);
        assert!(matches!(
            load_manifest(&text),
            Err(FictError::Invalid(Violation::MissingGeometryRule { .. }))
        ));

        let level = manifest("r", vec![node("r", 1, &["a"]), node("a", 1, &[])]);
        assert!(matches!(
            load_manifest(&level),
            Err(FictError::Invalid(Violation::LevelViolation { .. }))
        ));
    }

    #[test]
    fn validate_reports_level_and_root_name() {
        let tree = ConceptTree::from_nodes_unchecked(
            "r".into(),
            vec![node("r", 2, &["a"]), node("a", 2, &[])],
        );
        let report = validate_tree(&tree, None, None);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::LevelViolation { .. })));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::RootNameMismatch { .. })));
    }

    #[test]
    fn count_mismatch_is_reported_not_fatal() {
        let tree = ConceptTree::default_tree();
        let report = validate_tree(&tree, Some(10), Some(72));
        assert_eq!(
            report.violations,
            vec![Violation::AtomicCountMismatch { expected: 10, found: 112 }]
        );
    }

    #[test]
    fn parent_descendants_concatenate_children() {
        let tree = ConceptTree::default_tree();
        for n in tree.nodes().iter().filter(|n| !n.is_atomic()) {
            let direct = tree.atomic_descendants(&n.id).unwrap();
            let concat: Vec<_> = n
                .children
                .iter()
                .flat_map(|c| tree.atomic_descendants(c).unwrap())
                .collect();
            assert_eq!(direct, concat, "{}", n.id);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let tree = ConceptTree::default_tree();
        let again = load_manifest(&serialize_manifest(&tree)).unwrap();
        assert_eq!(tree.nodes(), again.nodes());
        assert_eq!(tree.root(), again.root());
    }

    #[test]
    fn slugs_follow_display_names() {
        assert_eq!(ConceptId::from_display_name("Left Earring").as_str(), "left_earring");
        assert_eq!(ConceptId::from_display_name("chin's  edges").as_str(), "chin_s_edges");
        let tree = ConceptTree::default_tree();
        for n in tree.nodes() {
            assert_eq!(ConceptId::from_display_name(&n.name), n.id);
        }
    }

    #[test]
    fn post_order_puts_children_first() {
        let tree = ConceptTree::default_tree();
        let order = tree.post_order();
        assert_eq!(order.len(), tree.len());
        let pos: HashMap<_, _> = order.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        for n in tree.nodes() {
            for c in &n.children {
                assert!(pos[c] < pos[&n.id]);
            }
        }
    }
}
