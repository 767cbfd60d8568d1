//! Region masks for every concept from ingested landmarks and a face-parsing map.
//!
//! Atomic concepts are evaluated from rule expressions; parents are unions of
//! their children. Left and right are image-space: "left" is the viewer's left,
//! i.e. smaller x.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fict::{ConceptId, ConceptNode, ConceptTree, FictError};
use crate::mask::{rasterize_polygon, BitMask, MaskError};
use crate::scalar::Scalar;

pub const DEFAULT_RULES: &str = include_str!("../assets/geometry_rules.json");
pub const DEFAULT_NUM_LANDMARKS: usize = 478;
pub const DEFAULT_NUM_CLASSES: u8 = 19;

/// Face-parsing class names, indexed by label.
pub const CLASS_NAMES: [&str; 19] = [
    "background", "skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear",
    "mouth", "u_lip", "l_lip", "hair", "hat", "ear_r", "neck_l", "neck", "cloth",
];

pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const NOSE: u8 = 2;
    pub const EYEGLASSES: u8 = 3;
    pub const LEFT_EYE: u8 = 4;
    pub const RIGHT_EYE: u8 = 5;
    pub const LEFT_BROW: u8 = 6;
    pub const RIGHT_BROW: u8 = 7;
    pub const LEFT_EAR: u8 = 8;
    pub const RIGHT_EAR: u8 = 9;
    pub const MOUTH: u8 = 10;
    pub const UPPER_LIP: u8 = 11;
    pub const LOWER_LIP: u8 = 12;
    pub const HAIR: u8 = 13;
    pub const HAT: u8 = 14;
    pub const EARRING: u8 = 15;
    pub const NECKLACE: u8 = 16;
    pub const NECK: u8 = 17;
    pub const CLOTH: u8 = 18;
}

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("landmark index {index} out of range for {count} landmarks")]
    BadIndex { index: usize, count: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: u8, num_classes: u8 },
    #[error("no geometry rule for: {}", .0.iter().map(|c| c.as_str()).collect::<Vec<_>>().join(", "))]
    MissingRule(Vec<ConceptId>),
    #[error("rule for {0} depends on itself")]
    RuleCycle(ConceptId),
    #[error("`outside` reference to {0} needs a concept tree")]
    UnresolvedReference(ConceptId),
    #[error("expected {expected} landmarks, found {found}")]
    LandmarkCount { expected: usize, found: usize },
    #[error("landmark {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("parsing map has {found} labels, expected {expected}")]
    LabelCount { expected: usize, found: usize },
    #[error(transparent)]
    Concept(#[from] FictError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Landmark positions in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet<T: Scalar> {
    points: Vec<(T, T)>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkFile {
    points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    normalized: bool,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Vec<(T, T)>, expected_count: usize) -> Result<Self, RegionError> {
        if points.len() != expected_count {
            return Err(RegionError::LandmarkCount { expected: expected_count, found: points.len() });
        }
        if let Some(i) = points.iter().position(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(RegionError::NonFinite(i));
        }
        Ok(LandmarkSet { points })
    }

    /// Converts `[0,1]` coordinates to pixels, rounding half up.
    pub fn from_normalized(points: &[(f64, f64)], width: usize, height: usize, expected_count: usize) -> Result<Self, RegionError> {
        let px = points
            .iter()
            .map(|&(x, y)| (T::lit((x * width as f64 + 0.5).floor()), T::lit((y * height as f64 + 0.5).floor())))
            .collect();
        Self::new(px, expected_count)
    }

    /// Reads `{"points": [[x, y], ...], "normalized": bool?}`.
    pub fn from_json(text: &str, width: usize, height: usize, expected_count: usize) -> Result<Self, RegionError> {
        let file: LandmarkFile = serde_json::from_str(text).map_err(|e| RegionError::Parse(e.to_string()))?;
        let pts: Vec<(f64, f64)> = file.points.iter().map(|p| (p[0], p[1])).collect();
        if file.normalized {
            Self::from_normalized(&pts, width, height, expected_count)
        } else {
            Self::new(pts.into_iter().map(|(x, y)| (T::lit(x), T::lit(y))).collect(), expected_count)
        }
    }

    pub fn to_json(&self) -> String {
        let file = LandmarkFile {
            points: self.points.iter().map(|(x, y)| [x.to_f64_lossy(), y.to_f64_lossy()]).collect(),
            normalized: false,
        };
        serde_json::to_string(&file).expect("landmarks serialize")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(T, T)] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Result<(T, T), RegionError> {
        self.points.get(index).copied().ok_or(RegionError::BadIndex { index, count: self.points.len() })
    }
}

/// Per-pixel face-parsing labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMap {
    width: usize,
    height: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct ParsingGrid {
    num_classes: u8,
    labels: Vec<Vec<u8>>,
}

impl ParsingMap {
    pub fn new(width: usize, height: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self, RegionError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyCanvas(width, height).into());
        }
        if labels.len() != width * height {
            return Err(RegionError::LabelCount { expected: width * height, found: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(RegionError::BadLabel { label, num_classes });
        }
        Ok(ParsingMap { width, height, num_classes, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Result<Self, RegionError> {
        Self::new(width, height, DEFAULT_NUM_CLASSES, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn class_mask(&self, classes: &[u8]) -> Result<BitMask, RegionError> {
        if let Some(&label) = classes.iter().find(|&&l| l >= self.num_classes) {
            return Err(RegionError::BadLabel { label, num_classes: self.num_classes });
        }
        let mut lut = [false; 256];
        classes.iter().for_each(|&c| lut[c as usize] = true);
        Ok(BitMask::from_fn(self.width, self.height, |x, y| lut[self.get(x, y) as usize]))
    }

    /// Single-channel PNG whose pixel values are label indices.
    pub fn from_png_bytes(bytes: &[u8], num_classes: u8) -> Result<Self, RegionError> {
        let img = image::load_from_memory(bytes).map_err(|e| RegionError::Image(e.to_string()))?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, num_classes, img.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RegionError> {
        crate::imageio::encode_gray_png(self.width, self.height, &self.labels).map_err(|e| RegionError::Image(e.to_string()))
    }

    /// JSON grid: `{"num_classes": 19, "labels": [[row 0], [row 1], ...]}`.
    pub fn from_json(text: &str) -> Result<Self, RegionError> {
        let grid: ParsingGrid = serde_json::from_str(text).map_err(|e| RegionError::Parse(e.to_string()))?;
        let height = grid.labels.len();
        let width = grid.labels.first().map_or(0, Vec::len);
        if grid.labels.iter().any(|r| r.len() != width) {
            return Err(RegionError::Parse("ragged label grid".into()));
        }
        Self::new(width, height, grid.num_classes, grid.labels.concat())
    }

    pub fn to_json(&self) -> String {
        let grid = ParsingGrid {
            num_classes: self.num_classes,
            labels: self.labels.chunks(self.width).map(<[u8]>::to_vec).collect(),
        };
        serde_json::to_string(&grid).expect("grid serializes")
    }

    /// Loads by extension: `.png` or JSON.
    pub fn load(path: &Path, num_classes: u8) -> Result<Self, RegionError> {
        let bytes = std::fs::read(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            Self::from_png_bytes(&bytes, num_classes)
        } else {
            Self::from_json(std::str::from_utf8(&bytes).map_err(|e| RegionError::Parse(e.to_string()))?)
        }
    }
}

/// Geometry rule expression.
///
/// Pixel `(x, y)` is tested at its centre `(x + 0.5, y + 0.5)` by the
/// landmark-relative primitives. `band` widths and `edge` radii are fractions
/// of `min(width, height)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleExpr {
    Full,
    /// `x < width / 2`.
    LeftHalf,
    /// `x >= width / 2`.
    RightHalf,
    /// Closed polygon through the listed landmarks.
    Poly(Vec<usize>),
    Class(Vec<u8>),
    /// Centre strictly above landmark `i`.
    Above(usize),
    Below(usize),
    /// Centre strictly left of landmark `i`.
    LeftOf(usize),
    RightOf(usize),
    /// Centres within `width` of the open polyline (a disk for one point).
    Band { points: Vec<usize>, width: f64 },
    /// Pixels whose square neighbourhood of the given radius holds both
    /// in-class and out-of-class pixels.
    Edge { classes: Vec<u8>, radius: f64 },
    /// Complement of another concept's region mask.
    Outside(ConceptId),
    And(Vec<RuleExpr>),
    Or(Vec<RuleExpr>),
    Diff(Box<RuleExpr>, Box<RuleExpr>),
}

impl RuleExpr {
    /// Checks landmark indices and labels against the given limits.
    pub fn validate(&self, num_landmarks: usize, num_classes: u8) -> Result<(), RegionError> {
        let idx = |i: usize| {
            if i < num_landmarks {
                Ok(())
            } else {
                Err(RegionError::BadIndex { index: i, count: num_landmarks })
            }
        };
        let lbl = |l: &u8| {
            if *l < num_classes {
                Ok(())
            } else {
                Err(RegionError::BadLabel { label: *l, num_classes })
            }
        };
        match self {
            RuleExpr::Full | RuleExpr::LeftHalf | RuleExpr::RightHalf | RuleExpr::Outside(_) => Ok(()),
            RuleExpr::Poly(p) | RuleExpr::Band { points: p, .. } => p.iter().try_for_each(|&i| idx(i)),
            RuleExpr::Above(i) | RuleExpr::Below(i) | RuleExpr::LeftOf(i) | RuleExpr::RightOf(i) => idx(*i),
            RuleExpr::Class(c) | RuleExpr::Edge { classes: c, .. } => c.iter().try_for_each(lbl),
            RuleExpr::And(xs) | RuleExpr::Or(xs) => xs.iter().try_for_each(|x| x.validate(num_landmarks, num_classes)),
            RuleExpr::Diff(a, b) => {
                a.validate(num_landmarks, num_classes)?;
                b.validate(num_landmarks, num_classes)
            }
        }
    }

    /// Concepts referenced through `outside`.
    pub fn references(&self) -> Vec<&ConceptId> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a ConceptId>) {
        match self {
            RuleExpr::Outside(c) => out.push(c),
            RuleExpr::And(xs) | RuleExpr::Or(xs) => xs.iter().for_each(|x| x.collect_refs(out)),
            RuleExpr::Diff(a, b) => {
                a.collect_refs(out);
                b.collect_refs(out);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryRule {
    pub expr: RuleExpr,
    /// True for reconstructed rules that only approximate the named region.
    #[serde(default)]
    pub approx: bool,
}

/// Rule file: geometry rules keyed by concept slug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub num_landmarks: usize,
    pub num_classes: u8,
    pub rules: BTreeMap<ConceptId, GeometryRule>,
}

impl RuleSet {
    pub fn parse(text: &str) -> Result<Self, RegionError> {
        let set: RuleSet = serde_json::from_str(text).map_err(|e| RegionError::Parse(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES).expect("shipped rule file is valid")
    }

    pub fn validate(&self) -> Result<(), RegionError> {
        self.rules.values().try_for_each(|r| r.expr.validate(self.num_landmarks, self.num_classes))
    }

    pub fn get(&self, id: &ConceptId) -> Option<&GeometryRule> {
        self.rules.get(id)
    }

    /// Rule named by the node's `geometry_rule`, falling back to its id.
    pub fn rule_for(&self, node: &ConceptNode) -> Option<&GeometryRule> {
        self.rules.get(node.geometry_rule.as_deref().unwrap_or(node.id.as_str()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rules serialize")
    }

    /// Atomic concepts of `tree` without a rule, in manifest order.
    pub fn missing_for(&self, tree: &ConceptTree) -> Vec<ConceptId> {
        tree.nodes()
            .iter()
            .filter(|n| n.is_atomic())
            .filter(|n| self.rule_for(n).is_none())
            .map(|n| n.id.clone())
            .collect()
    }
}

/// Evaluates a rule that does not reference other concepts.
pub fn eval_rule<T: Scalar>(expr: &RuleExpr, lm: &LandmarkSet<T>, pm: &ParsingMap) -> Result<BitMask, RegionError> {
    eval_with(expr, lm, pm, &mut |id: &ConceptId| Err(RegionError::UnresolvedReference(id.clone())))
}

fn eval_with<T: Scalar>(
    expr: &RuleExpr,
    lm: &LandmarkSet<T>,
    pm: &ParsingMap,
    resolve: &mut dyn FnMut(&ConceptId) -> Result<BitMask, RegionError>,
) -> Result<BitMask, RegionError> {
    let (w, h) = (pm.width(), pm.height());
    let half = T::lit(0.5);
    let centre = |v: usize| T::from_usize_lossy(v) + half;
    Ok(match expr {
        RuleExpr::Full => BitMask::ones(w, h),
        RuleExpr::LeftHalf => BitMask::from_fn(w, h, |x, _| 2 * x < w),
        RuleExpr::RightHalf => BitMask::from_fn(w, h, |x, _| 2 * x >= w),
        RuleExpr::Poly(idx) => {
            let pts = idx.iter().map(|&i| lm.point(i)).collect::<Result<Vec<_>, _>>()?;
            rasterize_polygon(&pts, w, h)?
        }
        RuleExpr::Class(c) => pm.class_mask(c)?,
        RuleExpr::Above(i) => {
            let (_, ly) = lm.point(*i)?;
            BitMask::from_fn(w, h, |_, y| centre(y) < ly)
        }
        RuleExpr::Below(i) => {
            let (_, ly) = lm.point(*i)?;
            BitMask::from_fn(w, h, |_, y| centre(y) >= ly)
        }
        RuleExpr::LeftOf(i) => {
            let (lx, _) = lm.point(*i)?;
            BitMask::from_fn(w, h, |x, _| centre(x) < lx)
        }
        RuleExpr::RightOf(i) => {
            let (lx, _) = lm.point(*i)?;
            BitMask::from_fn(w, h, |x, _| centre(x) >= lx)
        }
        RuleExpr::Band { points, width } => {
            let pts = points.iter().map(|&i| lm.point(i)).collect::<Result<Vec<_>, _>>()?;
            band_mask(&pts, T::lit(*width) * T::from_usize_lossy(w.min(h)), w, h)
        }
        RuleExpr::Edge { classes, radius } => {
            let inside = pm.class_mask(classes)?;
            let r = ((*radius * w.min(h) as f64).round() as usize).max(1);
            edge_mask(&inside, r)
        }
        RuleExpr::Outside(id) => resolve(id)?.complement(),
        RuleExpr::And(xs) => fold(xs, lm, pm, resolve, BitMask::ones(w, h), |a, b| a.intersect(b))?,
        RuleExpr::Or(xs) => fold(xs, lm, pm, resolve, BitMask::zeros(w, h), |a, b| a.union(b))?,
        RuleExpr::Diff(a, b) => {
            let a = eval_with(a, lm, pm, resolve)?;
            a.difference(&eval_with(b, lm, pm, resolve)?)?
        }
    })
}

fn fold<T: Scalar>(
    xs: &[RuleExpr],
    lm: &LandmarkSet<T>,
    pm: &ParsingMap,
    resolve: &mut dyn FnMut(&ConceptId) -> Result<BitMask, RegionError>,
    init: BitMask,
    op: impl Fn(&BitMask, &BitMask) -> Result<BitMask, MaskError>,
) -> Result<BitMask, RegionError> {
    let mut acc = init;
    for x in xs {
        acc = op(&acc, &eval_with(x, lm, pm, resolve)?)?;
    }
    Ok(acc)
}

fn band_mask<T: Scalar>(pts: &[(T, T)], radius: T, w: usize, h: usize) -> BitMask {
    let r2 = radius * radius;
    let segs: Vec<((T, T), (T, T))> = if pts.len() == 1 {
        vec![(pts[0], pts[0])]
    } else {
        pts.windows(2).map(|p| (p[0], p[1])).collect()
    };
    let dist2 = |px: T, py: T, (ax, ay): (T, T), (bx, by): (T, T)| {
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > T::zero() {
            (((px - ax) * dx + (py - ay) * dy) / len2).max(T::zero()).min(T::one())
        } else {
            T::zero()
        };
        let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
        qx * qx + qy * qy
    };
    let half = T::lit(0.5);
    BitMask::from_fn(w, h, |x, y| {
        let (px, py) = (T::from_usize_lossy(x) + half, T::from_usize_lossy(y) + half);
        segs.iter().any(|&(a, b)| dist2(px, py, a, b) <= r2)
    })
}

/// Boundary band of `inside`: windows of half-size `r` (clipped to the
/// canvas) that contain both set and unset pixels.
fn edge_mask(inside: &BitMask, r: usize) -> BitMask {
    let (w, h) = (inside.width(), inside.height());
    // Integral image with a zero border row/column.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += inside.get(x, y) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    BitMask::from_fn(w, h, |x, y| {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
        let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
        s > 0 && (s as usize) < (x1 - x0) * (y1 - y0)
    })
}

/// Memoized evaluation of region masks for one image.
pub struct RegionEvaluator<'a, T: Scalar> {
    tree: &'a ConceptTree,
    rules: &'a RuleSet,
    lm: &'a LandmarkSet<T>,
    pm: &'a ParsingMap,
    memo: HashMap<ConceptId, BitMask>,
    active: HashSet<ConceptId>,
}

impl<'a, T: Scalar> RegionEvaluator<'a, T> {
    pub fn new(tree: &'a ConceptTree, rules: &'a RuleSet, lm: &'a LandmarkSet<T>, pm: &'a ParsingMap) -> Self {
        RegionEvaluator { tree, rules, lm, pm, memo: HashMap::new(), active: HashSet::new() }
    }

    pub fn mask(&mut self, id: &ConceptId) -> Result<BitMask, RegionError> {
        if let Some(m) = self.memo.get(id) {
            return Ok(m.clone());
        }
        if !self.active.insert(id.clone()) {
            return Err(RegionError::RuleCycle(id.clone()));
        }
        let result = self.compute(id);
        self.active.remove(id);
        let m = result?;
        self.memo.insert(id.clone(), m.clone());
        Ok(m)
    }

    fn compute(&mut self, id: &ConceptId) -> Result<BitMask, RegionError> {
        let (tree, rules) = (self.tree, self.rules);
        let node = tree.get(id)?;
        if node.is_atomic() {
            let rule = rules.rule_for(node).ok_or_else(|| RegionError::MissingRule(vec![id.clone()]))?;
            let (lm, pm) = (self.lm, self.pm);
            eval_with(&rule.expr, lm, pm, &mut |r| self.mask(r))
        } else {
            let mut acc = BitMask::zeros(self.pm.width(), self.pm.height());
            for child in &node.children {
                acc.union_in_place(&self.mask(child)?)?;
            }
            Ok(acc)
        }
    }

    pub fn into_masks(self) -> HashMap<ConceptId, BitMask> {
        self.memo
    }
}

/// Region mask of one concept. Parents are unions of their atomic leaves.
pub fn region_mask<T: Scalar>(
    tree: &ConceptTree,
    id: &ConceptId,
    rules: &RuleSet,
    lm: &LandmarkSet<T>,
    pm: &ParsingMap,
) -> Result<BitMask, RegionError> {
    RegionEvaluator::new(tree, rules, lm, pm).mask(id)
}

/// Region masks for every concept of the tree.
pub fn all_region_masks<T: Scalar>(
    tree: &ConceptTree,
    rules: &RuleSet,
    lm: &LandmarkSet<T>,
    pm: &ParsingMap,
) -> Result<BTreeMap<ConceptId, BitMask>, RegionError> {
    let missing = rules.missing_for(tree);
    if !missing.is_empty() {
        return Err(RegionError::MissingRule(missing));
    }
    let mut ev = RegionEvaluator::new(tree, rules, lm, pm);
    for id in tree.post_order() {
        ev.mask(&id)?;
    }
    Ok(ev.into_masks().into_iter().collect())
}
