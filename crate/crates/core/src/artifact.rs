//! Artifact masks from real/fake pairs, artifact-existing concept selection,
//! and random-box augmentation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fict::{ConceptId, ConceptKind, ConceptTree};
use crate::mask::{BBox, BitMask, MaskError};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

pub const DEFAULT_PARENTS: [&str; 4] = ["whole_facial_image", "foreground", "region_around_head", "region_around_face"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArtifactError {
    #[error("real image is {0}x{1} but fake is {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("expected 3-channel images, got {0} and {1} channels")]
    ChannelMismatch(u8, u8),
    #[error("fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error("default parent {0} is not a parent concept of the tree")]
    UnknownDefaultParent(ConceptId),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Aligned real and manipulated RGB images.
#[derive(Debug, Clone)]
pub struct ImagePair {
    real: RgbImage,
    fake: RgbImage,
}

impl ImagePair {
    pub fn new(real: RgbImage, fake: RgbImage) -> Result<Self, ArtifactError> {
        if real.dimensions() != fake.dimensions() {
            let ((a, b), (c, d)) = (real.dimensions(), fake.dimensions());
            return Err(ArtifactError::DimensionMismatch(a, b, c, d));
        }
        Ok(ImagePair { real, fake })
    }

    /// Accepts only 3-channel inputs; alpha or grayscale images are rejected.
    pub fn from_dynamic(real: DynamicImage, fake: DynamicImage) -> Result<Self, ArtifactError> {
        let (a, b) = (real.color().channel_count(), fake.color().channel_count());
        if a != 3 || b != 3 {
            return Err(ArtifactError::ChannelMismatch(a, b));
        }
        Self::new(real.to_rgb8(), fake.to_rgb8())
    }

    pub fn real(&self) -> &RgbImage {
        &self.real
    }

    pub fn fake(&self) -> &RgbImage {
        &self.fake
    }

    pub fn width(&self) -> usize {
        self.real.width() as usize
    }

    pub fn height(&self) -> usize {
        self.real.height() as usize
    }
}

/// Single-channel real-valued raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T: Scalar> {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub data: Vec<T>,
}

impl<T: Scalar> GrayImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "data length must be width * height");
        GrayImage { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrayMode {
    /// Mean of the absolute channel differences.
    #[default]
    Mean,
    /// 0.299 R + 0.587 G + 0.114 B of the absolute differences.
    Luma,
}

/// Per-pixel absolute RGB difference reduced to one channel.
pub fn diff_grayscale<T: Scalar>(pair: &ImagePair, mode: GrayMode) -> GrayImage<T> {
    let weights = match mode {
        GrayMode::Mean => [T::one() / T::lit(3.0); 3],
        GrayMode::Luma => [T::lit(0.299), T::lit(0.587), T::lit(0.114)],
    };
    let data = pair
        .real
        .pixels()
        .zip(pair.fake.pixels())
        .map(|(a, b)| {
            let d = [0, 1, 2].map(|c| a[c].abs_diff(b[c]) as usize);
            match mode {
                GrayMode::Mean => T::from_usize_lossy(d[0] + d[1] + d[2]) / T::lit(3.0),
                GrayMode::Luma => (0..3).map(|c| weights[c] * T::from_usize_lossy(d[c])).sum(),
            }
        })
        .collect();
    GrayImage::new(pair.width(), pair.height(), data)
}

/// `ceil(fraction * n)` clamped to `[1, n]`, ignoring float noise around
/// exact integers.
pub fn top_k_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let k = if (x - x.round()).abs() <= 1e-9 * x.max(1.0) { x.round() } else { x.ceil() };
    (k as usize).clamp(1, n)
}

/// Marks every pixel whose value is at least the k-th largest value, with
/// `k = ceil(fraction * W * H)`. Ties at the threshold are all included.
pub fn threshold_top_fraction<T: Scalar>(gray: &GrayImage<T>, fraction: f64) -> Result<BitMask, ArtifactError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ArtifactError::InvalidFraction(fraction));
    }
    let n = gray.data.len();
    let k = top_k_count(fraction, n);
    let mut values = gray.data.clone();
    let desc = |a: &T, b: &T| b.partial_cmp(a).unwrap_or(Ordering::Equal);
    let (_, &mut t, _) = values.select_nth_unstable_by(k - 1, desc);
    Ok(BitMask::from_fn(gray.width, gray.height, |x, y| gray.get(x, y) >= t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptArtifactStats {
    pub concept: ConceptId,
    pub kind: ConceptKind,
    pub region_area: u64,
    pub artifact_pixels: u64,
    /// `artifact_pixels / region_area`, or 0 for an empty region.
    pub coverage_ratio: f64,
    /// 1-based; absent for empty regions, which are never eligible.
    pub rank: Option<u32>,
    pub selected: bool,
    pub selected_by_default: bool,
}

impl ConceptArtifactStats {
    pub fn eligible(&self) -> bool {
        self.region_area > 0
    }
}

/// Region mask intersected with the whole-image artifact mask, per concept.
pub fn regional_artifact_masks(
    regions: &BTreeMap<ConceptId, BitMask>,
    whole: &BitMask,
) -> Result<BTreeMap<ConceptId, BitMask>, ArtifactError> {
    regions.iter().map(|(id, m)| Ok((id.clone(), m.intersect(whole)?))).collect()
}

/// Area, artifact pixel count and coverage ratio of every region, in manifest order.
pub fn coverage_stats(
    tree: &ConceptTree,
    regions: &BTreeMap<ConceptId, BitMask>,
    whole: &BitMask,
) -> Result<Vec<ConceptArtifactStats>, ArtifactError> {
    let mut out = Vec::with_capacity(regions.len());
    for node in tree.nodes() {
        let Some(region) = regions.get(&node.id) else { continue };
        let region_area = region.count_ones();
        let artifact_pixels = region.intersection_count(whole)?;
        out.push(ConceptArtifactStats {
            concept: node.id.clone(),
            kind: node.kind,
            region_area,
            artifact_pixels,
            coverage_ratio: if region_area > 0 { artifact_pixels as f64 / region_area as f64 } else { 0.0 },
            rank: None,
            selected: false,
            selected_by_default: false,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPool {
    /// Atomic and parent concepts share one ranking.
    #[default]
    Pooled,
    /// Atomic and parent concepts are ranked separately.
    PerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    pub max_rank: u32,
    pub min_coverage: f64,
    pub min_pixels: u64,
    pub top_fraction: f64,
    pub default_parents: Vec<ConceptId>,
    pub rank_pool: RankPool,
}

impl Default for SelectionParams {
    fn default() -> Self {
        SelectionParams {
            max_rank: 50,
            min_coverage: 0.10,
            min_pixels: 50,
            top_fraction: 0.05,
            default_parents: DEFAULT_PARENTS.iter().map(|s| ConceptId::new(*s)).collect(),
            rank_pool: RankPool::Pooled,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<(), ArtifactError> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(ArtifactError::InvalidFraction(self.top_fraction));
        }
        if self.max_rank < 1 {
            return Err(ArtifactError::InvalidParams("max_rank must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            return Err(ArtifactError::InvalidParams(format!("min_coverage {} outside [0, 1]", self.min_coverage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub atomic: BTreeSet<ConceptId>,
    pub parent: BTreeSet<ConceptId>,
    pub stats: Vec<ConceptArtifactStats>,
}

/// Ranks concepts by coverage (descending, ties by slug) and keeps those with
/// `rank <= X`, `coverage >= Y` and `artifact_pixels >= Z`; the default parents
/// are then added regardless.
pub fn select_artifact_concepts(
    stats: &[ConceptArtifactStats],
    params: &SelectionParams,
    tree: &ConceptTree,
) -> Result<Selection, ArtifactError> {
    params.validate()?;
    for p in &params.default_parents {
        if tree.node(p).is_none_or(|n| n.kind != ConceptKind::Parent) {
            return Err(ArtifactError::UnknownDefaultParent(p.clone()));
        }
    }
    let mut out: Vec<ConceptArtifactStats> = stats
        .iter()
        .cloned()
        .map(|mut s| {
            s.rank = None;
            s.selected = false;
            s.selected_by_default = false;
            s
        })
        .collect();
    let pools: Vec<Option<ConceptKind>> = match params.rank_pool {
        RankPool::Pooled => vec![None],
        RankPool::PerKind => vec![Some(ConceptKind::Atomic), Some(ConceptKind::Parent)],
    };
    for pool in pools {
        let mut idx: Vec<usize> = (0..out.len())
            .filter(|&i| out[i].eligible() && pool.is_none_or(|k| out[i].kind == k))
            .collect();
        idx.sort_by(|&a, &b| {
            out[b]
                .coverage_ratio
                .partial_cmp(&out[a].coverage_ratio)
                .unwrap_or(Ordering::Equal)
                .then_with(|| out[a].concept.cmp(&out[b].concept))
        });
        for (r, &i) in idx.iter().enumerate() {
            out[i].rank = Some(r as u32 + 1);
        }
    }
    for s in &mut out {
        s.selected = s.rank.is_some_and(|r| r <= params.max_rank)
            && s.coverage_ratio >= params.min_coverage
            && s.artifact_pixels >= params.min_pixels;
    }
    for p in &params.default_parents {
        if let Some(s) = out.iter_mut().find(|s| &s.concept == p) {
            if !s.selected {
                s.selected = true;
                s.selected_by_default = true;
            }
        }
    }
    let mut atomic = BTreeSet::new();
    let mut parent: BTreeSet<ConceptId> = params.default_parents.iter().cloned().collect();
    for s in out.iter().filter(|s| s.selected) {
        match s.kind {
            ConceptKind::Atomic => atomic.insert(s.concept.clone()),
            ConceptKind::Parent => parent.insert(s.concept.clone()),
        };
    }
    out.sort_by_key(|s| tree.nodes().iter().position(|n| n.id == s.concept).unwrap_or(usize::MAX));
    Ok(Selection { atomic, parent, stats: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoxParams {
    pub n: usize,
    pub min_side_frac: f64,
    pub encompass_frac: f64,
    pub min_concepts: usize,
}

impl Default for BoxParams {
    fn default() -> Self {
        BoxParams { n: 20, min_side_frac: 0.10, encompass_frac: 0.5, min_concepts: 3 }
    }
}

/// Draws a half-open interval `[a, b)` of length at least `min_len` inside
/// `[0, extent)`, uniformly over all such intervals.
fn uniform_interval(rng: &mut SplitMix64, extent: usize, min_len: usize) -> (u32, u32) {
    // Lengths min_len..=extent have extent - len + 1 placements each.
    let m = (extent - min_len + 1) as u64;
    let mut r = rng.below(m * (m + 1) / 2);
    for len in min_len..=extent {
        let placements = (extent - len + 1) as u64;
        if r < placements {
            return (r as u32, (r as usize + len) as u32);
        }
        r -= placements;
    }
    unreachable!("r is below the placement total")
}

/// `n` random boxes from a SplitMix64 stream seeded with `seed`. Each axis is
/// sampled uniformly over intervals whose length is at least
/// `ceil(min_side_frac * extent)`.
pub fn generate_candidate_boxes(seed: u64, n: usize, width: usize, height: usize, min_side_frac: f64) -> Vec<BBox> {
    assert!(min_side_frac > 0.0 && min_side_frac < 1.0, "min_side_frac must be in (0, 1)");
    let mut rng = SplitMix64::new(seed);
    let min_w = top_k_count(min_side_frac, width);
    let min_h = top_k_count(min_side_frac, height);
    (0..n)
        .map(|_| {
            let (x0, x1) = uniform_interval(&mut rng, width, min_w);
            let (y0, y1) = uniform_interval(&mut rng, height, min_h);
            BBox { x0, y0, x1, y1 }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedBox {
    pub bbox: BBox,
    pub concepts: Vec<ConceptId>,
}

/// True when at least `frac` of the non-empty mask lies inside `b`.
pub fn encompasses(mask: &BitMask, b: &BBox, frac: f64) -> bool {
    let total = mask.count_ones();
    total > 0 && mask.count_in_box(b) as f64 >= frac * total as f64
}

/// Keeps boxes that encompass at least `min_concepts` of the given regional
/// artifact masks, listing the encompassed concepts in id order.
pub fn retain_boxes(
    boxes: &[BBox],
    artifact_masks: &BTreeMap<ConceptId, BitMask>,
    min_concepts: usize,
    encompass_frac: f64,
) -> Vec<RetainedBox> {
    boxes
        .iter()
        .filter_map(|b| {
            let concepts: Vec<ConceptId> = artifact_masks
                .iter()
                .filter(|(_, m)| encompasses(m, b, encompass_frac))
                .map(|(id, _)| id.clone())
                .collect();
            (concepts.len() >= min_concepts).then_some(RetainedBox { bbox: *b, concepts })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fict::load_manifest;
    use image::Rgb;

    fn pair(w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> ImagePair {
        let real = RgbImage::from_pixel(w, h, Rgb([100, 100, 100]));
        let fake = RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y)));
        ImagePair::new(real, fake).unwrap()
    }

    #[test]
    fn diff_cases() {
        let same = pair(4, 3, |_, _| [100, 100, 100]);
        assert!(diff_grayscale::<f64>(&same, GrayMode::Mean).data.iter().all(|&v| v == 0.0));
        let one = pair(4, 3, |x, y| if (x, y) == (2, 1) { [130, 100, 100] } else { [100, 100, 100] });
        let g = diff_grayscale::<f64>(&one, GrayMode::Mean);
        assert_eq!(g.get(2, 1), 10.0);
        assert_eq!(g.data.iter().filter(|&&v| v != 0.0).count(), 1);
        let l = diff_grayscale::<f32>(&one, GrayMode::Luma);
        assert!((l.get(2, 1) - 0.299 * 30.0).abs() < 1e-4);
    }

    #[test]
    fn pair_shape_errors() {
        let a = RgbImage::new(3, 3);
        let b = RgbImage::new(3, 4);
        assert_eq!(ImagePair::new(a.clone(), b).unwrap_err(), ArtifactError::DimensionMismatch(3, 3, 3, 4));
        let rgba = DynamicImage::ImageRgba8(image::RgbaImage::new(3, 3));
        assert_eq!(
            ImagePair::from_dynamic(DynamicImage::ImageRgb8(a), rgba).unwrap_err(),
            ArtifactError::ChannelMismatch(3, 4)
        );
    }

    #[test]
    fn threshold_distinct_and_constant() {
        let g = GrayImage::new(10, 10, (0..100).map(|v| v as f64).collect());
        let m = threshold_top_fraction(&g, 0.05).unwrap();
        assert_eq!(m.count_ones(), 5);
        assert!(m.iter().zip(&g.data).all(|(b, &v)| b == (v >= 95.0)));
        let c = GrayImage::new(10, 10, vec![3.0f32; 100]);
        assert_eq!(threshold_top_fraction(&c, 0.05).unwrap().count_ones(), 100);
        assert!(threshold_top_fraction(&c, 0.0).is_err());
        assert!(threshold_top_fraction(&c, 1.5).is_err());
    }

    #[test]
    fn k_count_is_ceiling() {
        assert_eq!(top_k_count(0.05, 100), 5);
        assert_eq!(top_k_count(0.05, 101), 6);
        assert_eq!(top_k_count(0.05, 16384), 820);
        assert_eq!(top_k_count(0.05, 1), 1);
        for n in 1..5000 {
            assert_eq!(top_k_count(0.05, n), n.div_ceil(20), "n={n}");
        }
    }

    fn toy_tree() -> ConceptTree {
        load_manifest(
            r#"{"root":"whole_facial_image","nodes":[
            {"id":"whole_facial_image","name":"whole facial image","level":1,"kind":"parent","children":["a","b","c"]},
            {"id":"a","name":"a","level":2,"kind":"atomic","children":[],"geometry_rule":"a"},
            {"id":"b","name":"b","level":2,"kind":"atomic","children":[],"geometry_rule":"b"},
            {"id":"c","name":"c","level":2,"kind":"atomic","children":[],"geometry_rule":"c"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn coverage_cases() {
        let tree = toy_tree();
        let mut regions = BTreeMap::new();
        regions.insert(ConceptId::new("a"), BitMask::from_fn(20, 20, |x, y| x < 10 && y < 10));
        regions.insert(ConceptId::new("b"), BitMask::zeros(20, 20));
        let whole = BitMask::from_fn(20, 20, |x, y| x < 10 && y == 0);
        let stats = coverage_stats(&tree, &regions, &whole).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!((stats[0].region_area, stats[0].artifact_pixels, stats[0].coverage_ratio), (100, 10, 0.10));
        assert_eq!((stats[1].region_area, stats[1].coverage_ratio), (0, 0.0));
        assert!(!stats[1].eligible());
    }

    fn stat(id: &str, kind: ConceptKind, area: u64, px: u64) -> ConceptArtifactStats {
        ConceptArtifactStats {
            concept: ConceptId::new(id),
            kind,
            region_area: area,
            artifact_pixels: px,
            coverage_ratio: if area > 0 { px as f64 / area as f64 } else { 0.0 },
            rank: None,
            selected: false,
            selected_by_default: false,
        }
    }

    #[test]
    fn selection_rules() {
        let tree = toy_tree();
        let params = SelectionParams { default_parents: vec![ConceptId::new("whole_facial_image")], ..Default::default() };
        let stats = vec![
            stat("whole_facial_image", ConceptKind::Parent, 10_000, 500),
            stat("a", ConceptKind::Atomic, 400, 200),
            stat("b", ConceptKind::Atomic, 1000, 90),
            stat("c", ConceptKind::Atomic, 0, 0),
        ];
        let sel = select_artifact_concepts(&stats, &params, &tree).unwrap();
        assert_eq!(sel.atomic, [ConceptId::new("a")].into_iter().collect());
        assert!(sel.parent.contains(&ConceptId::new("whole_facial_image")));
        let by_id = |id: &str| sel.stats.iter().find(|s| s.concept.as_str() == id).unwrap();
        assert_eq!(by_id("a").rank, Some(1));
        assert!(!by_id("b").selected);
        assert_eq!(by_id("c").rank, None);
        assert!(by_id("whole_facial_image").selected_by_default);

        let bad = SelectionParams { default_parents: vec![ConceptId::new("a")], ..Default::default() };
        assert_eq!(
            select_artifact_concepts(&stats, &bad, &tree).unwrap_err(),
            ArtifactError::UnknownDefaultParent(ConceptId::new("a"))
        );
    }

    #[test]
    fn ties_break_by_slug() {
        let tree = toy_tree();
        let params = SelectionParams { max_rank: 1, default_parents: vec![], ..Default::default() };
        let stats = vec![stat("c", ConceptKind::Atomic, 100, 50), stat("b", ConceptKind::Atomic, 100, 50)];
        let sel = select_artifact_concepts(&stats, &params, &tree).unwrap();
        assert_eq!(sel.atomic, [ConceptId::new("b")].into_iter().collect());
    }

    #[test]
    fn boxes_are_deterministic_and_large_enough() {
        let a = generate_candidate_boxes(9, 20, 100, 80, 0.1);
        assert_eq!(a, generate_candidate_boxes(9, 20, 100, 80, 0.1));
        assert_eq!(a.len(), 20);
        assert_ne!(a, generate_candidate_boxes(10, 20, 100, 80, 0.1));
        for b in generate_candidate_boxes(1, 10_000, 100, 100, 0.1) {
            assert!(b.fits(100, 100));
            assert!(b.width() >= 10 && b.height() >= 10);
        }
    }

    #[test]
    fn interval_sampling_is_uniform_over_placements() {
        // extent 4, min 3: placements [0,3) [1,4) [0,4) are equally likely.
        let mut rng = SplitMix64::new(3);
        let mut counts = BTreeMap::new();
        for _ in 0..30_000 {
            *counts.entry(uniform_interval(&mut rng, 4, 3)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 3);
        assert!(counts.values().all(|&c| (9_000..11_000).contains(&c)), "{counts:?}");
    }

    #[test]
    fn retention_cases() {
        let mut masks = BTreeMap::new();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            masks.insert(ConceptId::new(*id), BitMask::from_fn(30, 30, |x, y| y == i * 5 && x < 10));
        }
        let full = BBox { x0: 0, y0: 0, x1: 30, y1: 30 };
        let far = BBox { x0: 20, y0: 20, x1: 30, y1: 30 };
        let kept = retain_boxes(&[full, far], &masks, 3, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].concepts.len(), 3);
        // Exactly half inside counts as encompassed.
        let half = BBox { x0: 0, y0: 0, x1: 5, y1: 30 };
        assert_eq!(retain_boxes(&[half], &masks, 3, 0.5).len(), 1);
        let less = BBox { x0: 0, y0: 0, x1: 4, y1: 30 };
        assert!(retain_boxes(&[less], &masks, 3, 0.5).is_empty());
    }
}
