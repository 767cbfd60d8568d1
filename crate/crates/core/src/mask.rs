//! Binary raster algebra.
//!
//! [`BitMask`] is the common currency for region masks, artifact masks and
//! predictions: a row-major bit raster where bit `y * width + x` is pixel
//! `(x, y)`. Boxes are half-open pixel rectangles. Masks serialize as
//! row-major run lengths starting with a run of zeros.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions {a_w}x{a_h} and {b_w}x{b_h} differ")]
    DimensionMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("polygon needs at least 3 points, got {0}")]
    DegeneratePolygon(usize),
    #[error("mask dimensions must be at least 1x1, got {0}x{1}")]
    EmptyCanvas(usize, usize),
    #[error("run lengths sum to {found}, expected {expected}")]
    RleSumMismatch { expected: u64, found: u64 },
    #[error("box [{x0},{y0},{x1},{y1}) is empty or outside the {width}x{height} canvas")]
    InvalidBox { x0: u32, y0: u32, x1: u32, y1: u32, width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOp {
    Union,
    Intersect,
    Difference,
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", from = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl BBox {
    /// Checked constructor against a canvas.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32, width: usize, height: usize) -> Result<Self, MaskError> {
        let b = BBox { x0, y0, x1, y1 };
        if b.fits(width, height) {
            Ok(b)
        } else {
            Err(MaskError::InvalidBox { x0, y0, x1, y1, width, height })
        }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 as usize <= width && self.y1 as usize <= height
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x) && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    /// `[x0/w, y0/h, x1/w, y1/h]` rounded to three decimals.
    pub fn normalized(&self, width: usize, height: usize) -> [f64; 4] {
        let r = |v: u32, d: usize| (v as f64 / d as f64 * 1000.0).round() / 1000.0;
        [r(self.x0, width), r(self.y0, height), r(self.x1, width), r(self.y1, height)]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

/// Area and tight bounding box of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub area: u64,
    pub bbox: Option<BBox>,
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: usize,
    height: usize,
    // Padding bits past width*height are always zero.
    words: Vec<u64>,
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitMask({}x{}, area {})", self.width, self.height, self.count_ones())
    }
}

impl BitMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask must be at least 1x1");
        let n = width * height;
        BitMask { width, height, words: vec![0; n.div_ceil(64)] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        let mut m = Self::zeros(width, height);
        m.words.iter_mut().for_each(|w| *w = u64::MAX);
        m.clear_padding();
        m
    }

    pub fn try_zeros(width: usize, height: usize) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::EmptyCanvas(width, height));
        }
        Ok(Self::zeros(width, height))
    }

    /// Builds a mask from a per-pixel predicate `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Row-major booleans; panics when the length is not `width * height`.
    pub fn from_bools(width: usize, height: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), width * height);
        Self::from_fn(width, height, |x, y| bits[y * width + x])
    }

    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        Self::from_fn(width, height, |x, y| b.contains(x, y))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &BitMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_dims(&self, other: &BitMask) -> Result<(), MaskError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(MaskError::DimensionMismatch {
                a_w: self.width,
                a_h: self.height,
                b_w: other.width,
                b_h: other.height,
            })
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        debug_assert!(x < self.width && y < self.height);
        self.get_index(y * self.width + x)
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        debug_assert!(x < self.width && y < self.height);
        let i = y * self.width + x;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Row-major iterator over every pixel value.
    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.get_index(i))
    }

    /// Set pixel coordinates in row-major order.
    pub fn iter_ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = wi * 64 + tz;
                Some((i % w, i / w))
            })
        })
    }

    pub fn union(&self, other: &BitMask) -> Result<BitMask, MaskError> {
        self.zip_words(other, |a, b| a | b)
    }

    pub fn intersect(&self, other: &BitMask) -> Result<BitMask, MaskError> {
        self.zip_words(other, |a, b| a & b)
    }

    pub fn difference(&self, other: &BitMask) -> Result<BitMask, MaskError> {
        self.zip_words(other, |a, b| a & !b)
    }

    pub fn union_in_place(&mut self, other: &BitMask) -> Result<(), MaskError> {
        self.check_dims(other)?;
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a |= b);
        Ok(())
    }

    pub fn intersection_count(&self, other: &BitMask) -> Result<u64, MaskError> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum())
    }

    pub fn union_count(&self, other: &BitMask) -> Result<u64, MaskError> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as u64).sum())
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitMask) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0))
    }

    pub fn complement(&self) -> BitMask {
        let mut m = self.clone();
        m.words.iter_mut().for_each(|w| *w = !*w);
        m.clear_padding();
        m
    }

    /// Number of set pixels inside `b` (clipped to the canvas).
    pub fn count_in_box(&self, b: &BBox) -> u64 {
        let x1 = (b.x1 as usize).min(self.width);
        let y1 = (b.y1 as usize).min(self.height);
        let mut n = 0;
        for y in b.y0 as usize..y1 {
            for x in b.x0 as usize..x1 {
                n += self.get(x, y) as u64;
            }
        }
        n
    }

    pub fn measure(&self) -> Measurement {
        measure(self)
    }

    fn zip_words(&self, other: &BitMask, f: impl Fn(u64, u64) -> u64) -> Result<BitMask, MaskError> {
        self.check_dims(other)?;
        let words = self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect();
        Ok(BitMask { width: self.width, height: self.height, words })
    }

    fn clear_padding(&mut self) {
        let n = self.len();
        let rem = n % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

/// Pixelwise set operation on two same-sized masks.
pub fn set_op(a: &BitMask, b: &BitMask, op: SetOp) -> Result<BitMask, MaskError> {
    match op {
        SetOp::Union => a.union(b),
        SetOp::Intersect => a.intersect(b),
        SetOp::Difference => a.difference(b),
    }
}

/// Popcount plus the tight half-open bounding box (absent for empty masks).
pub fn measure(m: &BitMask) -> Measurement {
    let mut area = 0u64;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for (x, y) in m.iter_ones() {
        area += 1;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    let bbox = (area > 0).then(|| BBox { x0: x0 as u32, y0: y0 as u32, x1: x1 as u32, y1: y1 as u32 });
    Measurement { area, bbox }
}

/// Even-odd fill of a closed polygon sampled at pixel centres.
///
/// Pixel `(i, j)` is set iff `(i + 0.5, j + 0.5)` lies inside. An edge counts
/// as crossing scanline `yc` when `yc` is in the half-open span between its
/// endpoint ordinates, so horizontal edges never cross.
pub fn rasterize_polygon<T: Scalar>(points: &[(T, T)], width: usize, height: usize) -> Result<BitMask, MaskError> {
    if points.len() < 3 {
        return Err(MaskError::DegeneratePolygon(points.len()));
    }
    let mut mask = BitMask::try_zeros(width, height)?;
    let half = T::lit(0.5);
    let mut crossings: Vec<T> = Vec::with_capacity(points.len());
    for j in 0..height {
        let yc = T::from_usize_lossy(j) + half;
        crossings.clear();
        for k in 0..points.len() {
            let (xa, ya) = points[k];
            let (xb, yb) = points[(k + 1) % points.len()];
            if (ya <= yc && yc < yb) || (yb <= yc && yc < ya) {
                crossings.push(xa + (yc - ya) * (xb - xa) / (yb - ya));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite polygon coordinates"));
        // Inside iff an odd number of crossings lie at or left of the centre.
        let mut passed = 0usize;
        for i in 0..width {
            let xc = T::from_usize_lossy(i) + half;
            while passed < crossings.len() && crossings[passed] <= xc {
                passed += 1;
            }
            if passed == crossings.len() {
                break;
            }
            if passed % 2 == 1 {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Row-major run-length encoding; the first run counts zeros.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    pub fn encode(m: &BitMask) -> Self {
        rle_encode(m)
    }

    pub fn decode(&self) -> Result<BitMask, MaskError> {
        rle_decode(self)
    }

    /// Number of set pixels, computed from the runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }
}

pub fn rle_encode(m: &BitMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for bit in m.iter() {
        if bit == current {
            run += 1;
        } else {
            counts.push(run);
            current = bit;
            run = 1;
        }
    }
    counts.push(run);
    RleMask { size: [m.height(), m.width()], counts }
}

pub fn rle_decode(r: &RleMask) -> Result<BitMask, MaskError> {
    let (h, w) = (r.size[0], r.size[1]);
    let expected = (h * w) as u64;
    let found: u64 = r.counts.iter().sum();
    if found != expected {
        return Err(MaskError::RleSumMismatch { expected, found });
    }
    let mut m = BitMask::try_zeros(w, h)?;
    let mut pos = 0usize;
    for (k, &run) in r.counts.iter().enumerate() {
        if k % 2 == 1 {
            for i in pos..pos + run as usize {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        pos += run as usize;
    }
    Ok(m)
}
