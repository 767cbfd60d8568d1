//! Synthetic faces: jittered landmarks, a painted parsing map, and a real/fake
//! RGB pair whose only difference is a known tampered rectangle.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use serde::Deserialize;

use crate::mask::{rasterize_polygon, BBox, BitMask};
use crate::region::{label, LandmarkSet, ParsingMap, DEFAULT_NUM_CLASSES, DEFAULT_NUM_LANDMARKS};
use crate::rng::SplitMix64;

pub const SYNTHETIC_FACE: &str = include_str!("../assets/synthetic_face.json");
pub const DEFAULT_SIZE: usize = 256;

#[derive(Deserialize)]
struct Layout {
    anchors: BTreeMap<usize, [f64; 2]>,
    face_oval: Vec<usize>,
    left_eye: Vec<usize>,
    right_eye: Vec<usize>,
    left_brow: Vec<usize>,
    right_brow: Vec<usize>,
    nose: Vec<usize>,
    upper_lip: Vec<usize>,
    lower_lip: Vec<usize>,
    inner_mouth: Vec<usize>,
}

fn layout() -> Layout {
    serde_json::from_str(SYNTHETIC_FACE).expect("bundled layout parses")
}

#[derive(Debug, Clone)]
pub struct FaceFixture {
    pub seed: u64,
    pub landmarks: LandmarkSet<f64>,
    pub parsing: ParsingMap,
    pub real: RgbImage,
    pub fake: RgbImage,
    /// Rectangle whose pixels differ between `real` and `fake`.
    pub tampered: BBox,
    /// Pixels of `tampered` that received the strong perturbation; exactly
    /// `ceil(0.05 * W * H)` of them, and every other difference is weaker.
    pub core: BitMask,
}

/// Builds a face fixture of the given size. Different seeds move and scale the
/// face, jitter every landmark, and toggle accessories.
pub fn synthetic_face(seed: u64, width: usize, height: usize) -> FaceFixture {
    let lay = layout();
    let mut rng = SplitMix64::new(seed);
    let scale = rng.uniform(0.92, 1.04);
    let (dx, dy) = (rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03));
    let place = |p: [f64; 2]| ((0.5 + (p[0] - 0.5) * scale + dx) * width as f64, (0.5 + (p[1] - 0.5) * scale + dy) * height as f64);
    let centre = place([0.5, 0.5]);
    let mut points = vec![centre; DEFAULT_NUM_LANDMARKS];
    for (&i, &p) in &lay.anchors {
        let (x, y) = place(p);
        points[i] = (x + rng.uniform(-0.004, 0.004) * width as f64, y + rng.uniform(-0.004, 0.004) * height as f64);
    }
    let landmarks = LandmarkSet::new(points, DEFAULT_NUM_LANDMARKS).expect("478 finite points");

    let accessories = Accessories {
        hat: rng.chance(0.3),
        eyeglasses: rng.chance(0.4),
        earrings: rng.chance(0.5),
        necklace: rng.chance(0.3),
    };
    let parsing = paint_parsing(&lay, &landmarks, width, height, scale, (dx, dy), accessories);
    let real = render_real(&parsing, &mut rng);
    let (fake, tampered, core) = tamper(&real, &mut rng);
    FaceFixture { seed, landmarks, parsing, real, fake, tampered, core }
}

#[derive(Debug, Clone, Copy)]
struct Accessories {
    hat: bool,
    eyeglasses: bool,
    earrings: bool,
    necklace: bool,
}

fn paint_parsing(
    lay: &Layout,
    lm: &LandmarkSet<f64>,
    w: usize,
    h: usize,
    scale: f64,
    (dx, dy): (f64, f64),
    acc: Accessories,
) -> ParsingMap {
    let mut labels = vec![label::BACKGROUND; w * h];
    let paint = |labels: &mut Vec<u8>, m: &BitMask, l: u8| {
        for (x, y) in m.iter_ones() {
            labels[y * w + x] = l;
        }
    };
    // Normalised centre of pixel (x, y) in the undistorted layout frame.
    let norm = |x: usize, y: usize| {
        (((x as f64 + 0.5) / w as f64 - 0.5 - dx) / scale + 0.5, ((y as f64 + 0.5) / h as f64 - 0.5 - dy) / scale + 0.5)
    };
    let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| {
        BitMask::from_fn(w, h, |x, y| {
            let (u, v) = norm(x, y);
            ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
        })
    };
    let poly = |idx: &[usize]| {
        let pts: Vec<(f64, f64)> = idx.iter().map(|&i| lm.points()[i]).collect();
        rasterize_polygon(&pts, w, h).expect("layout polygons have 3+ points")
    };

    paint(&mut labels, &BitMask::from_fn(w, h, |x, y| {
        let (u, v) = norm(x, y);
        (0.38..0.62).contains(&u) && v >= 0.74
    }), label::NECK);
    if acc.necklace {
        paint(&mut labels, &BitMask::from_fn(w, h, |x, y| {
            let (u, v) = norm(x, y);
            (0.40..0.60).contains(&u) && (0.90..0.93).contains(&v)
        }), label::NECKLACE);
    }
    paint(&mut labels, &BitMask::from_fn(w, h, |x, y| {
        let (u, v) = norm(x, y);
        v >= 0.95 - 0.3 * (u - 0.5).abs().min(0.3) && (u - 0.5).abs() < 0.48
    }), label::CLOTH);
    let hair = ellipse(0.5, 0.46, 0.36, 0.42);
    let upper = BitMask::from_fn(w, h, |x, y| norm(x, y).1 < 0.62);
    paint(&mut labels, &hair.intersect(&upper).expect("same canvas"), label::HAIR);
    if acc.hat {
        paint(&mut labels, &ellipse(0.5, 0.10, 0.30, 0.09), label::HAT);
    }
    let (l_ear, r_ear) = (lm.points()[234], lm.points()[454]);
    let ear_at = |p: (f64, f64), out: f64| {
        let (u, v) = ((p.0 / w as f64 - 0.5 - dx) / scale + 0.5, (p.1 / h as f64 - 0.5 - dy) / scale + 0.5);
        ellipse(u + out, v, 0.035, 0.065)
    };
    paint(&mut labels, &ear_at(l_ear, -0.015), label::LEFT_EAR);
    paint(&mut labels, &ear_at(r_ear, 0.015), label::RIGHT_EAR);
    paint(&mut labels, &poly(&lay.face_oval), label::SKIN);
    paint(&mut labels, &poly(&lay.left_brow), label::LEFT_BROW);
    paint(&mut labels, &poly(&lay.right_brow), label::RIGHT_BROW);
    paint(&mut labels, &poly(&lay.left_eye), label::LEFT_EYE);
    paint(&mut labels, &poly(&lay.right_eye), label::RIGHT_EYE);
    paint(&mut labels, &poly(&lay.nose), label::NOSE);
    paint(&mut labels, &poly(&lay.upper_lip), label::UPPER_LIP);
    paint(&mut labels, &poly(&lay.lower_lip), label::LOWER_LIP);
    paint(&mut labels, &poly(&lay.inner_mouth), label::MOUTH);
    if acc.eyeglasses {
        let ring = |cx: f64| {
            let outer = ellipse(cx, 0.42, 0.095, 0.065);
            outer.difference(&ellipse(cx, 0.42, 0.080, 0.052)).expect("same canvas")
        };
        let bridge = BitMask::from_fn(w, h, |x, y| {
            let (u, v) = norm(x, y);
            (0.465..0.535).contains(&u) && (0.405..0.42).contains(&v)
        });
        let frame = ring(0.38).union(&ring(0.62)).and_then(|m| m.union(&bridge)).expect("same canvas");
        paint(&mut labels, &frame, label::EYEGLASSES);
    }
    if acc.earrings {
        let stud = |p: (f64, f64), out: f64| {
            let (u, v) = ((p.0 / w as f64 - 0.5 - dx) / scale + 0.5, (p.1 / h as f64 - 0.5 - dy) / scale + 0.5);
            ellipse(u + out, v + 0.075, 0.012, 0.012)
        };
        paint(&mut labels, &stud(l_ear, -0.015), label::EARRING);
        paint(&mut labels, &stud(r_ear, 0.015), label::EARRING);
    }
    ParsingMap::new(w, h, DEFAULT_NUM_CLASSES, labels).expect("painted labels are valid")
}

const CLASS_COLOURS: [[u8; 3]; 19] = [
    [40, 60, 90],
    [224, 172, 138],
    [210, 150, 120],
    [30, 30, 30],
    [240, 240, 235],
    [240, 240, 235],
    [80, 55, 40],
    [80, 55, 40],
    [215, 160, 128],
    [215, 160, 128],
    [120, 30, 40],
    [190, 90, 90],
    [180, 80, 85],
    [60, 40, 25],
    [150, 30, 30],
    [230, 200, 60],
    [200, 200, 210],
    [210, 160, 130],
    [50, 90, 150],
];

fn render_real(pm: &ParsingMap, rng: &mut SplitMix64) -> RgbImage {
    let mut img = RgbImage::new(pm.width() as u32, pm.height() as u32);
    for y in 0..pm.height() {
        for x in 0..pm.width() {
            let c = CLASS_COLOURS[pm.get(x, y) as usize];
            let n = rng.range_inclusive(0, 16) as i16 - 8;
            let px = c.map(|v| (v as i16 + n).clamp(0, 255) as u8);
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Perturbs a lower-face rectangle. The first `ceil(0.05 * W * H)` pixels of
/// the rectangle in row-major order get channel differences of 120..=200, the
/// rest 3..=60, so the top-5% threshold selects exactly the core.
fn tamper(real: &RgbImage, rng: &mut SplitMix64) -> (RgbImage, BBox, BitMask) {
    let (w, h) = (real.width() as usize, real.height() as usize);
    let k = (0.05 * (w * h) as f64).ceil() as usize;
    let bw = (0.32 * w as f64).round() as u32;
    let bh = ((2 * k) as f64 / bw as f64).ceil() as u32;
    let x0 = (w as u32 - bw) / 2 + rng.range_inclusive(0, 4) as u32;
    let y0 = ((0.60 * h as f64) as u32).min(h as u32 - bh) + rng.range_inclusive(0, 4) as u32;
    let b = BBox { x0, y0, x1: (x0 + bw).min(w as u32), y1: (y0 + bh).min(h as u32) };
    let mut fake = real.clone();
    let mut core = BitMask::zeros(w, h);
    let mut n = 0usize;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let strong = n < k;
            n += 1;
            let p = fake.get_pixel_mut(x, y);
            for ch in 0..3 {
                let d = if strong { rng.range_inclusive(120, 200) } else { rng.range_inclusive(3, 60) } as i16;
                let v = p[ch] as i16;
                p[ch] = if v >= 128 { v - d } else { v + d }.clamp(0, 255) as u8;
            }
            if strong {
                core.set(x as usize, y as usize, true);
            }
        }
    }
    (fake, b, core)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synthetic_face(5, 64, 64);
        let b = synthetic_face(5, 64, 64);
        assert_eq!(a.real, b.real);
        assert_eq!(a.fake, b.fake);
        assert_eq!(a.parsing, b.parsing);
        assert_ne!(synthetic_face(6, 64, 64).parsing, a.parsing);
    }

    #[test]
    fn core_has_top_five_percent_size() {
        let f = synthetic_face(1, 128, 128);
        assert_eq!(f.core.count_ones(), (0.05f64 * 128.0 * 128.0).ceil() as u64);
        assert!(f.tampered.fits(128, 128));
        assert!(f.core.is_subset_of(&BitMask::from_box(128, 128, &f.tampered)).unwrap());
    }

    #[test]
    fn parsing_has_face_parts() {
        let f = synthetic_face(2, 256, 256);
        for l in [label::SKIN, label::NOSE, label::LEFT_EYE, label::RIGHT_EYE, label::UPPER_LIP, label::HAIR, label::NECK] {
            assert!(f.parsing.class_mask(&[l]).unwrap().count_ones() > 20, "label {l}");
        }
    }
}
