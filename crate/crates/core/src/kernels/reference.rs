//! Straight-line f64 oracles for the kernels, written as explicit loops over
//! nested vectors, plus the fixture suite behind `kernels-selftest`.

use serde::Serialize;

use super::{
    box_encode, pixel_decode, predict_masks, roi_align, two_way_decoder, Attention, Combine, Deconv, KernelDims, LayerNorm,
    Linear, ModelParams, PixelDecoderParams, Tensor, LAYER_NORM_EPS,
};
use crate::mask::BitMask;
use crate::rng::SplitMix64;

pub type Mat = Vec<Vec<f64>>;
pub type Vol = Vec<Vec<Vec<f64>>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.dims2().expect("matrix");
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j]).collect()).collect()
}

pub fn vol(t: &Tensor<f64>) -> Vol {
    let (a, b, c) = t.dims3().expect("rank 3");
    (0..a).map(|i| (0..b).map(|j| (0..c).map(|k| t.data()[(i * b + j) * c + k]).collect()).collect()).collect()
}

fn max_err_mat(a: &Mat, t: &Tensor<f64>) -> f64 {
    let b = mat(t);
    if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.len() != y.len()) {
        return f64::INFINITY;
    }
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_err_vol(a: &Vol, t: &Tensor<f64>) -> f64 {
    let b = vol(t);
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let fa: Vec<f64> = a.iter().flatten().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().flatten().copied().collect();
    if fa.len() != fb.len() {
        return f64::INFINITY;
    }
    fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Bilinear read as a tent-kernel sum over every pixel centre of the map,
/// after clamping the point into the map.
pub fn tent_sample(map: &[Vec<f64>], y: f64, x: f64) -> f64 {
    let h = map.len();
    let w = map[0].len();
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let mut s = 0.0;
    for (py, row) in map.iter().enumerate() {
        let wy = 1.0 - (y - py as f64).abs();
        if wy <= 0.0 {
            continue;
        }
        for (px, v) in row.iter().enumerate() {
            let wx = 1.0 - (x - px as f64).abs();
            if wx > 0.0 {
                s += wy * wx * v;
            }
        }
    }
    s
}

pub fn roi_align_oracle(f: &Vol, bbox: [f64; 4], oh: usize, ow: usize, samples: usize) -> Vol {
    let h = f[0].len() as f64;
    let w = f[0][0].len() as f64;
    let left = bbox[0] * w;
    let top = bbox[1] * h;
    let bw = (bbox[2] - bbox[0]) * w / ow as f64;
    let bh = (bbox[3] - bbox[1]) * h / oh as f64;
    let mut out = vec![vec![vec![0.0; ow]; oh]; f.len()];
    for (c, plane) in f.iter().enumerate() {
        for (i, orow) in out[c].iter_mut().enumerate() {
            for (j, o) in orow.iter_mut().enumerate() {
                let mut pts = Vec::new();
                for a in 0..samples {
                    for b in 0..samples {
                        let cy = top + bh * (i as f64 + (2 * a + 1) as f64 / (2 * samples) as f64);
                        let cx = left + bw * (j as f64 + (2 * b + 1) as f64 / (2 * samples) as f64);
                        pts.push((cy - 0.5, cx - 0.5));
                    }
                }
                *o = pts.iter().map(|&(y, x)| tent_sample(plane, y, x)).sum::<f64>() / pts.len() as f64;
            }
        }
    }
    out
}

fn vec_of(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}

fn linear(x: &[f64], l: &Linear<f64>) -> Vec<f64> {
    let (din, dout) = l.weight.dims2().expect("matrix");
    let mut y = vec_of(&l.bias);
    for (o, yo) in y.iter_mut().enumerate().take(dout) {
        for (i, xi) in x.iter().enumerate().take(din) {
            *yo += xi * l.weight.data()[i * dout + o];
        }
    }
    y
}

fn norm_row(x: &[f64], p: &LayerNorm<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mu: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter().enumerate().map(|(j, v)| (v - mu) / (var + LAYER_NORM_EPS).sqrt() * p.gamma.data()[j] + p.beta.data()[j]).collect()
}

fn attend(q_in: &Mat, kv_in: &Mat, p: &Attention<f64>, heads: usize) -> Mat {
    let q: Mat = q_in.iter().map(|r| linear(r, &p.q)).collect();
    let k: Mat = kv_in.iter().map(|r| linear(r, &p.k)).collect();
    let v: Mat = kv_in.iter().map(|r| linear(r, &p.v)).collect();
    let d = q[0].len();
    let dh = d / heads;
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (qi, qrow) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|krow| (0..dh).map(|e| qrow[h * dh + e] * krow[h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in 0..dh {
                merged[qi][h * dh + e] = ex.iter().zip(&v).map(|(a, vrow)| a / z * vrow[h * dh + e]).sum();
            }
        }
    }
    merged.iter().map(|r| linear(r, &p.o)).collect()
}

fn residual_norm(x: &Mat, delta: &Mat, p: &LayerNorm<f64>) -> Mat {
    x.iter().zip(delta).map(|(a, b)| norm_row(&a.iter().zip(b).map(|(u, v)| u + v).collect::<Vec<_>>(), p)).collect()
}

pub fn decoder_oracle(image: &Mat, queries: &Mat, m: &ModelParams<f64>) -> (Mat, Mat) {
    let heads = m.decoder.heads;
    let mut img = image.clone();
    let mut t = queries.clone();
    for l in &m.decoder.layers {
        t = residual_norm(&t, &attend(&t, &t, &l.self_attn, heads), &l.norm1);
        t = residual_norm(&t, &attend(&t, &img, &l.cross_t2i, heads), &l.norm2);
        let mlp: Mat = t.iter().map(|r| linear(&linear(r, &l.mlp1).iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), &l.mlp2)).collect();
        t = residual_norm(&t, &mlp, &l.norm3);
        img = residual_norm(&img, &attend(&img, &t, &l.cross_i2t, heads), &l.norm4);
    }
    (img, t)
}

/// Transposed convolution by scattering each input value into its 2x2
/// output footprint.
pub fn deconv_oracle(x: &Vol, p: &Deconv<f64>) -> Vol {
    let ws = p.weight.shape();
    let (ci, co) = (ws[0], ws[1]);
    let (h, w) = (x[0].len(), x[0][0].len());
    let mut out: Vol = (0..co).map(|o| vec![vec![p.bias.data()[o]; 2 * w]; 2 * h]).collect();
    for (c, plane) in x.iter().enumerate().take(ci) {
        for (y, row) in plane.iter().enumerate() {
            for (xx, v) in row.iter().enumerate() {
                for (o, oplane) in out.iter_mut().enumerate() {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            oplane[2 * y + ky][2 * xx + kx] += v * p.weight.data()[((c * co + o) * 2 + ky) * 2 + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_oracle(tokens: &Mat, h: usize, w: usize, p: &PixelDecoderParams<f64>) -> Vol {
    let d = tokens[0].len();
    let grid: Vol = (0..d).map(|c| (0..h).map(|y| (0..w).map(|x| tokens[y * w + x][c]).collect()).collect()).collect();
    let mid: Vol = deconv_oracle(&grid, &p.up1).into_iter().map(|pl| pl.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()).collect();
    deconv_oracle(&mid, &p.up2)
}

/// Artifact mask logits for one concept row, composed from the oracles above.
pub fn mask_oracle(image: &Mat, grid: (usize, usize), concept: &[f64], extra: &[f64], m: &ModelParams<f64>) -> Mat {
    let s: Vec<f64> = match m.combine {
        Combine::Add => concept.iter().zip(extra).map(|(a, b)| a + b).collect(),
        Combine::ConcatProject => linear(&[concept, extra].concat(), &m.combine_proj),
    };
    let q = vec![vec_of(&m.queries.mask), s];
    let (img_out, t_out) = decoder_oracle(image, &q, m);
    let p = pixel_oracle(&img_out, grid.0, grid.1, &m.pixel);
    let (ph, pw) = (p[0].len(), p[0][0].len());
    (0..ph).map(|y| (0..pw).map(|x| p.iter().zip(&t_out[0]).map(|(pl, mo)| pl[y][x] * mo).sum()).collect()).collect()
}

pub fn box_oracle(pyramid: &[Vol], bbox: [f64; 4], proj: &Linear<f64>) -> Vec<f64> {
    let mut feat = Vec::new();
    for level in pyramid {
        for plane in roi_align_oracle(level, bbox, 7, 7, 2) {
            feat.push(plane.iter().flatten().sum::<f64>() / 49.0);
        }
    }
    linear(&feat, proj)
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestCase {
    pub name: String,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn case(name: &str, max_err: f64, tolerance: f64) -> SelftestCase {
    SelftestCase { name: name.into(), max_err, tolerance, pass: max_err <= tolerance }
}

fn random_tensor3(rng: &mut SplitMix64, a: usize, b: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn3(a, b, c, |_, _, _| rng.uniform(-1.0, 1.0))
}

fn random_tensor2(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn2(r, c, |_, _| rng.uniform(-1.0, 1.0))
}

/// Tiny fixed-weight model used by the oracle fixtures.
pub fn fixture_model(seed: u64, combine: Combine) -> ModelParams<f64> {
    let dims = KernelDims { dim: 4, heads: 2, layers: 1, mlp_hidden: 6, ..Default::default() };
    let mut m = ModelParams::seeded(&dims, seed).expect("fixture dims are valid");
    m.combine = combine;
    m
}

/// Runs every kernel against its oracle on seeded fixtures.
pub fn selftest(seed: u64) -> Vec<SelftestCase> {
    let mut rng = SplitMix64::for_key(seed, "kernels-selftest");
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let f = random_tensor3(&mut rng, 1, 8, 8);
        let x0 = rng.uniform(0.0, 0.7);
        let y0 = rng.uniform(0.0, 0.7);
        let b = [x0, y0, x0 + rng.uniform(0.05, 1.0 - x0), y0 + rng.uniform(0.05, 1.0 - y0)];
        let got = roi_align(&f, b, 3, 2, 2).expect("valid box");
        worst = worst.max(max_err_vol(&roi_align_oracle(&vol(&f), b, 3, 2, 2), &got));
    }
    out.push(case("roi_align", worst, 1e-6));

    let proj = Linear { weight: random_tensor2(&mut rng, 2 + 3 + 4 + 5, 6), bias: random_tensor2(&mut rng, 1, 6).reshape(&[6]).expect("six") };
    let pyr: Vec<Tensor<f64>> = [(2, 8), (3, 6), (4, 4), (5, 3)].iter().map(|&(c, s)| random_tensor3(&mut rng, c, s, s)).collect();
    let b = [0.1, 0.25, 0.8, 0.9];
    let got = box_encode(&pyr, b, &proj).expect("four levels");
    let want = box_oracle(&pyr.iter().map(vol).collect::<Vec<_>>(), b, &proj);
    out.push(case("box_encode", max_err_mat(&vec![want], &got), 1e-6));

    let mut worst = 0.0f64;
    for combine in [Combine::Add, Combine::ConcatProject] {
        let m = fixture_model(seed ^ 0x5eed, combine);
        let img = random_tensor2(&mut rng, 4, 4);
        let q = random_tensor2(&mut rng, 2, 4);
        let (io, to) = two_way_decoder(&img, &q, &m.decoder).expect("dims match");
        let (wi, wt) = decoder_oracle(&mat(&img), &mat(&q), &m);
        worst = worst.max(max_err_mat(&wi, &io)).max(max_err_mat(&wt, &to));
    }
    out.push(case("two_way_decoder", worst, 1e-6));

    let m = fixture_model(seed ^ 0x91e1, Combine::Add);
    let tokens = random_tensor2(&mut rng, 6, 4);
    let got = pixel_decode(&tokens, 2, 3, &m.pixel).expect("grid matches");
    out.push(case("pixel_decode", max_err_vol(&pixel_oracle(&mat(&tokens), 2, 3, &m.pixel), &got), 1e-6));

    let mut worst = 0.0f64;
    let mut mask_mismatch = 0usize;
    for combine in [Combine::Add, Combine::ConcatProject] {
        let m = fixture_model(seed ^ 0xa11, combine);
        let img = random_tensor2(&mut rng, 4, 4);
        let e = random_tensor2(&mut rng, 3, 4);
        let p = predict_masks(&img, (2, 2), &e, &m, true).expect("dims match");
        for i in 0..3 {
            for (extra, logits, masks) in [(&m.queries.artifact, &p.artifact_logits, &p.artifact), (&m.queries.region, &p.region_logits, &p.region)] {
                let want = mask_oracle(&mat(&img), (2, 2), e.row(i), extra.data(), &m);
                worst = worst.max(max_err_mat(&want, &logits[i]));
                let wm = BitMask::from_fn(want[0].len(), want.len(), |x, y| want[y][x] > 0.0);
                mask_mismatch += usize::from(wm != masks[i]);
            }
        }
    }
    out.push(case("predict_masks", worst, 1e-6));
    out.push(case("predict_masks_binary", mask_mismatch as f64, 0.0));
    out
}
