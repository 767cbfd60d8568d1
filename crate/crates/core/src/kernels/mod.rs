//! Forward-only reference math for the multi-task model: box encoding,
//! sequence splicing, the two-way decoder, the pixel decoder, mask
//! prediction and the training losses. Tiny dimensions, no autodiff.

mod params;
pub mod reference;
mod tensor;

pub use params::{
    load_weights, save_weights, Attention, Combine, Deconv, DecoderLayer, DecoderParams, KernelDims, LayerNorm, Linear,
    ModelParams, PixelDecoderParams, QueryEmbeddings, WeightFile,
};
pub use tensor::Tensor;

use thiserror::Error;

use crate::mask::BitMask;
use crate::Scalar;

pub const IMAGE_TOKEN: &str = "<image>";
pub const BBOX_TOKEN: &str = "<bbox>";
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BOX_POOL: usize = 7;
pub const BOX_SAMPLES: usize = 2;

/// Loss weights for the auxiliary heads, text, BCE and Dice terms.
pub const LOSS_WEIGHTS: LossWeights = LossWeights { aux: 0.2, text: 1.0, bce: 0.5, dice: 2.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("expected 4 pyramid levels, got {0}")]
    WrongLevelCount(usize),
    #[error("placeholder mismatch: {0}")]
    PlaceholderMismatch(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("weights: {0}")]
    Weights(String),
}

/// Validates a normalized `[x0, y0, x1, y1]` box.
pub fn check_box(b: [f64; 4]) -> Result<(), KernelError> {
    let [x0, y0, x1, y1] = b;
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    if !(unit(x0) && unit(y0) && unit(x1) && unit(y1) && x0 < x1 && y0 < y1) {
        return Err(KernelError::DegenerateBox(b));
    }
    Ok(())
}

/// Bilinear read at continuous pixel coordinates where pixel `i` has its
/// centre at `i`; coordinates are clamped to the map.
fn bilinear<T: Scalar>(f: &Tensor<T>, c: usize, y: f64, x: f64) -> T {
    let (_, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (T::lit(y - y0 as f64), T::lit(x - x0 as f64));
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    hy * hx * f.at3(c, y0, x0) + hy * lx * f.at3(c, y0, x1) + ly * hx * f.at3(c, y1, x0) + ly * lx * f.at3(c, y1, x1)
}

/// RoIAlign over a `C x H x W` map. The normalized box is scaled to the map,
/// split into `out_h x out_w` bins and each bin averages a regular
/// `samples x samples` grid of bilinear reads (half-pixel aligned).
pub fn roi_align<T: Scalar>(
    feature: &Tensor<T>,
    bbox: [f64; 4],
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> Result<Tensor<T>, KernelError> {
    check_box(bbox)?;
    let (c, h, w) = feature.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 || samples == 0 {
        return Err(KernelError::DimMismatch("empty map, output or sample grid".into()));
    }
    let [x0, y0, x1, y1] = bbox;
    let (sx, sy) = (x0 * w as f64, y0 * h as f64);
    let bin_w = (x1 - x0) * w as f64 / out_w as f64;
    let bin_h = (y1 - y0) * h as f64 / out_h as f64;
    let inv = T::one() / T::from_usize_lossy(samples * samples);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let data = out.data_mut();
    for ch in 0..c {
        for i in 0..out_h {
            for j in 0..out_w {
                let mut acc = T::zero();
                for a in 0..samples {
                    let y = sy + (i as f64 + (a as f64 + 0.5) / samples as f64) * bin_h - 0.5;
                    for b in 0..samples {
                        let x = sx + (j as f64 + (b as f64 + 0.5) / samples as f64) * bin_w - 0.5;
                        acc = acc + bilinear(feature, ch, y, x);
                    }
                }
                data[(ch * out_h + i) * out_w + j] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Box feature `1 x D_B`: per level RoIAlign to 7x7, spatial mean, concat over
/// levels, then the linear projection.
pub fn box_encode<T: Scalar>(pyramid: &[Tensor<T>], bbox: [f64; 4], proj: &Linear<T>) -> Result<Tensor<T>, KernelError> {
    if pyramid.len() != 4 {
        return Err(KernelError::WrongLevelCount(pyramid.len()));
    }
    let mut pooled = Vec::new();
    for level in pyramid {
        let r = roi_align(level, bbox, BOX_POOL, BOX_POOL, BOX_SAMPLES)?;
        let n = T::from_usize_lossy(BOX_POOL * BOX_POOL);
        for ch in r.data().chunks(BOX_POOL * BOX_POOL) {
            pooled.push(ch.iter().copied().sum::<T>() / n);
        }
    }
    proj.forward(&Tensor::row_vector(&pooled))
}

/// Replaces the single `<image>` token with the image rows and each `<bbox>`
/// token with the next box row. `text` holds one embedding row per token;
/// rows at placeholder positions are ignored.
pub fn splice_sequence<T: Scalar, S: AsRef<str>>(
    tokens: &[S],
    text: &Tensor<T>,
    image: &Tensor<T>,
    boxes: Option<&Tensor<T>>,
) -> Result<Tensor<T>, KernelError> {
    let (lt, d) = text.dims2()?;
    if lt != tokens.len() {
        return Err(KernelError::DimMismatch(format!("{} tokens but {lt} text rows", tokens.len())));
    }
    let (li, di) = image.dims2()?;
    if di != d {
        return Err(KernelError::DimMismatch(format!("image rows are {di} wide, text rows {d}")));
    }
    let n_img = tokens.iter().filter(|t| t.as_ref() == IMAGE_TOKEN).count();
    let n_box = tokens.iter().filter(|t| t.as_ref() == BBOX_TOKEN).count();
    if n_img != 1 {
        return Err(KernelError::PlaceholderMismatch(format!("{n_img} image tokens, expected 1")));
    }
    let box_rows = match boxes {
        Some(b) => {
            let (r, db) = b.dims2()?;
            if db != d {
                return Err(KernelError::DimMismatch(format!("box rows are {db} wide, text rows {d}")));
            }
            r
        }
        None => 0,
    };
    if n_box != box_rows {
        return Err(KernelError::PlaceholderMismatch(format!("{n_box} box tokens for {box_rows} box embeddings")));
    }
    let mut data = Vec::with_capacity((lt - 1 - n_box + li + n_box) * d);
    let mut next_box = 0;
    for (i, t) in tokens.iter().enumerate() {
        match t.as_ref() {
            IMAGE_TOKEN => data.extend_from_slice(image.data()),
            BBOX_TOKEN => {
                data.extend_from_slice(boxes.expect("counted above").row(next_box));
                next_box += 1;
            }
            _ => data.extend_from_slice(text.row(i)),
        }
    }
    let rows = data.len() / d.max(1);
    Tensor::new(vec![rows, d], data)
}

fn layer_norm<T: Scalar>(x: &Tensor<T>, p: &LayerNorm<T>) -> Result<Tensor<T>, KernelError> {
    let (r, c) = x.dims2()?;
    let eps = T::lit(LAYER_NORM_EPS);
    let n = T::from_usize_lossy(c);
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        let s = (var + eps).sqrt();
        for (j, v) in row.iter().enumerate() {
            out.push((*v - mean) / s * p.gamma.data()[j] + p.beta.data()[j]);
        }
    }
    Tensor::new(vec![r, c], out)
}

fn softmax_rows<T: Scalar>(x: &mut Tensor<T>) -> Result<(), KernelError> {
    let (_, c) = x.dims2()?;
    for row in x.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(())
}

/// Multi-head scaled dot-product attention with input and output projections.
pub fn attention<T: Scalar>(q_in: &Tensor<T>, kv_in: &Tensor<T>, p: &Attention<T>, heads: usize) -> Result<Tensor<T>, KernelError> {
    let q = p.q.forward(q_in)?;
    let k = p.k.forward(kv_in)?;
    let v = p.v.forward(kv_in)?;
    let (nq, d) = q.dims2()?;
    let (nk, _) = k.dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(KernelError::DimMismatch(format!("{heads} heads for width {d}")));
    }
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut merged = Tensor::zeros(&[nq, d]);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = Tensor::from_fn2(nq, dh, |i, j| q.at2(i, cols.start + j));
        let kh = Tensor::from_fn2(nk, dh, |i, j| k.at2(i, cols.start + j));
        let vh = Tensor::from_fn2(nk, dh, |i, j| v.at2(i, cols.start + j));
        let mut s = qh.matmul(&kh.transpose()?)?.map(|x| x * scale);
        softmax_rows(&mut s)?;
        let oh = s.matmul(&vh)?;
        let m = merged.data_mut();
        for i in 0..nq {
            for j in 0..dh {
                m[i * d + cols.start + j] = oh.at2(i, j);
            }
        }
    }
    p.o.forward(&merged)
}

/// Two-way decoder. Per layer: queries attend to themselves, queries attend
/// to the image, a ReLU MLP updates the queries, and the image attends to the
/// queries; every step adds a residual and applies layer norm. Positional
/// encodings and a final extra attention are not part of this model.
pub fn two_way_decoder<T: Scalar>(
    image: &Tensor<T>,
    queries: &Tensor<T>,
    params: &DecoderParams<T>,
) -> Result<(Tensor<T>, Tensor<T>), KernelError> {
    let (_, di) = image.dims2()?;
    let (nq, dq) = queries.dims2()?;
    if di != dq || nq == 0 {
        return Err(KernelError::DimMismatch(format!("image width {di}, query width {dq}, {nq} queries")));
    }
    let mut img = image.clone();
    let mut t = queries.clone();
    for l in &params.layers {
        t = layer_norm(&t.add(&attention(&t, &t, &l.self_attn, params.heads)?)?, &l.norm1)?;
        t = layer_norm(&t.add(&attention(&t, &img, &l.cross_t2i, params.heads)?)?, &l.norm2)?;
        let hidden = l.mlp1.forward(&t)?.map(|v| v.max(T::zero()));
        t = layer_norm(&t.add(&l.mlp2.forward(&hidden)?)?, &l.norm3)?;
        img = layer_norm(&img.add(&attention(&img, &t, &l.cross_i2t, params.heads)?)?, &l.norm4)?;
    }
    Ok((img, t))
}

fn deconv2x2<T: Scalar>(x: &Tensor<T>, p: &Deconv<T>) -> Result<Tensor<T>, KernelError> {
    let (ci, h, w) = x.dims3()?;
    let ws = p.weight.shape();
    if ws.len() != 4 || ws[0] != ci || ws[2] != 2 || ws[3] != 2 || p.bias.len() != ws[1] {
        return Err(KernelError::DimMismatch(format!("deconv weight {ws:?} for {ci} input channels")));
    }
    let co = ws[1];
    let wd = p.weight.data();
    let mut out = Tensor::zeros(&[co, 2 * h, 2 * w]);
    let (oh, ow) = (2 * h, 2 * w);
    let od = out.data_mut();
    for o in 0..co {
        let b = p.bias.data()[o];
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let mut acc = b;
                        for c in 0..ci {
                            acc = acc + x.at3(c, y, xx) * wd[((c * co + o) * 2 + dy) * 2 + dx];
                        }
                        od[(o * oh + 2 * y + dy) * ow + 2 * xx + dx] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reshapes image tokens `(h*w) x D` to `D x h x w` and applies two 2x2
/// stride-2 transposed convolutions with a ReLU between them.
pub fn pixel_decode<T: Scalar>(tokens: &Tensor<T>, h: usize, w: usize, p: &PixelDecoderParams<T>) -> Result<Tensor<T>, KernelError> {
    let (n, d) = tokens.dims2()?;
    if h == 0 || w == 0 || n != h * w {
        return Err(KernelError::DimMismatch(format!("{n} image tokens for a {h}x{w} grid")));
    }
    let chw = tokens.transpose()?.reshape(&[d, h, w])?;
    let mid = deconv2x2(&chw, &p.up1)?.map(|v| v.max(T::zero()));
    deconv2x2(&mid, &p.up2)
}

/// Semantic embedding `S` from a concept row and the region or artifact row.
pub fn semantic_embedding<T: Scalar>(concept: &[T], extra: &Tensor<T>, model: &ModelParams<T>) -> Result<Tensor<T>, KernelError> {
    let e = Tensor::row_vector(concept);
    match model.combine {
        Combine::Add => e.add(extra),
        Combine::ConcatProject => {
            let mut joined = concept.to_vec();
            joined.extend_from_slice(extra.data());
            model.combine_proj.forward(&Tensor::row_vector(&joined))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction<T: Scalar> {
    pub artifact_logits: Vec<Tensor<T>>,
    pub artifact: Vec<BitMask>,
    pub region_logits: Vec<Tensor<T>>,
    pub region: Vec<BitMask>,
}

/// One mask per concept row: `T_in = [M; S]`, decode, upsample the image
/// stream and dot each pixel feature with the mask-token output. Positive
/// logits are foreground. With `auxiliary`, the same is done with the region
/// embedding in place of the artifact embedding.
pub fn predict_masks<T: Scalar>(
    image: &Tensor<T>,
    grid: (usize, usize),
    concepts: &Tensor<T>,
    model: &ModelParams<T>,
    auxiliary: bool,
) -> Result<MaskPrediction<T>, KernelError> {
    let (k, d) = concepts.dims2()?;
    if d != model.dims.dim {
        return Err(KernelError::DimMismatch(format!("concept rows are {d} wide, model is {}", model.dims.dim)));
    }
    let mut out = MaskPrediction { artifact_logits: vec![], artifact: vec![], region_logits: vec![], region: vec![] };
    for i in 0..k {
        let (l, m) = mask_for(image, grid, concepts.row(i), &model.queries.artifact, model)?;
        out.artifact_logits.push(l);
        out.artifact.push(m);
        if auxiliary {
            let (l, m) = mask_for(image, grid, concepts.row(i), &model.queries.region, model)?;
            out.region_logits.push(l);
            out.region.push(m);
        }
    }
    Ok(out)
}

fn mask_for<T: Scalar>(
    image: &Tensor<T>,
    (h, w): (usize, usize),
    concept: &[T],
    extra: &Tensor<T>,
    model: &ModelParams<T>,
) -> Result<(Tensor<T>, BitMask), KernelError> {
    let s = semantic_embedding(concept, extra, model)?;
    let t_in = Tensor::vstack(&[&model.queries.mask, &s])?;
    let (img_out, t_out) = two_way_decoder(image, &t_in, &model.decoder)?;
    let p = pixel_decode(&img_out, h, w, &model.pixel)?;
    let (d, ph, pw) = p.dims3()?;
    let m_out = t_out.row(0);
    let logits = Tensor::from_fn2(ph, pw, |y, x| (0..d).map(|c| p.at3(c, y, x) * m_out[c]).sum());
    let mask = BitMask::from_fn(pw, ph, |x, y| logits.at2(y, x) > T::zero());
    Ok((logits, mask))
}

/// Number of `[SEG]` tokens, i.e. how many masks the answer asks for.
pub fn seg_count(text: &str) -> usize {
    text.matches(crate::explain::SEG_TOKEN).count()
}

/// Two-layer ReLU MLP head on a single query output row.
pub fn head_logits<T: Scalar>(t_out: &Tensor<T>, head: &[Linear<T>; 2]) -> Result<Tensor<T>, KernelError> {
    let hidden = head[0].forward(t_out)?.map(|v| v.max(T::zero()));
    head[1].forward(&hidden)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub aux: f64,
    pub text: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Logits for one auxiliary head with its target class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTarget<T: Scalar> {
    pub logits: Vec<T>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T: Scalar> {
    pub bce: Option<T>,
    pub dice: Option<T>,
    /// Detection plus classification cross-entropy.
    pub aux: Option<T>,
    pub text: Option<T>,
    pub total: T,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable `log(1 + e^x)`.
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean per-pixel logistic loss.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, gt: &BitMask) -> Result<T, KernelError> {
    check_mask_dims(logits, gt)?;
    let (h, w) = logits.dims2()?;
    let mut acc = T::zero();
    for y in 0..h {
        for x in 0..w {
            let z = logits.at2(y, x);
            acc = acc + if gt.get(x, y) { softplus(-z) } else { softplus(z) };
        }
    }
    Ok(acc / T::from_usize_lossy(h * w))
}

/// `1 - 2 sum(p g) / (sum p + sum g)` on sigmoid probabilities; 0 when both
/// sums vanish.
pub fn dice_loss<T: Scalar>(logits: &Tensor<T>, gt: &BitMask) -> Result<T, KernelError> {
    check_mask_dims(logits, gt)?;
    let (h, w) = logits.dims2()?;
    let (mut inter, mut sp) = (T::zero(), T::zero());
    for y in 0..h {
        for x in 0..w {
            let p = sigmoid(logits.at2(y, x));
            sp = sp + p;
            if gt.get(x, y) {
                inter = inter + p;
            }
        }
    }
    let sg = T::from_usize_lossy(gt.count_ones() as usize);
    let denom = sp + sg;
    if denom == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::one() - T::lit(2.0) * inter / denom)
}

fn check_mask_dims<T: Scalar>(logits: &Tensor<T>, gt: &BitMask) -> Result<(), KernelError> {
    let (h, w) = logits.dims2()?;
    if h != gt.height() || w != gt.width() {
        return Err(KernelError::DimMismatch(format!("logits {h}x{w} against mask {}x{}", gt.height(), gt.width())));
    }
    Ok(())
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy<T: Scalar>(head: &HeadTarget<T>) -> Result<T, KernelError> {
    if head.target >= head.logits.len() {
        return Err(KernelError::DimMismatch(format!("target {} of {} classes", head.target, head.logits.len())));
    }
    let m = head.logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + head.logits.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
    Ok(lse - head.logits[head.target])
}

/// Weighted sum of the terms that are present.
pub fn mask_losses<T: Scalar>(
    mask: Option<(&Tensor<T>, &BitMask)>,
    det: Option<&HeadTarget<T>>,
    cls: Option<&HeadTarget<T>>,
    text_nll: Option<T>,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>, KernelError> {
    let (bce, dice) = match mask {
        Some((l, g)) => (Some(bce_loss(l, g)?), Some(dice_loss(l, g)?)),
        None => (None, None),
    };
    let aux = match (det, cls) {
        (None, None) => None,
        (d, c) => Some(d.map(cross_entropy).transpose()?.unwrap_or(T::zero()) + c.map(cross_entropy).transpose()?.unwrap_or(T::zero())),
    };
    let term = |v: Option<T>, w: f64| v.map(|v| v * T::lit(w)).unwrap_or(T::zero());
    let total = term(aux, weights.aux) + term(text_nll, weights.text) + term(bce, weights.bce) + term(dice, weights.dice);
    Ok(LossBreakdown { bce, dice, aux, text: text_nll, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> ModelParams<f64> {
        ModelParams::seeded(&KernelDims::default(), 5).unwrap()
    }

    #[test]
    fn roi_align_constant_and_identity() {
        let f = Tensor::<f64>::filled(&[2, 5, 6], 3.25);
        let r = roi_align(&f, [0.1, 0.2, 0.9, 0.7], 3, 4, 2).unwrap();
        assert!(r.data().iter().all(|v| (*v - 3.25).abs() < 1e-12));
        let g = Tensor::from_fn3(1, 4, 5, |_, y, x| (y * 5 + x) as f64);
        assert_eq!(roi_align(&g, [0.0, 0.0, 1.0, 1.0], 4, 5, 1).unwrap(), g);
        assert!(matches!(roi_align(&g, [0.5, 0.0, 0.5, 1.0], 1, 1, 1), Err(KernelError::DegenerateBox(_))));
    }

    #[test]
    fn splice_lengths() {
        let toks = ["a", "b", "<image>", "c", "d", "e"];
        let text = Tensor::<f64>::zeros(&[6, 4]);
        let img = Tensor::filled(&[3, 4], 1.0);
        let x = splice_sequence(&toks, &text, &img, None).unwrap();
        assert_eq!(x.shape(), &[8, 4]);
        let boxes = Tensor::filled(&[1, 4], 2.0);
        assert!(matches!(splice_sequence(&toks, &text, &img, Some(&boxes)), Err(KernelError::PlaceholderMismatch(_))));
    }

    #[test]
    fn zero_weights_reduce_to_layer_norm() {
        let z = ModelParams::<f64>::zeros(&KernelDims::default()).unwrap();
        let img = Tensor::from_fn2(4, 8, |i, j| (i * 3 + j * j) as f64 * 0.1);
        let q = Tensor::from_fn2(2, 8, |i, j| (i as f64 - j as f64) * 0.3);
        let (io, to) = two_way_decoder(&img, &q, &z.decoder).unwrap();
        let ln = LayerNorm::identity(8);
        // Repeated normalization only drifts by the epsilon term.
        assert!(io.max_abs_diff(&layer_norm(&img, &ln).unwrap()).unwrap() < 1e-4);
        assert!(to.max_abs_diff(&layer_norm(&q, &ln).unwrap()).unwrap() < 1e-4);
    }

    #[test]
    fn pixel_decode_scales_by_four() {
        let m = seeded();
        let tokens = Tensor::from_fn2(16, 8, |i, j| ((i + j) % 3) as f64 - 1.0);
        assert_eq!(pixel_decode(&tokens, 4, 4, &m.pixel).unwrap().shape(), &[8, 16, 16]);
        let zero_bias = PixelDecoderParams { up1: Deconv { bias: Tensor::zeros(&[8]), ..m.pixel.up1.clone() }, up2: Deconv { bias: Tensor::zeros(&[8]), ..m.pixel.up2.clone() } };
        let out = pixel_decode(&Tensor::zeros(&[16, 8]), 4, 4, &zero_bias).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_counts_follow_seg_tokens() {
        let m = seeded();
        let img = Tensor::from_fn2(4, 8, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        for k in [0usize, 1, 3, 7] {
            let text = "<p>x</p> [SEG] ".repeat(k);
            let e = Tensor::from_fn2(seg_count(&text), 8, |i, j| ((i + 2 * j) % 4) as f64 * 0.1);
            let p = predict_masks(&img, (2, 2), &e, &m, true).unwrap();
            assert_eq!((p.artifact.len(), p.region.len()), (k, k));
            let plain = predict_masks(&img, (2, 2), &e, &m, false).unwrap();
            assert_eq!(plain.artifact, p.artifact);
            assert!(plain.region.is_empty());
        }
    }

    #[test]
    fn loss_arithmetic() {
        let half = Tensor::<f64>::zeros(&[2, 2]);
        let gt = BitMask::from_fn(2, 2, |x, _| x == 0);
        let l = mask_losses(Some((&half, &gt)), None, None, None, &LOSS_WEIGHTS).unwrap();
        assert!((l.bce.unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((l.dice.unwrap() - 0.5).abs() < 1e-15);
        assert!((l.total - (0.5 * 2f64.ln() + 2.0 * 0.5)).abs() < 1e-15);
        let only_dice = mask_losses(Some((&half, &gt)), None, None, None, &LossWeights { aux: 0.2, text: 1.0, bce: 0.0, dice: 2.0 }).unwrap();
        assert_eq!(only_dice.total, 2.0 * only_dice.dice.unwrap());
        let sat = Tensor::from_fn2(2, 2, |_, x| if x == 0 { 60.0 } else { -60.0 });
        let s = mask_losses(Some((&sat, &gt)), None, None, None, &LOSS_WEIGHTS).unwrap();
        assert!(s.bce.unwrap() < 1e-20 && s.dice.unwrap() < 1e-20);
        let det = HeadTarget { logits: vec![0.0, 0.0], target: 1 };
        let a = mask_losses::<f64>(None, Some(&det), None, Some(1.5), &LOSS_WEIGHTS).unwrap();
        assert!((a.total - (0.2 * 2f64.ln() + 1.5)).abs() < 1e-15);
    }
}
