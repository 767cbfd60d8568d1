//! Parameter containers, their flat `{name: {shape, data}}` file form and a
//! seeded initializer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};
use crate::rng::SplitMix64;
use crate::Scalar;

/// Sizes of the toy model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelDims {
    /// Decoder width `D_de`.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Channel counts of the four box-encoder pyramid levels.
    pub pyramid_channels: [usize; 4],
    /// Box feature width `D_B`.
    pub box_dim: usize,
    pub head_hidden: usize,
    pub num_forgery_classes: usize,
}

impl Default for KernelDims {
    fn default() -> Self {
        KernelDims {
            dim: 8,
            heads: 2,
            layers: 2,
            mlp_hidden: 16,
            pyramid_channels: [2, 3, 4, 5],
            box_dim: 6,
            head_hidden: 8,
            num_forgery_classes: 5,
        }
    }
}

impl KernelDims {
    pub fn validate(&self) -> Result<(), KernelError> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(KernelError::DimMismatch(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.mlp_hidden == 0 || self.box_dim == 0 || self.head_hidden == 0 || self.pyramid_channels.contains(&0) {
            return Err(KernelError::DimMismatch("zero-sized dimension".into()));
        }
        Ok(())
    }
}

/// Linear map `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[d_in, d_out]), bias: Tensor::zeros(&[d_out]) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, KernelError> {
        x.matmul(&self.weight)?.add_row(self.bias.data())
    }

    fn visit<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{p}.weight"), &mut self.weight));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(d: usize) -> Self {
        LayerNorm { gamma: Tensor::filled(&[d], T::one()), beta: Tensor::zeros(&[d]) }
    }

    fn visit<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{p}.gamma"), &mut self.gamma));
        out.push((format!("{p}.beta"), &mut self.beta));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Scalar> Attention<T> {
    pub fn zeros(d: usize) -> Self {
        Attention { q: Linear::zeros(d, d), k: Linear::zeros(d, d), v: Linear::zeros(d, d), o: Linear::zeros(d, d) }
    }

    fn visit<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.q.visit(&format!("{p}.q"), out);
        self.k.visit(&format!("{p}.k"), out);
        self.v.visit(&format!("{p}.v"), out);
        self.o.visit(&format!("{p}.o"), out);
    }
}

/// One two-way block: query self-attention, query-to-image attention, query
/// MLP and image-to-query attention, each followed by a residual layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T: Scalar> {
    pub self_attn: Attention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_t2i: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
    pub norm3: LayerNorm<T>,
    pub cross_i2t: Attention<T>,
    pub norm4: LayerNorm<T>,
}

impl<T: Scalar> DecoderLayer<T> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        DecoderLayer {
            self_attn: Attention::zeros(d),
            norm1: LayerNorm::identity(d),
            cross_t2i: Attention::zeros(d),
            norm2: LayerNorm::identity(d),
            mlp1: Linear::zeros(d, hidden),
            mlp2: Linear::zeros(hidden, d),
            norm3: LayerNorm::identity(d),
            cross_i2t: Attention::zeros(d),
            norm4: LayerNorm::identity(d),
        }
    }

    fn visit<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.self_attn.visit(&format!("{p}.self_attn"), out);
        self.norm1.visit(&format!("{p}.norm1"), out);
        self.cross_t2i.visit(&format!("{p}.cross_t2i"), out);
        self.norm2.visit(&format!("{p}.norm2"), out);
        self.mlp1.visit(&format!("{p}.mlp1"), out);
        self.mlp2.visit(&format!("{p}.mlp2"), out);
        self.norm3.visit(&format!("{p}.norm3"), out);
        self.cross_i2t.visit(&format!("{p}.cross_i2t"), out);
        self.norm4.visit(&format!("{p}.norm4"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T: Scalar> {
    pub heads: usize,
    pub layers: Vec<DecoderLayer<T>>,
}

/// 2x2 stride-2 transposed convolution, weight `[c_in, c_out, 2, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Deconv<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Deconv { weight: Tensor::zeros(&[c_in, c_out, 2, 2]), bias: Tensor::zeros(&[c_out]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelDecoderParams<T: Scalar> {
    pub up1: Deconv<T>,
    pub up2: Deconv<T>,
}

/// Learned query rows, each `1 x D_de`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbeddings<T: Scalar> {
    pub detection: Tensor<T>,
    pub classification: Tensor<T>,
    pub mask: Tensor<T>,
    pub region: Tensor<T>,
    pub artifact: Tensor<T>,
}

/// How a concept embedding is joined with the region or artifact embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Add,
    /// `[E; A] W` with `W` of shape `2D x D`.
    ConcatProject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub dims: KernelDims,
    pub combine: Combine,
    pub decoder: DecoderParams<T>,
    pub pixel: PixelDecoderParams<T>,
    pub queries: QueryEmbeddings<T>,
    pub combine_proj: Linear<T>,
    pub box_proj: Linear<T>,
    pub det_head: [Linear<T>; 2],
    pub cls_head: [Linear<T>; 2],
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero weights with identity layer norms.
    pub fn zeros(dims: &KernelDims) -> Result<Self, KernelError> {
        dims.validate()?;
        let d = dims.dim;
        let row = || Tensor::zeros(&[1, d]);
        Ok(ModelParams {
            dims: dims.clone(),
            combine: Combine::Add,
            decoder: DecoderParams { heads: dims.heads, layers: (0..dims.layers).map(|_| DecoderLayer::zeros(d, dims.mlp_hidden)).collect() },
            pixel: PixelDecoderParams { up1: Deconv::zeros(d, d), up2: Deconv::zeros(d, d) },
            queries: QueryEmbeddings { detection: row(), classification: row(), mask: row(), region: row(), artifact: row() },
            combine_proj: Linear::zeros(2 * d, d),
            box_proj: Linear::zeros(dims.pyramid_channels.iter().sum(), dims.box_dim),
            det_head: [Linear::zeros(d, dims.head_hidden), Linear::zeros(dims.head_hidden, 2)],
            cls_head: [Linear::zeros(d, dims.head_hidden), Linear::zeros(dims.head_hidden, dims.num_forgery_classes)],
        })
    }

    /// Weights drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// biases and embeddings from `[-0.1, 0.1]`, layer norms at identity.
    pub fn seeded(dims: &KernelDims, seed: u64) -> Result<Self, KernelError> {
        let mut p = Self::zeros(dims)?;
        let mut rng = SplitMix64::for_key(seed, "kernel-weights");
        for (name, t) in p.tensors_mut() {
            if name.ends_with(".gamma") || name.ends_with(".beta") {
                continue;
            }
            let bound = if t.shape().len() >= 2 && !name.starts_with("queries.") { 1.0 / (t.shape()[0] as f64).sqrt() } else { 0.1 };
            for v in t.data_mut() {
                *v = T::lit(rng.uniform(-bound, bound));
            }
        }
        Ok(p)
    }

    /// Every tensor with its file name, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.decoder.layers.iter_mut().enumerate() {
            l.visit(&format!("decoder.layers.{i}"), &mut out);
        }
        out.push(("pixel.up1.weight".into(), &mut self.pixel.up1.weight));
        out.push(("pixel.up1.bias".into(), &mut self.pixel.up1.bias));
        out.push(("pixel.up2.weight".into(), &mut self.pixel.up2.weight));
        out.push(("pixel.up2.bias".into(), &mut self.pixel.up2.bias));
        let q = &mut self.queries;
        out.push(("queries.detection".into(), &mut q.detection));
        out.push(("queries.classification".into(), &mut q.classification));
        out.push(("queries.mask".into(), &mut q.mask));
        out.push(("queries.region".into(), &mut q.region));
        out.push(("queries.artifact".into(), &mut q.artifact));
        self.combine_proj.visit("combine_proj", &mut out);
        self.box_proj.visit("box_proj", &mut out);
        let [d1, d2] = &mut self.det_head;
        d1.visit("det_head.0", &mut out);
        d2.visit("det_head.1", &mut out);
        let [c1, c2] = &mut self.cls_head;
        c1.visit("cls_head.0", &mut out);
        c2.visit("cls_head.1", &mut out);
        out
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor<T>> {
        let mut c = self.clone();
        c.tensors_mut().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Fills a zero skeleton of `dims` from named tensors. Every expected name
    /// must be present with the expected shape; extra names are rejected.
    pub fn from_named(dims: &KernelDims, combine: Combine, named: &BTreeMap<String, Tensor<T>>) -> Result<Self, KernelError> {
        let mut p = Self::zeros(dims)?;
        p.combine = combine;
        let mut used = 0;
        for (name, t) in p.tensors_mut() {
            let src = named.get(&name).ok_or_else(|| KernelError::MissingTensor(name.clone()))?;
            src.expect_shape(&name, t.shape())?;
            *t = src.clone();
            used += 1;
        }
        if used != named.len() {
            let mut q = Self::zeros(dims)?;
            let known: Vec<String> = q.tensors_mut().into_iter().map(|(n, _)| n).collect();
            let extra = named.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(KernelError::Weights(format!("unexpected tensor {extra}")));
        }
        Ok(p)
    }
}

/// Weight file: `{"dims": .., "combine": .., "tensors": {name: {shape, data}}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct WeightFile<T: Scalar> {
    pub dims: KernelDims,
    #[serde(default)]
    pub combine: Combine,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

pub fn save_weights<T: Scalar>(p: &ModelParams<T>) -> String {
    let f = WeightFile { dims: p.dims.clone(), combine: p.combine, tensors: p.to_named() };
    serde_json::to_string(&f).expect("weights serialize")
}

pub fn load_weights<T: Scalar>(text: &str) -> Result<ModelParams<T>, KernelError> {
    let f: WeightFile<T> = serde_json::from_str(text).map_err(|e| KernelError::Weights(e.to_string()))?;
    for (name, t) in &f.tensors {
        // Deserialization bypasses the constructor checks.
        Tensor::new(t.shape().to_vec(), t.data().to_vec()).map_err(|e| KernelError::Weights(format!("{name}: {e}")))?;
    }
    ModelParams::from_named(&f.dims, f.combine, &f.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_file_round_trip() {
        let p = ModelParams::<f64>::seeded(&KernelDims::default(), 9).unwrap();
        let back: ModelParams<f64> = load_weights(&save_weights(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(ModelParams::<f64>::seeded(&KernelDims::default(), 9).unwrap(), p);
        assert_ne!(ModelParams::<f64>::seeded(&KernelDims::default(), 10).unwrap(), p);
    }

    #[test]
    fn missing_and_misshapen_tensors_fail() {
        let p = ModelParams::<f32>::seeded(&KernelDims::default(), 1).unwrap();
        let mut named = p.to_named();
        named.remove("queries.mask");
        assert!(matches!(ModelParams::from_named(&p.dims, Combine::Add, &named), Err(KernelError::MissingTensor(_))));
        let mut named = p.to_named();
        named.insert("queries.mask".into(), Tensor::zeros(&[1, 3]));
        assert!(matches!(ModelParams::from_named(&p.dims, Combine::Add, &named), Err(KernelError::DimMismatch(_))));
        let mut named = p.to_named();
        named.insert("stray".into(), Tensor::zeros(&[1]));
        assert!(matches!(ModelParams::from_named(&p.dims, Combine::Add, &named), Err(KernelError::Weights(_))));
    }

    #[test]
    fn heads_must_divide_dim() {
        let dims = KernelDims { dim: 6, heads: 4, ..Default::default() };
        assert!(ModelParams::<f64>::zeros(&dims).is_err());
    }
}
