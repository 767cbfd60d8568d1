//! Scores for detection, classification, localization and explanation outputs.

mod text;

pub use text::{
    bleu4, cider, lcs_len, meteor_formula, meteor_lite, min_chunk_alignment, rouge_l, tokenize, CiderScores, TextPair,
    CIDER_SIGMA, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA, METEOR_SEARCH_BUDGET, ROUGE_BETA, TOKENIZER_VERSION,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ForgeryType, Label, Sample, TaskTag};
use crate::explain::{P_CLOSE, P_OPEN, SEG_TOKEN};
use crate::mask::{BitMask, MaskError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no outcomes")]
    EmptyOutcomes,
    #[error("ACER needs at least one real and one fake sample")]
    DegenerateClassDistribution,
    #[error("mask {index} has mismatched dimensions")]
    DimensionMismatch { index: usize },
    #[error("prediction and ground-truth lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("candidate is empty after tokenization")]
    EmptyCandidate,
    #[error("no references")]
    NoReferences,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no scorable pairs")]
    NothingToScore,
    #[error("prediction for {0} is missing")]
    MissingPrediction(String),
    #[error("sample {id}: {reason}")]
    BadSample { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub predicted: Label,
    pub actual: Label,
}

/// Binary scores with fake as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fakes accepted as real, over all fakes.
    pub apcer: Option<f64>,
    /// Reals rejected as fake, over all reals.
    pub bpcer: Option<f64>,
    pub acer: Option<f64>,
}

impl ClassificationMetrics {
    pub fn acer(&self) -> Result<f64, MetricError> {
        self.acer.ok_or(MetricError::DegenerateClassDistribution)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Precision, recall and F1 are 0 when their denominator is 0. ACER is `None`
/// unless both classes occur.
pub fn classification_metrics(outcomes: &[Outcome]) -> Result<ClassificationMetrics, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::EmptyOutcomes);
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for o in outcomes {
        match (o.predicted, o.actual) {
            (Label::Fake, Label::Fake) => tp += 1,
            (Label::Real, Label::Real) => tn += 1,
            (Label::Fake, Label::Real) => fp += 1,
            (Label::Real, Label::Fake) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let apcer = (tp + fn_ > 0).then(|| ratio(fn_, tp + fn_));
    let bpcer = (tn + fp > 0).then(|| ratio(fp, tn + fp));
    let acer = apcer.zip(bpcer).map(|(a, b)| (a + b) / 2.0);
    Ok(ClassificationMetrics { tp, tn, fp, fn_, acc: ratio(tp + tn, outcomes.len() as u64), precision, recall, f1, apcer, bpcer, acer })
}

/// Share of exact label matches for multi-way classification.
pub fn multiclass_accuracy<T: PartialEq>(pred: &[T], gt: &[T]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyOutcomes);
    }
    Ok(ratio(pred.iter().zip(gt).filter(|(p, g)| p == g).count() as u64, pred.len() as u64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// A pair of empty masks scores 1.
    #[default]
    One,
    /// Pairs of empty masks are left out of the mean.
    Skip,
}

pub fn iou(a: &BitMask, b: &BitMask, policy: EmptyPolicy) -> Result<Option<f64>, MaskError> {
    let inter = a.intersection_count(b)?;
    let uni = a.union_count(b)?;
    Ok(if uni == 0 {
        match policy {
            EmptyPolicy::One => Some(1.0),
            EmptyPolicy::Skip => None,
        }
    } else {
        Some(inter as f64 / uni as f64)
    })
}

pub fn miou(preds: &[BitMask], gts: &[BitMask], policy: EmptyPolicy) -> Result<f64, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch(preds.len(), gts.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
        if let Some(v) = iou(p, g, policy).map_err(|_| MetricError::DimensionMismatch { index })? {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::NothingToScore);
    }
    Ok(sum / n as f64)
}

/// Answer text with grounding markup removed, for text scoring.
pub fn strip_grounding(text: &str) -> String {
    let s = text.replace(SEG_TOKEN, " ").replace(P_OPEN, " ").replace(P_CLOSE, " ");
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu4: f64,
    pub cider: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskTag,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<TextScores>,
    pub tokenizer: String,
}

impl EvalReport {
    /// Two-line table with the columns that apply to the task.
    pub fn render_table(&self) -> String {
        let mut cols: Vec<(String, String)> = vec![];
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        if let Some(c) = &self.classification {
            cols.push(("Acc.".into(), pct(c.acc)));
            cols.push(("Recall".into(), pct(c.recall)));
            cols.push(("Precision".into(), pct(c.precision)));
            cols.push(("F1".into(), pct(c.f1)));
            cols.push(("ACER".into(), c.acer.map(pct).unwrap_or_else(|| "n/a".into())));
        }
        if let Some(a) = self.cls_accuracy {
            cols.push(("Acc.".into(), pct(a)));
        }
        if let Some(t) = &self.text {
            cols.push(("BLEU-4".into(), pct(t.bleu4)));
            cols.push(("CIDEr".into(), pct(t.cider)));
            cols.push(("ROUGE_L".into(), pct(t.rouge_l)));
            cols.push(("METEOR(lite)".into(), pct(t.meteor_lite)));
        }
        if let Some(m) = self.miou {
            cols.push(("mIoU".into(), pct(m)));
        }
        let mut head = format!("{:<7}", "Task");
        let mut row = format!("{:<7}", self.task.label());
        for (h, v) in cols {
            let w = h.len().max(v.len());
            head.push_str(&format!(" | {h:>w$}"));
            row.push_str(&format!(" | {v:>w$}"));
        }
        format!("{head}\n{row}\n")
    }
}

fn union_of(s: &Sample) -> Result<BitMask, MetricError> {
    let bad = |reason: String| MetricError::BadSample { id: s.id.clone(), reason };
    let [h, w] = s.size;
    let mut acc = BitMask::zeros(w, h);
    for m in &s.masks {
        let b = m.decode().map_err(|e| bad(e.to_string()))?;
        acc.union_in_place(&b).map_err(|e| bad(e.to_string()))?;
    }
    Ok(acc)
}

/// Scores predictions against ground truth for one task. Samples are paired
/// by id and processed in id order; every ground-truth sample needs a
/// prediction. Localization uses the union of each sample's masks.
pub fn evaluate(task: TaskTag, preds: &[Sample], gts: &[Sample]) -> Result<EvalReport, MetricError> {
    let by_id: BTreeMap<&str, &Sample> = preds.iter().filter(|s| s.task == task).map(|s| (s.id.as_str(), s)).collect();
    let mut gt: Vec<&Sample> = gts.iter().filter(|s| s.task == task).collect();
    gt.sort_by(|a, b| a.id.cmp(&b.id));
    if gt.is_empty() {
        return Err(MetricError::NothingToScore);
    }
    let pairs: Vec<(&Sample, &Sample)> = gt
        .iter()
        .map(|g| by_id.get(g.id.as_str()).map(|p| (*p, *g)).ok_or_else(|| MetricError::MissingPrediction(g.id.clone())))
        .collect::<Result<_, _>>()?;
    let mut report = EvalReport {
        task,
        samples: pairs.len(),
        classification: None,
        cls_accuracy: None,
        miou: None,
        text: None,
        tokenizer: TOKENIZER_VERSION.into(),
    };
    let bad = |id: &str, reason: &str| MetricError::BadSample { id: id.to_string(), reason: reason.to_string() };
    match task {
        TaskTag::Det => {
            let outcomes: Vec<Outcome> = pairs
                .iter()
                .map(|(p, g)| {
                    Ok(Outcome {
                        predicted: p.label.ok_or_else(|| bad(&p.id, "no label"))?,
                        actual: g.label.ok_or_else(|| bad(&g.id, "no label"))?,
                    })
                })
                .collect::<Result<_, MetricError>>()?;
            report.classification = Some(classification_metrics(&outcomes)?);
        }
        TaskTag::Cls => {
            let get = |s: &Sample| s.forgery_type.ok_or_else(|| bad(&s.id, "no forgery type"));
            let p: Vec<ForgeryType> = pairs.iter().map(|(p, _)| get(p)).collect::<Result<_, _>>()?;
            let g: Vec<ForgeryType> = pairs.iter().map(|(_, g)| get(g)).collect::<Result<_, _>>()?;
            report.cls_accuracy = Some(multiclass_accuracy(&p, &g)?);
        }
        _ => {
            if task.is_grounded() {
                let mut pm = Vec::new();
                let mut gm = Vec::new();
                for (p, g) in &pairs {
                    pm.push(union_of(p)?);
                    gm.push(union_of(g)?);
                }
                report.miou = Some(miou(&pm, &gm, EmptyPolicy::One)?);
            }
            if !task.is_loc() {
                let tp: Vec<TextPair> = pairs
                    .iter()
                    .map(|(p, g)| TextPair::new(&strip_grounding(&p.answer), &[&strip_grounding(&g.answer)]))
                    .collect();
                let n = tp.len() as f64;
                let mean = |f: fn(&TextPair) -> Result<f64, MetricError>| -> Result<f64, MetricError> {
                    Ok(tp.iter().map(f).collect::<Result<Vec<_>, _>>()?.iter().sum::<f64>() / n)
                };
                report.text = Some(TextScores {
                    bleu4: mean(bleu4)?,
                    cider: cider(&tp)?.mean,
                    rouge_l: mean(rouge_l)?,
                    meteor_lite: mean(meteor_lite)?,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcomes(spec: &[(Label, Label, usize)]) -> Vec<Outcome> {
        spec.iter().flat_map(|&(p, a, n)| std::iter::repeat_n(Outcome { predicted: p, actual: a }, n)).collect()
    }

    #[test]
    fn acer_is_the_mean_of_both_error_rates() {
        use Label::*;
        let o = outcomes(&[(Real, Fake, 1), (Fake, Fake, 9), (Fake, Real, 3), (Real, Real, 7)]);
        let m = classification_metrics(&o).unwrap();
        assert!((m.apcer.unwrap() - 0.10).abs() < 1e-12);
        assert!((m.bpcer.unwrap() - 0.30).abs() < 1e-12);
        assert!((m.acer().unwrap() - 0.20).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate() {
        use Label::*;
        let m = classification_metrics(&outcomes(&[(Fake, Fake, 4), (Real, Real, 2)])).unwrap();
        assert_eq!((m.acc, m.f1, m.acer), (1.0, 1.0, Some(0.0)));
        let only_fake = classification_metrics(&outcomes(&[(Fake, Fake, 3)])).unwrap();
        assert_eq!(only_fake.acer(), Err(MetricError::DegenerateClassDistribution));
        assert_eq!(classification_metrics(&[]), Err(MetricError::EmptyOutcomes));
    }

    #[test]
    fn iou_cases() {
        let a = BitMask::from_fn(4, 4, |x, _| x < 2);
        let b = BitMask::from_fn(4, 4, |x, _| x >= 2);
        let z = BitMask::zeros(4, 4);
        assert_eq!(miou(&[a.clone()], &[a.clone()], EmptyPolicy::One).unwrap(), 1.0);
        assert_eq!(miou(&[a.clone()], &[b], EmptyPolicy::One).unwrap(), 0.0);
        assert_eq!(miou(&[z.clone(), a.clone()], &[z.clone(), a.clone()], EmptyPolicy::Skip).unwrap(), 1.0);
        assert_eq!(miou(&[z.clone()], &[z], EmptyPolicy::Skip), Err(MetricError::NothingToScore));
        assert_eq!(miou(&[a], &[BitMask::zeros(3, 4)], EmptyPolicy::One), Err(MetricError::DimensionMismatch { index: 0 }));
    }

    #[test]
    fn strip_removes_markup() {
        assert_eq!(strip_grounding("The <p>left cheek</p> [SEG] is smooth."), "The left cheek is smooth.");
    }
}
