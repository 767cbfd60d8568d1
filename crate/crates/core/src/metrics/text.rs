//! Caption-overlap scores over a fixed tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricError;

pub const TOKENIZER_VERSION: &str = "v1";

/// Lowercases and splits on every character that is not alphanumeric, so
/// punctuation never forms a token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl TextPair {
    pub fn new(candidate: &str, references: &[&str]) -> Self {
        TextPair { candidate: tokenize(candidate), references: references.iter().map(|r| tokenize(r)).collect() }
    }

    fn check(&self) -> Result<(), MetricError> {
        if self.candidate.is_empty() {
            return Err(MetricError::EmptyCandidate);
        }
        if self.references.is_empty() {
            return Err(MetricError::NoReferences);
        }
        Ok(())
    }
}

type Gram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4: uniform weights, clipped counts against the per-gram
/// maximum over references, brevity penalty against the closest reference
/// length (shorter on ties). No smoothing, so any empty order gives 0.
pub fn bleu4(t: &TextPair) -> Result<f64, MetricError> {
    t.check()?;
    let c = &t.candidate;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(c, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let mut max_ref: HashMap<Gram<'_>, usize> = HashMap::new();
        for r in &t.references {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let clipped: usize = cand.iter().map(|(g, k)| (*k).min(max_ref.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln() / 4.0;
    }
    let r = closest_ref_len(c.len(), &t.references);
    let bp = if c.len() >= r { 1.0 } else { (1.0 - r as f64 / c.len() as f64).exp() };
    Ok(bp * log_sum.exp())
}

fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L F-measure with beta 1.2; precision and recall are each maximised
/// over references before combining.
pub fn rouge_l(t: &TextPair) -> Result<f64, MetricError> {
    t.check()?;
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for rf in &t.references {
        if rf.is_empty() {
            continue;
        }
        let l = lcs_len(&t.candidate, rf) as f64;
        p = p.max(l / t.candidate.len() as f64);
        r = r.max(l / rf.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

pub const CIDER_SIGMA: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// CIDEr-D: per order n in 1..=4, tf-idf vectors with document frequency
/// counted over each sample's reference set, candidate weights clipped by the
/// reference, cosine times a Gaussian length penalty, averaged over
/// references and orders, scaled by 10.
pub fn cider(corpus: &[TextPair]) -> Result<CiderScores, MetricError> {
    if corpus.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    for t in corpus {
        t.check()?;
    }
    let mut df: [HashMap<Gram<'_>, f64>; 4] = Default::default();
    for t in corpus {
        for (n, d) in df.iter_mut().enumerate() {
            let mut seen: HashMap<Gram<'_>, ()> = HashMap::new();
            for r in &t.references {
                for g in ngram_counts(r, n + 1).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *d.entry(g).or_insert(0.0) += 1.0;
            }
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let vec = |tokens: &'_ [String], n: usize, df: &HashMap<Gram<'_>, f64>| -> (HashMap<Vec<String>, f64>, f64) {
        let mut v = HashMap::new();
        let mut norm = 0.0;
        for (g, k) in ngram_counts(tokens, n + 1) {
            let w = k as f64 * (log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln());
            norm += w * w;
            v.insert(g.to_vec(), w);
        }
        (v, norm.sqrt())
    };
    let mut per_sample = Vec::with_capacity(corpus.len());
    for t in corpus {
        let mut score = 0.0;
        for n in 0..4 {
            let (vc, nc) = vec(&t.candidate, n, &df[n]);
            let mut acc = 0.0;
            for r in &t.references {
                let (vr, nr) = vec(r, n, &df[n]);
                let mut dot = 0.0;
                for (g, wc) in &vc {
                    if let Some(wr) = vr.get(g) {
                        dot += wc.min(*wr) * wr;
                    }
                }
                let cos = if nc != 0.0 && nr != 0.0 { dot / (nc * nr) } else { 0.0 };
                let delta = t.candidate.len() as f64 - r.len() as f64;
                acc += cos * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            score += acc / t.references.len() as f64;
        }
        per_sample.push(score / 4.0 * 10.0);
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CiderScores { per_sample, mean })
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
/// Node budget for the exact chunk-minimising alignment search. When it runs
/// out the best alignment found so far is used.
pub const METEOR_SEARCH_BUDGET: usize = 200_000;

/// Exact-match METEOR without stemming or synonyms. The alignment has the
/// maximum number of unigram matches and, among those, the fewest chunks.
/// Multiple references score the maximum.
pub fn meteor_lite(t: &TextPair) -> Result<f64, MetricError> {
    t.check()?;
    Ok(t.references.iter().map(|r| meteor_single(&t.candidate, r)).fold(0.0, f64::max))
}

fn meteor_single(c: &[String], r: &[String]) -> f64 {
    let Some((m, chunks)) = min_chunk_alignment(c, r, METEOR_SEARCH_BUDGET) else { return 0.0 };
    meteor_formula(m, chunks, c.len(), r.len())
}

/// Score from match count, chunk count and lengths.
pub fn meteor_formula(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let pen = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    fmean * (1.0 - pen)
}

struct Search<'a> {
    c: &'a [u32],
    r: &'a [u32],
    /// Remaining candidate occurrences of each word from position i on.
    left: Vec<Vec<usize>>,
    need: Vec<usize>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
    budget: usize,
}

impl Search<'_> {
    fn go(&mut self, i: usize, prev: Option<(usize, usize)>, chunks: usize) {
        if chunks >= self.best || self.nodes >= self.budget {
            return;
        }
        self.nodes += 1;
        if i == self.c.len() {
            self.best = chunks;
            return;
        }
        let w = self.c[i] as usize;
        if self.need[w] > 0 {
            // Continue the current chunk first so good solutions come early.
            let cont = prev.filter(|&(pi, _)| pi + 1 == i).map(|(_, pj)| pj + 1);
            let mut order: Vec<usize> = cont.into_iter().filter(|&j| j < self.r.len()).collect();
            order.extend((0..self.r.len()).filter(|&j| Some(j) != cont));
            for j in order {
                if self.r[j] as usize != w || self.used[j] {
                    continue;
                }
                let extends = cont == Some(j);
                self.used[j] = true;
                self.need[w] -= 1;
                self.go(i + 1, Some((i, j)), chunks + usize::from(!extends));
                self.need[w] += 1;
                self.used[j] = false;
            }
        }
        // Leaving word i unaligned is allowed only if later copies can still
        // supply the required matches.
        if self.left[i + 1][w] >= self.need[w] {
            self.go(i + 1, prev, chunks);
        }
    }
}

/// Maximum match count and the minimum chunk count over alignments with that
/// many matches, or `None` when nothing matches.
pub fn min_chunk_alignment(c: &[String], r: &[String], budget: usize) -> Option<(usize, usize)> {
    let mut vocab: HashMap<&str, u32> = HashMap::new();
    for s in c.iter().chain(r) {
        let n = vocab.len() as u32;
        vocab.entry(s.as_str()).or_insert(n);
    }
    let ci: Vec<u32> = c.iter().map(|s| vocab[s.as_str()]).collect();
    let ri: Vec<u32> = r.iter().map(|s| vocab[s.as_str()]).collect();
    let v = vocab.len();
    let mut cc = vec![0usize; v];
    let mut rc = vec![0usize; v];
    ci.iter().for_each(|&w| cc[w as usize] += 1);
    ri.iter().for_each(|&w| rc[w as usize] += 1);
    let need: Vec<usize> = (0..v).map(|w| cc[w].min(rc[w])).collect();
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return None;
    }
    let mut left = vec![vec![0usize; v]; ci.len() + 1];
    for i in (0..ci.len()).rev() {
        left[i] = left[i + 1].clone();
        left[i][ci[i] as usize] += 1;
    }
    let mut s = Search { c: &ci, r: &ri, left, need, used: vec![false; ri.len()], best: usize::MAX, nodes: 0, budget };
    s.go(0, None, 0);
    Some((matches, s.best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_drops_punctuation() {
        assert_eq!(toks("The <p>Chin's</p> edge, blurred!"), ["the", "p", "chin", "s", "p", "edge", "blurred"]);
    }

    #[test]
    fn identical_text_scores_one() {
        let t = TextPair::new("the skin of the left cheek is too smooth", &["the skin of the left cheek is too smooth"]);
        assert_eq!(bleu4(&t).unwrap(), 1.0);
        assert_eq!(rouge_l(&t).unwrap(), 1.0);
        let n = t.candidate.len() as f64;
        assert!((meteor_lite(&t).unwrap() - (1.0 - 0.5 / (n * n * n))).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let t = TextPair::new("alpha beta gamma delta", &["one two three four"]);
        assert_eq!(bleu4(&t).unwrap(), 0.0);
        assert_eq!(rouge_l(&t).unwrap(), 0.0);
        assert_eq!(meteor_lite(&t).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidate_is_an_error() {
        assert_eq!(bleu4(&TextPair::new("...", &["a"])), Err(MetricError::EmptyCandidate));
        assert_eq!(rouge_l(&TextPair::new("a", &[])), Err(MetricError::NoReferences));
        assert_eq!(cider(&[]), Err(MetricError::EmptyCorpus));
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let t = TextPair::new("a b c d e f", &["a b c d e f g h", "x y z"]);
        let expected = (1.0f64 - 8.0 / 6.0).exp();
        assert!((bleu4(&t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        // "the cat" can align to either "the"; the adjacent one gives 1 chunk.
        let c = toks("the cat sat");
        let r = toks("the dog saw the cat sat");
        assert_eq!(min_chunk_alignment(&c, &r, METEOR_SEARCH_BUDGET), Some((3, 1)));
    }

    #[test]
    fn cider_identity_is_maximal() {
        let refs = ["a red blotch on the left cheek", "the nose bridge looks blurred here", "uneven lighting around both eyes today"];
        let corpus: Vec<TextPair> = refs.iter().map(|r| TextPair::new(r, &[r])).collect();
        let s = cider(&corpus).unwrap();
        for v in &s.per_sample {
            assert!((v - 10.0).abs() < 1e-9, "{v}");
        }
        let off = vec![TextPair::new("zz yy xx ww", &[refs[0]]), TextPair::new(refs[1], &[refs[1]])];
        assert_eq!(cider(&off).unwrap().per_sample[0], 0.0);
    }
}
