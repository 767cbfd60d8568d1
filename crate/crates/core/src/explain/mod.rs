//! Prompt construction, response parsing and interleaved narratives for the
//! per-concept explanation (Step 3) and grounded summary (Step 4) stages.

mod backend;

pub use backend::{
    sha256_hex, BackendConfig, BackendMode, ChatClient, ChatError, ChatMessage, MockScript, Transport,
    TransportError, TransportResponse, UreqTransport,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fict::{normalize_name, ConceptId, ConceptTree};
use crate::mask::{rle_encode, BitMask, RleMask};

pub const STEP3_TEMPLATE: &str = include_str!("../../assets/prompts/step3.txt");
pub const STEP4_TEMPLATE: &str = include_str!("../../assets/prompts/step4.txt");
pub const STEP3_SLOT: &str = "{ concept_list }";
pub const STEP4_SLOT: &str = "[input]";

pub const SEG_TOKEN: &str = "[SEG]";
pub const P_OPEN: &str = "<p>";
pub const P_CLOSE: &str = "</p>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExplainError {
    #[error("concept list is empty")]
    EmptyConceptList,
    #[error("no explanations to summarize")]
    EmptyInput,
    #[error("response has no line naming an expected area")]
    NoParsableLines,
    #[error("response misses {} expected area(s)", .missing.len())]
    MissingConcepts { missing: Vec<ConceptId>, found: Vec<AtomicExplanation> },
    #[error("marker <{0}> has no entry in the index map")]
    UnknownIndex(usize),
    #[error("unbalanced or nested markers at byte {0}")]
    UnbalancedMarkers(usize),
    #[error("marker <{0}> encloses no text")]
    EmptyPhrase(usize),
    #[error("no mask for grounded concept {0}")]
    MissingMask(ConceptId),
}

/// One-sentence description of one artifact-existing atomic concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicExplanation {
    pub concept: ConceptId,
    /// Display name used in prompts.
    pub area: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Plain { text: String },
    Grounded { concept: ConceptId, phrase: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeNarrative {
    pub segments: Vec<Segment>,
}

impl AgeNarrative {
    pub fn grounded(&self) -> impl Iterator<Item = (&ConceptId, &str)> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Grounded { concept, phrase } => Some((concept, phrase.as_str())),
            Segment::Plain { .. } => None,
        })
    }

    /// Narrative text with markers removed.
    pub fn plain_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Plain { text } => text.as_str(),
                Segment::Grounded { phrase, .. } => phrase.as_str(),
            })
            .collect()
    }
}

/// Step 3 prompt with the concept names one per line.
pub fn build_step3_prompt<S: AsRef<str>>(concepts: &[S]) -> Result<String, ExplainError> {
    if concepts.is_empty() {
        return Err(ExplainError::EmptyConceptList);
    }
    let list = concepts.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n");
    Ok(STEP3_TEMPLATE.replacen(STEP3_SLOT, &list, 1))
}

/// The block substituted into the Step 4 template: descriptions, then index
/// numbers `0..n` in input order.
pub fn step4_input_block(explanations: &[AtomicExplanation]) -> String {
    let mut s = String::from("\nDescriptions\n");
    for e in explanations {
        s.push_str(&format!("{}: {}\n", e.area, e.text));
    }
    s.push_str("Index Numbers");
    for (i, e) in explanations.iter().enumerate() {
        s.push_str(&format!("\n{}: {}", e.area, i));
    }
    s
}

pub fn build_step4_prompt(explanations: &[AtomicExplanation]) -> Result<String, ExplainError> {
    if explanations.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    Ok(STEP4_TEMPLATE.replacen(STEP4_SLOT, &step4_input_block(explanations), 1))
}

/// Index map matching [`build_step4_prompt`].
pub fn step4_index_map(explanations: &[AtomicExplanation]) -> BTreeMap<usize, ConceptId> {
    explanations.iter().enumerate().map(|(i, e)| (i, e.concept.clone())).collect()
}

/// Parses `area: description` lines. Areas match expected concepts by
/// normalized display name; the first line for a concept wins. Results follow
/// the order of `expected`.
pub fn parse_step3(raw: &str, expected: &[ConceptId], tree: &ConceptTree) -> Result<Vec<AtomicExplanation>, ExplainError> {
    let names: Vec<(ConceptId, String, String)> = expected
        .iter()
        .map(|id| {
            let display = tree.display_name(id).unwrap_or(id.as_str()).to_string();
            (id.clone(), normalize_name(&display), display)
        })
        .collect();
    let mut found: BTreeMap<usize, String> = BTreeMap::new();
    for line in raw.lines() {
        let Some((area, text)) = line.split_once(": ") else { continue };
        let key = normalize_name(area);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(i) = names.iter().position(|(_, n, _)| *n == key) {
            found.entry(i).or_insert_with(|| text.to_string());
        }
    }
    if found.is_empty() {
        return Err(ExplainError::NoParsableLines);
    }
    let explanations: Vec<AtomicExplanation> = found
        .iter()
        .map(|(&i, text)| AtomicExplanation { concept: names[i].0.clone(), area: names[i].2.clone(), text: text.clone() })
        .collect();
    let missing: Vec<ConceptId> =
        (0..names.len()).filter(|i| !found.contains_key(i)).map(|i| names[i].0.clone()).collect();
    if missing.is_empty() {
        Ok(explanations)
    } else {
        Err(ExplainError::MissingConcepts { missing, found: explanations })
    }
}

enum Marker {
    Open(usize),
    Close(usize),
}

/// Recognises `<k>` or `</k>` at the start of `s`, returning the marker and its byte length.
fn marker_at(s: &str) -> Option<(Marker, usize)> {
    let rest = s.strip_prefix('<')?;
    let (close, rest) = match rest.strip_prefix('/') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || digits > 9 || rest.as_bytes().get(digits) != Some(&b'>') {
        return None;
    }
    let k: usize = rest[..digits].parse().ok()?;
    let len = 1 + close as usize + digits + 1;
    Some((if close { Marker::Close(k) } else { Marker::Open(k) }, len))
}

/// Splits a summary into plain text and grounded spans delimited by flat
/// `<k> ... </k>` markers. Phrases are trimmed; plain text is kept verbatim.
pub fn parse_step4(raw: &str, index_map: &BTreeMap<usize, ConceptId>) -> Result<AgeNarrative, ExplainError> {
    let raw = raw.trim();
    let mut segments = Vec::new();
    let mut plain_start = 0;
    let mut open: Option<(usize, usize, usize)> = None; // (index, marker start, content start)
    let mut i = 0;
    while i < raw.len() {
        let Some((m, len)) = raw[i..].starts_with('<').then(|| marker_at(&raw[i..])).flatten() else {
            i += raw[i..].chars().next().map_or(1, char::len_utf8);
            continue;
        };
        match (m, open) {
            (Marker::Open(k), None) => {
                if !index_map.contains_key(&k) {
                    return Err(ExplainError::UnknownIndex(k));
                }
                if plain_start < i {
                    segments.push(Segment::Plain { text: raw[plain_start..i].to_string() });
                }
                open = Some((k, i, i + len));
            }
            (Marker::Close(k), Some((j, _, content))) if k == j => {
                let phrase = raw[content..i].trim();
                if phrase.is_empty() {
                    return Err(ExplainError::EmptyPhrase(k));
                }
                segments.push(Segment::Grounded { concept: index_map[&k].clone(), phrase: phrase.to_string() });
                open = None;
                plain_start = i + len;
            }
            _ => return Err(ExplainError::UnbalancedMarkers(i)),
        }
        i += len;
    }
    if let Some((_, start, _)) = open {
        return Err(ExplainError::UnbalancedMarkers(start));
    }
    if plain_start < raw.len() {
        segments.push(Segment::Plain { text: raw[plain_start..].to_string() });
    }
    Ok(AgeNarrative { segments })
}

/// Answer text with `<p>phrase</p> [SEG]` spans and the masks in span order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interleaved {
    pub text: String,
    pub concepts: Vec<ConceptId>,
    pub masks: Vec<RleMask>,
}

pub fn to_interleaved(n: &AgeNarrative, masks: &BTreeMap<ConceptId, BitMask>) -> Result<Interleaved, ExplainError> {
    let mut text = String::new();
    let mut concepts = Vec::new();
    let mut rles = Vec::new();
    for s in &n.segments {
        match s {
            Segment::Plain { text: t } => text.push_str(t),
            Segment::Grounded { concept, phrase } => {
                let m = masks.get(concept).ok_or_else(|| ExplainError::MissingMask(concept.clone()))?;
                text.push_str(&format!("{P_OPEN}{phrase}{P_CLOSE} {SEG_TOKEN}"));
                concepts.push(concept.clone());
                rles.push(rle_encode(m));
            }
        }
    }
    Ok(Interleaved { text, concepts, masks: rles })
}

/// Phrases of `<p>...</p> [SEG]` spans in order, or `None` when the markup is
/// malformed.
pub fn grounded_phrases(text: &str) -> Option<Vec<String>> {
    let mut out = Vec::new();
    let mut rest = text;
    loop {
        let open = rest.find(P_OPEN);
        let close = rest.find(P_CLOSE);
        match (open, close) {
            (None, None) => break,
            (Some(o), Some(c)) if o < c => {
                let phrase = &rest[o + P_OPEN.len()..c];
                if phrase.contains(P_OPEN) {
                    return None;
                }
                let after = rest[c + P_CLOSE.len()..].strip_prefix(' ')?.strip_prefix(SEG_TOKEN)?;
                out.push(phrase.to_string());
                rest = after;
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Checks the answer-text invariants: balanced `<p>`/`</p>` pairs, each
/// followed by `[SEG]`, and as many `[SEG]` tokens as masks.
pub fn check_grounded_text(text: &str, mask_count: usize) -> bool {
    let segs = text.matches(SEG_TOKEN).count();
    match grounded_phrases(text) {
        Some(p) => segs == mask_count && p.len() == segs,
        None => false,
    }
}
