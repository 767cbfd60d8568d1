//! Sample records for the eleven tasks, validation, deterministic splitting
//! and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::explain::{check_grounded_text, Interleaved, P_CLOSE, P_OPEN, SEG_TOKEN};
use crate::mask::{BBox, RleMask};
use crate::rng::SplitMix64;

pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates/questions_v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskTag {
    Det,
    Cls,
    ILoc,
    RLoc,
    BLoc,
    IToe,
    RToe,
    BToe,
    IAge,
    RAge,
    BAge,
}

impl TaskTag {
    pub const ALL: [TaskTag; 11] = [
        TaskTag::Det,
        TaskTag::Cls,
        TaskTag::ILoc,
        TaskTag::RLoc,
        TaskTag::BLoc,
        TaskTag::IToe,
        TaskTag::RToe,
        TaskTag::BToe,
        TaskTag::IAge,
        TaskTag::RAge,
        TaskTag::BAge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Det => "DET",
            TaskTag::Cls => "CLS",
            TaskTag::ILoc => "I_LOC",
            TaskTag::RLoc => "R_LOC",
            TaskTag::BLoc => "B_LOC",
            TaskTag::IToe => "I_TOE",
            TaskTag::RToe => "R_TOE",
            TaskTag::BToe => "B_TOE",
            TaskTag::IAge => "I_AGE",
            TaskTag::RAge => "R_AGE",
            TaskTag::BAge => "B_AGE",
        }
    }

    /// Short name used in tables, e.g. `I-Loc.`.
    pub fn label(self) -> &'static str {
        match self {
            TaskTag::Det => "Det.",
            TaskTag::Cls => "Cls.",
            TaskTag::ILoc => "I-Loc.",
            TaskTag::RLoc => "R-Loc.",
            TaskTag::BLoc => "B-Loc.",
            TaskTag::IToe => "I-TOE",
            TaskTag::RToe => "R-TOE",
            TaskTag::BToe => "B-TOE",
            TaskTag::IAge => "I-AGE",
            TaskTag::RAge => "R-AGE",
            TaskTag::BAge => "B-AGE",
        }
    }

    pub fn is_box(self) -> bool {
        matches!(self, TaskTag::BLoc | TaskTag::BToe | TaskTag::BAge)
    }

    pub fn is_region(self) -> bool {
        matches!(self, TaskTag::RLoc | TaskTag::RToe | TaskTag::RAge)
    }

    /// Loc. and AGE answers carry masks.
    pub fn is_grounded(self) -> bool {
        matches!(self, TaskTag::ILoc | TaskTag::RLoc | TaskTag::BLoc | TaskTag::IAge | TaskTag::RAge | TaskTag::BAge)
    }

    pub fn is_loc(self) -> bool {
        matches!(self, TaskTag::ILoc | TaskTag::RLoc | TaskTag::BLoc)
    }

    pub fn is_toe(self) -> bool {
        matches!(self, TaskTag::IToe | TaskTag::RToe | TaskTag::BToe)
    }

    pub fn is_age(self) -> bool {
        matches!(self, TaskTag::IAge | TaskTag::RAge | TaskTag::BAge)
    }

    /// Tasks built only from attribute-manipulated fakes.
    pub fn needs_attribute_source(self) -> bool {
        !matches!(self, TaskTag::Det | TaskTag::Cls)
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskTag {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, DatasetError> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        TaskTag::ALL.into_iter().find(|t| t.as_str() == up).ok_or_else(|| DatasetError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryType {
    IdentitySwap,
    ExpressionSwap,
    AttributeManipulation,
    EntireFaceSynthesis,
    Real,
}

impl ForgeryType {
    pub fn label(self) -> Label {
        if self == ForgeryType::Real {
            Label::Real
        } else {
            Label::Fake
        }
    }

    /// Wording used inside answers.
    pub fn phrase(self) -> &'static str {
        match self {
            ForgeryType::IdentitySwap => "identity swapping",
            ForgeryType::ExpressionSwap => "expression swapping",
            ForgeryType::AttributeManipulation => "attribute manipulation",
            ForgeryType::EntireFaceSynthesis => "entire face synthesis",
            ForgeryType::Real => "real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Split::Train => "Training",
            Split::Dev => "Dev.",
            Split::Test => "Test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    #[serde(default)]
    pub prompt_hashes: Vec<String>,
    #[serde(default)]
    pub dropped_concepts: Vec<String>,
    /// Forgery type of the source image, used to gate explanation tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_forgery_type: Option<ForgeryType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: TaskTag,
    pub image: String,
    /// `[height, width]` of the source image.
    pub size: [usize; 2],
    pub question: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_norm: Option<[f64; 4]>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<RleMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgery_type: Option<ForgeryType>,
    pub provenance: Provenance,
}

impl Sample {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serializes")
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("inconsistent inputs for {task}: {reason}")]
    InconsistentInputs { task: TaskTag, reason: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("unknown task tag {0:?}")]
    UnknownTask(String),
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("template bank: {0}")]
    Templates(String),
    #[error("invalid split spec: {0}")]
    SplitSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Seeded question and answer wording per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub version: String,
    pub questions: BTreeMap<TaskTag, Vec<String>>,
    pub answers: BTreeMap<String, Vec<String>>,
}

const ANSWER_KEYS: [&str; 4] = ["real", "fake", "class", "loc"];

impl TemplateBank {
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let bank: TemplateBank = serde_json::from_str(text).map_err(|e| DatasetError::Templates(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn default_bank() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Templates(m));
        for t in TaskTag::ALL {
            let qs = self.questions.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            if qs.len() < 5 {
                return bad(format!("{t} has {} questions, need at least 5", qs.len()));
            }
            for q in qs {
                if t.is_region() != q.contains("{region}") {
                    return bad(format!("{t} question {q:?} has the wrong {{region}} slot"));
                }
                if t.is_box() != q.contains("<bbox>") {
                    return bad(format!("{t} question {q:?} has the wrong <bbox> token"));
                }
            }
        }
        for k in ANSWER_KEYS {
            if self.answers.get(k).is_none_or(|v| v.is_empty()) {
                return bad(format!("missing answer list {k:?}"));
            }
        }
        if self.answers["class"].iter().any(|a| !a.contains("{type}")) {
            return bad("class answers need a {type} slot".into());
        }
        if self.answers["loc"].iter().any(|a| !check_grounded_text(a, 1)) {
            return bad("loc answers need exactly one grounded span".into());
        }
        Ok(())
    }

    fn pick<'a>(list: &'a [String], rng: &mut SplitMix64) -> &'a str {
        rng.pick(list)
    }
}

/// Everything a sample may be built from. Which fields are required depends
/// on the task.
#[derive(Debug, Clone, Default)]
pub struct SampleInputs {
    pub id: String,
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub forgery_type: Option<ForgeryType>,
    /// Display name of the queried region (R_* tasks).
    pub region: Option<String>,
    /// Box prompt (B_* tasks).
    pub bbox: Option<BBox>,
    /// Artifact mask for Loc. answers.
    pub artifact_mask: Option<RleMask>,
    /// Plain explanation for TOE answers.
    pub explanation: Option<String>,
    /// Grounded explanation for AGE answers.
    pub grounded: Option<Interleaved>,
    pub prompt_hashes: Vec<String>,
    pub dropped_concepts: Vec<String>,
}

pub fn make_sample(task: TaskTag, inputs: &SampleInputs, bank: &TemplateBank) -> Result<Sample, DatasetError> {
    let fail = |reason: &str| Err(DatasetError::InconsistentInputs { task, reason: reason.to_string() });
    if inputs.id.is_empty() || inputs.image.is_empty() {
        return fail("id and image are required");
    }
    if inputs.width == 0 || inputs.height == 0 {
        return fail("image size is zero");
    }
    let Some(source) = inputs.forgery_type else { return fail("forgery type of the source is required") };
    if task.needs_attribute_source() && source != ForgeryType::AttributeManipulation {
        return fail("explanation and localization samples need an attribute-manipulated source");
    }
    if task.is_box() != inputs.bbox.is_some() {
        return fail(if task.is_box() { "box prompt missing" } else { "box prompt given for a non-box task" });
    }
    if let Some(b) = inputs.bbox {
        if !b.fits(inputs.width, inputs.height) || b.area() == 0 {
            return fail("box outside the image");
        }
    }
    if task.is_region() && inputs.region.as_deref().is_none_or(str::is_empty) {
        return fail("region name missing");
    }

    let mut rng = SplitMix64::for_key(inputs.seed, &inputs.id);
    let mut question = TemplateBank::pick(&bank.questions[&task], &mut rng).to_string();
    if let Some(r) = &inputs.region {
        question = question.replace("{region}", r);
    }

    let (answer, masks, label, forgery_type) = match task {
        TaskTag::Det => {
            let l = source.label();
            let key = if l == Label::Real { "real" } else { "fake" };
            (TemplateBank::pick(&bank.answers[key], &mut rng).to_string(), vec![], Some(l), None)
        }
        TaskTag::Cls => {
            let a = if source == ForgeryType::Real {
                TemplateBank::pick(&bank.answers["real"], &mut rng).to_string()
            } else {
                TemplateBank::pick(&bank.answers["class"], &mut rng).replace("{type}", source.phrase())
            };
            (a, vec![], None, Some(source))
        }
        t if t.is_loc() => {
            let Some(m) = &inputs.artifact_mask else { return fail("artifact mask missing") };
            (TemplateBank::pick(&bank.answers["loc"], &mut rng).to_string(), vec![m.clone()], None, None)
        }
        t if t.is_toe() => {
            let Some(e) = inputs.explanation.as_deref().filter(|e| !e.trim().is_empty()) else {
                return fail("explanation text missing");
            };
            if e.contains(SEG_TOKEN) || e.contains(P_OPEN) {
                return fail("text-only explanation contains grounding markup");
            }
            (e.to_string(), vec![], None, None)
        }
        _ => {
            let Some(g) = &inputs.grounded else { return fail("grounded explanation missing") };
            if g.masks.is_empty() || !check_grounded_text(&g.text, g.masks.len()) {
                return fail("grounded explanation is malformed");
            }
            (g.text.clone(), g.masks.clone(), None, None)
        }
    };

    Ok(Sample {
        id: inputs.id.clone(),
        task,
        image: inputs.image.clone(),
        size: [inputs.height, inputs.width],
        question,
        bbox: inputs.bbox,
        box_norm: inputs.bbox.map(|b| b.normalized(inputs.width, inputs.height)),
        answer,
        masks,
        label,
        forgery_type,
        provenance: Provenance {
            seed: inputs.seed,
            prompt_hashes: inputs.prompt_hashes.clone(),
            dropped_concepts: inputs.dropped_concepts.clone(),
            source_forgery_type: task.needs_attribute_source().then_some(source),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum Issue {
    EmptyField { field: String },
    BoxPresenceMismatch,
    BoxOutOfBounds,
    BoxNormMismatch,
    SegMaskCountMismatch { seg: usize, masks: usize },
    UnbalancedMarkers,
    DimensionMismatch { index: usize },
    InvalidRle { index: usize },
    UnexpectedMasks,
    UnexpectedMarkup,
    MissingLabel,
    UnexpectedLabel,
    MissingForgeryType,
    UnexpectedForgeryType,
    NotAttributeManipulation,
    MissingRegionToken,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub id: String,
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

pub fn validate_sample(s: &Sample) -> ValidationReport {
    let mut issues = Vec::new();
    for (field, v) in [("id", &s.id), ("image", &s.image), ("question", &s.question), ("answer", &s.answer)] {
        if v.trim().is_empty() {
            issues.push(Issue::EmptyField { field: field.into() });
        }
    }
    let [h, w] = s.size;
    if s.task.is_box() != s.bbox.is_some() {
        issues.push(Issue::BoxPresenceMismatch);
    }
    if s.task.is_box() != s.question.contains("<bbox>") {
        issues.push(Issue::MissingRegionToken);
    }
    if let Some(b) = s.bbox {
        if !b.fits(w, h) || b.area() == 0 {
            issues.push(Issue::BoxOutOfBounds);
        }
        if s.box_norm != Some(b.normalized(w, h)) {
            issues.push(Issue::BoxNormMismatch);
        }
    } else if s.box_norm.is_some() {
        issues.push(Issue::BoxNormMismatch);
    }

    let seg = s.answer.matches(SEG_TOKEN).count();
    let opens = s.answer.matches(P_OPEN).count();
    let closes = s.answer.matches(P_CLOSE).count();
    if s.task.is_grounded() {
        if seg != s.masks.len() || s.masks.is_empty() {
            issues.push(Issue::SegMaskCountMismatch { seg, masks: s.masks.len() });
        }
        if !check_grounded_text(&s.answer, seg) {
            issues.push(Issue::UnbalancedMarkers);
        }
    } else {
        if !s.masks.is_empty() {
            issues.push(Issue::UnexpectedMasks);
        }
        if seg + opens + closes > 0 {
            issues.push(Issue::UnexpectedMarkup);
        }
    }
    for (index, m) in s.masks.iter().enumerate() {
        if m.size != s.size {
            issues.push(Issue::DimensionMismatch { index });
        } else if m.decode().is_err() {
            issues.push(Issue::InvalidRle { index });
        }
    }

    match (s.task, s.label) {
        (TaskTag::Det, None) => issues.push(Issue::MissingLabel),
        (TaskTag::Det, Some(_)) | (_, None) => {}
        (_, Some(_)) => issues.push(Issue::UnexpectedLabel),
    }
    match (s.task, s.forgery_type) {
        (TaskTag::Cls, None) => issues.push(Issue::MissingForgeryType),
        (TaskTag::Cls, Some(_)) | (_, None) => {}
        (_, Some(_)) => issues.push(Issue::UnexpectedForgeryType),
    }
    if s.task.needs_attribute_source() && s.provenance.source_forgery_type != Some(ForgeryType::AttributeManipulation) {
        issues.push(Issue::NotAttributeManipulation);
    }
    ValidationReport { id: s.id.clone(), issues }
}

/// How sample ids map to splits. Hashing uses the id up to its first `/`, so
/// all samples derived from one image share a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Integer bucket weights for train/dev/test.
    Hash { train: u32, dev: u32, test: u32 },
    /// Explicit group keys for dev and test; everything else is train.
    Explicit { dev: BTreeSet<String>, test: BTreeSet<String> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Hash { train: 80, dev: 10, test: 10 }
    }
}

pub fn split_group(id: &str) -> &str {
    id.split('/').next().unwrap_or(id)
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        match self {
            SplitSpec::Hash { train, dev, test } if (*train as u64 + *dev as u64 + *test as u64) == 0 => {
                Err(DatasetError::SplitSpec("all weights are zero".into()))
            }
            SplitSpec::Explicit { dev, test } if dev.intersection(test).next().is_some() => {
                Err(DatasetError::SplitSpec("a group is listed in both dev and test".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn assign(&self, id: &str) -> Split {
        let g = split_group(id);
        match self {
            SplitSpec::Hash { train, dev, test } => {
                let total = *train as u64 + *dev as u64 + *test as u64;
                let d = Sha256::digest(g.as_bytes());
                let b = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % total;
                if b < *train as u64 {
                    Split::Train
                } else if b < *train as u64 + *dev as u64 {
                    Split::Dev
                } else {
                    Split::Test
                }
            }
            SplitSpec::Explicit { dev, test } => {
                if dev.contains(g) {
                    Split::Dev
                } else if test.contains(g) {
                    Split::Test
                } else {
                    Split::Train
                }
            }
        }
    }
}

/// Per-split, per-task sample counts. The Det./Cls. table row counts distinct
/// images because both tasks are posed on the same pictures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<Split, BTreeMap<TaskTag, u64>>,
    pub det_cls_images: BTreeMap<Split, u64>,
}

impl CorpusStats {
    pub fn count(&self, split: Split, task: TaskTag) -> u64 {
        self.counts.get(&split).and_then(|m| m.get(&task)).copied().unwrap_or(0)
    }

    pub fn det_cls(&self, split: Split) -> u64 {
        self.det_cls_images.get(&split).copied().unwrap_or(0)
    }

    /// Sample count over all tasks.
    pub fn samples(&self, split: Split) -> u64 {
        self.counts.get(&split).map(|m| m.values().sum()).unwrap_or(0)
    }

    /// Table rows: Det./Cls. images followed by the nine explanation tasks.
    pub fn rows(&self) -> Vec<(String, [u64; 3])> {
        let mut rows = vec![("Det./Cls.".to_string(), Split::ALL.map(|s| self.det_cls(s)))];
        for t in &TaskTag::ALL[2..] {
            rows.push((t.label().to_string(), Split::ALL.map(|s| self.count(s, *t))));
        }
        rows
    }

    /// Column totals of the table, i.e. the sum of its rows.
    pub fn table_total(&self, split: Split) -> u64 {
        let i = Split::ALL.iter().position(|s| *s == split).expect("known split");
        self.rows().iter().map(|(_, c)| c[i]).sum()
    }

    pub fn render_table(&self) -> String {
        let mut rows = self.rows();
        rows.push(("Total".into(), Split::ALL.map(|s| self.table_total(s))));
        let head = ["Task".to_string(), "Training".into(), "Dev.".into(), "Test".into()];
        let cells: Vec<[String; 4]> = std::iter::once(head)
            .chain(rows.into_iter().map(|(n, c)| [n, c[0].to_string(), c[1].to_string(), c[2].to_string()]))
            .collect();
        let widths: Vec<usize> = (0..4).map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let rule: String = "-".repeat(widths.iter().sum::<usize>() + 3 * 3);
        for (k, r) in cells.iter().enumerate() {
            let line = format!(
                "{:<w0$} | {:>w1$} | {:>w2$} | {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            out.push_str(line.trim_end());
            out.push('\n');
            if k == 0 || k == cells.len() - 2 {
                out.push_str(&rule);
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows()
            .into_iter()
            .map(|(task, c)| serde_json::json!({"task": task, "train": c[0], "dev": c[1], "test": c[2]}))
            .collect();
        serde_json::json!({
            "rows": rows,
            "total": {"train": self.table_total(Split::Train), "dev": self.table_total(Split::Dev), "test": self.table_total(Split::Test)},
            "counts": self.counts,
            "det_cls_images": self.det_cls_images,
        })
    }
}

#[derive(Default)]
struct StatsBuilder {
    stats: CorpusStats,
    images: BTreeMap<Split, HashSet<String>>,
}

impl StatsBuilder {
    fn add(&mut self, split: Split, task: TaskTag, image: &str) {
        *self.stats.counts.entry(split).or_default().entry(task).or_default() += 1;
        if matches!(task, TaskTag::Det | TaskTag::Cls) {
            let set = self.images.entry(split).or_default();
            if !set.contains(image) {
                set.insert(image.to_string());
            }
        }
    }

    fn finish(mut self) -> CorpusStats {
        for (s, set) in self.images {
            self.stats.det_cls_images.insert(s, set.len() as u64);
        }
        self.stats
    }
}

pub fn corpus_file(root: &Path, split: Split, task: TaskTag) -> PathBuf {
    root.join(split.as_str()).join(format!("{}.jsonl", task.as_str().to_ascii_lowercase()))
}

/// Writes one JSONL file per non-empty (task, split) under `root/<split>/`,
/// samples sorted by id, and returns the statistics.
pub fn assemble_corpus(samples: &[Sample], spec: &SplitSpec, root: &Path) -> Result<CorpusStats, DatasetError> {
    spec.validate()?;
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(DatasetError::DuplicateId(s.id.clone()));
        }
    }
    let mut groups: BTreeMap<(Split, TaskTag), Vec<&Sample>> = BTreeMap::new();
    let mut b = StatsBuilder::default();
    for s in samples {
        let split = spec.assign(&s.id);
        groups.entry((split, s.task)).or_default().push(s);
        b.add(split, s.task, &s.image);
    }
    for ((split, task), mut list) in groups {
        list.sort_by(|a, b| a.id.cmp(&b.id));
        let path = corpus_file(root, split, task);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        for s in list {
            f.write_all(s.to_json_line().as_bytes())?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    Ok(b.finish())
}

#[derive(Deserialize)]
struct StatsRecord {
    task: TaskTag,
    image: String,
}

/// Counts the samples under `root/<split>/*.jsonl`. Only `task` and `image`
/// are read from each line.
pub fn corpus_stats(root: &Path) -> Result<CorpusStats, DatasetError> {
    if !root.is_dir() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} is not a directory", root.display())).into());
    }
    let mut b = StatsBuilder::default();
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for path in files {
            let reader = BufReader::new(fs::File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: StatsRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                b.add(split, r.task, &r.image);
            }
        }
    }
    Ok(b.finish())
}

/// Reads every sample of one JSONL file.
pub fn read_samples(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{parse_step4, to_interleaved};
    use crate::fict::ConceptId;
    use crate::mask::{rle_encode, BitMask};

    fn base(id: &str, ft: ForgeryType) -> SampleInputs {
        SampleInputs { id: id.into(), image: "img/a.png".into(), width: 8, height: 6, seed: 3, forgery_type: Some(ft), ..Default::default() }
    }

    fn five_span() -> Interleaved {
        let raw = "A <0> one </0>, <1> two </1>, <2> three </2>, <3> four </3> and <4> five </4>.";
        let ids: Vec<ConceptId> = (0..5).map(|i| ConceptId::new(format!("c{i}"))).collect();
        let map = ids.iter().cloned().enumerate().collect();
        let n = parse_step4(raw, &map).unwrap();
        let masks = ids.iter().enumerate().map(|(i, c)| (c.clone(), BitMask::from_fn(8, 6, |x, _| x == i))).collect();
        to_interleaved(&n, &masks).unwrap()
    }

    #[test]
    fn task_tags_round_trip() {
        assert_eq!(TaskTag::ALL.len(), 11);
        for t in TaskTag::ALL {
            assert_eq!(t.as_str().parse::<TaskTag>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{t}\""));
        }
        assert_eq!("i-age".parse::<TaskTag>().unwrap(), TaskTag::IAge);
    }

    #[test]
    fn bank_has_five_paraphrases_everywhere() {
        let b = TemplateBank::default_bank();
        assert_eq!(b.version, "v1");
        assert!(TaskTag::ALL.iter().all(|t| b.questions[t].len() >= 5));
    }

    #[test]
    fn det_real_sample() {
        let s = make_sample(TaskTag::Det, &base("a/det", ForgeryType::Real), &TemplateBank::default_bank()).unwrap();
        assert_eq!(s.label, Some(Label::Real));
        assert!(TemplateBank::default_bank().answers["real"].contains(&s.answer));
        assert!(validate_sample(&s).is_valid());
    }

    #[test]
    fn question_choice_is_seeded() {
        let bank = TemplateBank::default_bank();
        let q = |seed, id: &str| {
            let mut i = base(id, ForgeryType::Real);
            i.seed = seed;
            make_sample(TaskTag::Cls, &i, &bank).unwrap().question
        };
        assert_eq!(q(1, "x/cls"), q(1, "x/cls"));
        let distinct: BTreeSet<String> = (0..40).map(|k| q(k, "x/cls")).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn i_age_from_five_spans() {
        let mut i = base("a/i_age", ForgeryType::AttributeManipulation);
        i.grounded = Some(five_span());
        let s = make_sample(TaskTag::IAge, &i, &TemplateBank::default_bank()).unwrap();
        assert_eq!(s.answer.matches("[SEG]").count(), 5);
        assert_eq!(s.masks.len(), 5);
        assert!(validate_sample(&s).is_valid(), "{:?}", validate_sample(&s));
    }

    #[test]
    fn inconsistent_inputs_are_rejected() {
        let bank = TemplateBank::default_bank();
        let mut i = base("a/b_toe", ForgeryType::AttributeManipulation);
        i.explanation = Some("Looks smooth.".into());
        assert!(matches!(make_sample(TaskTag::BToe, &i, &bank), Err(DatasetError::InconsistentInputs { .. })));
        i.bbox = Some(BBox { x0: 0, y0: 0, x1: 4, y1: 4 });
        let s = make_sample(TaskTag::BToe, &i, &bank).unwrap();
        assert_eq!(s.box_norm, Some([0.0, 0.0, 0.5, 0.667]));
        assert!(validate_sample(&s).is_valid());
        let r = base("a/r", ForgeryType::AttributeManipulation);
        assert!(make_sample(TaskTag::RToe, &r, &bank).is_err());
        let mut swap = base("a/i_loc", ForgeryType::IdentitySwap);
        swap.artifact_mask = Some(rle_encode(&BitMask::zeros(8, 6)));
        assert!(make_sample(TaskTag::ILoc, &swap, &bank).is_err());
    }

    #[test]
    fn validation_flags_seg_and_dims() {
        let mut i = base("a/i_age", ForgeryType::AttributeManipulation);
        i.grounded = Some(five_span());
        let good = make_sample(TaskTag::IAge, &i, &TemplateBank::default_bank()).unwrap();
        let mut s = good.clone();
        s.masks.truncate(4);
        assert!(validate_sample(&s).issues.contains(&Issue::SegMaskCountMismatch { seg: 5, masks: 4 }));
        let mut s = good.clone();
        s.masks[2] = rle_encode(&BitMask::zeros(5, 5));
        assert!(validate_sample(&s).issues.contains(&Issue::DimensionMismatch { index: 2 }));
        let mut s = good;
        s.answer = s.answer.replacen("</p>", "", 1);
        assert!(validate_sample(&s).issues.contains(&Issue::UnbalancedMarkers));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut i = base("a/b_age", ForgeryType::AttributeManipulation);
        i.grounded = Some(five_span());
        i.bbox = Some(BBox { x0: 1, y0: 1, x1: 7, y1: 5 });
        let s = make_sample(TaskTag::BAge, &i, &TemplateBank::default_bank()).unwrap();
        let back: Sample = serde_json::from_str(&s.to_json_line()).unwrap();
        assert_eq!(back, s);
        let v: serde_json::Value = serde_json::from_str(&s.to_json_line()).unwrap();
        assert_eq!(v["box"], serde_json::json!([1, 1, 7, 5]));
    }

    fn corpus() -> Vec<Sample> {
        let bank = TemplateBank::default_bank();
        (0..10)
            .flat_map(|k| {
                let ft = if k % 2 == 0 { ForgeryType::Real } else { ForgeryType::AttributeManipulation };
                let mut det = base(&format!("img{k}/det"), ft);
                det.image = format!("img{k}.png");
                let mut cls = det.clone();
                cls.id = format!("img{k}/cls");
                [make_sample(TaskTag::Det, &det, &bank).unwrap(), make_sample(TaskTag::Cls, &cls, &bank).unwrap()]
            })
            .collect()
    }

    #[test]
    fn assemble_is_order_invariant_and_self_consistent() {
        let samples = corpus();
        let mut shuffled = samples.clone();
        shuffled.reverse();
        shuffled.rotate_left(7);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = assemble_corpus(&samples, &SplitSpec::default(), a.path()).unwrap();
        let sb = assemble_corpus(&shuffled, &SplitSpec::default(), b.path()).unwrap();
        assert_eq!(sa, sb);
        for split in Split::ALL {
            for t in [TaskTag::Det, TaskTag::Cls] {
                let (pa, pb) = (corpus_file(a.path(), split, t), corpus_file(b.path(), split, t));
                assert_eq!(pa.exists(), pb.exists());
                if pa.exists() {
                    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
                    for s in read_samples(&pa).unwrap() {
                        assert_eq!(spec_split(&s.id), split);
                        assert!(samples.contains(&s));
                    }
                }
            }
            // Det and Cls of one image always share a split.
            assert_eq!(sa.count(split, TaskTag::Det), sa.count(split, TaskTag::Cls));
            assert_eq!(sa.det_cls(split), sa.count(split, TaskTag::Det));
        }
        assert_eq!(corpus_stats(a.path()).unwrap(), sa);
        assert_eq!(Split::ALL.iter().map(|s| sa.samples(*s)).sum::<u64>(), 20);
    }

    fn spec_split(id: &str) -> Split {
        SplitSpec::default().assign(id)
    }

    #[test]
    fn duplicate_ids_fail() {
        let mut s = corpus();
        s.push(s[0].clone());
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(assemble_corpus(&s, &SplitSpec::default(), d.path()), Err(DatasetError::DuplicateId(_))));
    }

    #[test]
    fn empty_corpus_has_zero_stats() {
        let d = tempfile::tempdir().unwrap();
        let s = corpus_stats(d.path()).unwrap();
        assert!(Split::ALL.iter().all(|sp| s.table_total(*sp) == 0));
        assert!(s.render_table().contains("Total"));
    }

    #[test]
    fn manual_three_file_fixture() {
        let d = tempfile::tempdir().unwrap();
        let write = |split: &str, name: &str, lines: &[(&str, &str)]| {
            let p = d.path().join(split);
            fs::create_dir_all(&p).unwrap();
            let body: String = lines.iter().map(|(t, i)| format!("{{\"task\":\"{t}\",\"image\":\"{i}\"}}\n")).collect();
            fs::write(p.join(name), body).unwrap();
        };
        write("train", "det.jsonl", &[("DET", "a"), ("DET", "b"), ("DET", "c")]);
        write("train", "cls.jsonl", &[("CLS", "a"), ("CLS", "b"), ("CLS", "c")]);
        write("test", "r_age.jsonl", &[("R_AGE", "a"), ("R_AGE", "a")]);
        let s = corpus_stats(d.path()).unwrap();
        assert_eq!(s.det_cls(Split::Train), 3);
        assert_eq!(s.samples(Split::Train), 6);
        assert_eq!(s.count(Split::Test, TaskTag::RAge), 2);
        assert_eq!(s.table_total(Split::Train), 3);
        assert_eq!(s.table_total(Split::Test), 2);
        let bad = d.path().join("dev");
        fs::create_dir_all(&bad).unwrap();
        fs::write(bad.join("x.jsonl"), "{\"task\":\"DET\"}\n").unwrap();
        assert!(matches!(corpus_stats(d.path()), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn explicit_split_lists() {
        let spec = SplitSpec::Explicit { dev: ["a".to_string()].into(), test: ["b".to_string()].into() };
        assert_eq!(spec.assign("a/det"), Split::Dev);
        assert_eq!(spec.assign("b"), Split::Test);
        assert_eq!(spec.assign("c/x"), Split::Train);
        let bad = SplitSpec::Explicit { dev: ["a".to_string()].into(), test: ["a".to_string()].into() };
        assert!(bad.validate().is_err());
    }
}
