//! Disk-backed annotation pipeline. Every stage reads the JSON written by
//! the stages before it under one output directory and writes its own
//! per-image files, so any stage can be deleted and re-run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{
    coverage_stats, diff_grayscale, generate_candidate_boxes, regional_artifact_masks, retain_boxes, select_artifact_concepts,
    threshold_top_fraction, top_k_count, ArtifactError, BoxParams, ConceptArtifactStats, GrayMode, ImagePair, RetainedBox,
    SelectionParams,
};
use crate::dataset::{
    assemble_corpus, make_sample, validate_sample, CorpusStats, DatasetError, ForgeryType, Issue, Sample, SampleInputs, SplitSpec,
    TaskTag, TemplateBank,
};
use crate::explain::{
    build_step3_prompt, build_step4_prompt, parse_step3, parse_step4, sha256_hex, step4_index_map, to_interleaved,
    AtomicExplanation, BackendConfig, ChatClient, ChatError, ChatMessage, ExplainError, Interleaved,
};
use crate::fict::{load_manifest, ConceptId, ConceptKind, ConceptTree, FictError, DEFAULT_MANIFEST};
use crate::fixtures::synthetic_face;
use crate::imageio::{encode_gray_png, encode_rgb_png, load_rgb, mask_to_png};
use crate::mask::{rle_encode, BBox, BitMask, MaskError, RleMask};
use crate::region::{all_region_masks, LandmarkSet, ParsingMap, RegionError, RuleSet, DEFAULT_NUM_CLASSES, DEFAULT_NUM_LANDMARKS, DEFAULT_RULES};
use crate::rng::derive_seed;

pub const STAGE_MASKS: &str = "masks";
pub const STAGE_ARTIFACTS: &str = "artifacts";
pub const STAGE_SELECTION: &str = "selection";
pub const STAGE_BOXES: &str = "boxes";
pub const STAGE_ANNOTATIONS: &str = "annotations";
pub const STAGE_CORPUS: &str = "corpus";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("image {id}: {source}")]
    Region { id: String, source: RegionError },
    #[error("image {id}: {source}")]
    Artifact { id: String, source: ArtifactError },
    #[error("image {id}: {source}")]
    Mask { id: String, source: MaskError },
    #[error("image {id}: {source}")]
    Chat { id: String, source: ChatError },
    #[error("image {id}: {source}")]
    Explain { id: String, source: ExplainError },
    #[error(transparent)]
    Fict(#[from] FictError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0} invalid sample(s), first: {1}")]
    InvalidSamples(usize, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Input { .. } => "input",
            PipelineError::Region { .. } => "region",
            PipelineError::Artifact { .. } => "artifact",
            PipelineError::Mask { .. } => "mask",
            PipelineError::Chat { .. } => "chat",
            PipelineError::Explain { .. } => "explain",
            PipelineError::Fict(_) => "concept_tree",
            PipelineError::Dataset(_) => "dataset",
            PipelineError::InvalidSamples(..) => "invalid_samples",
            PipelineError::Io(_) => "io",
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Single source of truth for a run; serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Concept manifest; the bundled tree when absent.
    pub manifest: Option<PathBuf>,
    /// Geometry rules; the bundled rules when absent.
    pub rules: Option<PathBuf>,
    pub num_landmarks: usize,
    pub num_classes: u8,
    pub gray_mode: GrayMode,
    pub selection: SelectionParams,
    pub boxes: BoxParams,
    /// Also pose box tasks on the bounding boxes of selected parent regions.
    pub parent_boxes: bool,
    pub backend: BackendConfig,
    /// Question template bank; the bundled `v1` bank when absent.
    pub templates: Option<PathBuf>,
    pub split: SplitSpec,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: None,
            rules: None,
            num_landmarks: DEFAULT_NUM_LANDMARKS,
            num_classes: DEFAULT_NUM_CLASSES,
            gray_mode: GrayMode::Mean,
            selection: SelectionParams::default(),
            boxes: BoxParams::default(),
            parent_boxes: true,
            backend: BackendConfig::default(),
            templates: None,
            split: SplitSpec::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| input_err(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// The config as echoed into output directories. `jobs` is left out
    /// because it cannot change any output byte.
    pub fn provenance_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("jobs");
        }
        serde_json::to_string_pretty(&v).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let b = &self.boxes;
        if b.n == 0 || !(b.min_side_frac > 0.0 && b.min_side_frac < 1.0) || !(b.encompass_frac > 0.0 && b.encompass_frac <= 1.0) || b.min_concepts == 0 {
            return Err(PipelineError::Config(format!("invalid box parameters {b:?}")));
        }
        self.split.validate()?;
        for p in [&self.manifest, &self.rules, &self.templates].into_iter().flatten() {
            if !p.exists() {
                return Err(PipelineError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input { path: path.display().to_string(), message: e.to_string() }
}

/// Loaded static resources of a run.
pub struct Resources {
    pub tree: ConceptTree,
    pub rules: RuleSet,
    pub bank: TemplateBank,
}

impl Resources {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let read = |p: &Option<PathBuf>, default: &str| -> Result<String> {
            match p {
                Some(p) => fs::read_to_string(p).map_err(|e| input_err(p, e)),
                None => Ok(default.to_string()),
            }
        };
        let tree = load_manifest(&read(&cfg.manifest, DEFAULT_MANIFEST)?)?;
        let rules = RuleSet::parse(&read(&cfg.rules, DEFAULT_RULES)?).map_err(|e| PipelineError::Config(e.to_string()))?;
        let bank = TemplateBank::parse(&read(&cfg.templates, crate::dataset::DEFAULT_TEMPLATES)?)?;
        Ok(Resources { tree, rules, bank })
    }
}

/// One aligned real/fake pair with its annotations. Paths are relative to
/// the list file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub real: PathBuf,
    pub fake: PathBuf,
    pub landmarks: PathBuf,
    pub parsing: PathBuf,
    pub forgery_type: ForgeryType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageList {
    pub images: Vec<ImageRecord>,
}

impl ImageList {
    /// Reads the list and resolves its paths against the list's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
        let mut list: ImageList = serde_json::from_str(&text).map_err(|e| input_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut list.images {
            for p in [&mut r.real, &mut r.fake, &mut r.landmarks, &mut r.parsing] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        let mut ids = BTreeSet::new();
        for r in &list.images {
            if r.id.is_empty() || r.id.contains('/') || !ids.insert(r.id.as_str()) {
                return Err(input_err(path, format!("image id {:?} is empty, contains '/' or repeats", r.id)));
            }
        }
        list.images.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(list)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub masks: BTreeMap<ConceptId, RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactReport {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub top_fraction: f64,
    /// `ceil(top_fraction * W * H)`.
    pub k: usize,
    pub whole_area: u64,
    pub whole: RleMask,
    pub stats: Vec<ConceptArtifactStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub atomic: BTreeSet<ConceptId>,
    pub parent: BTreeSet<ConceptId>,
    pub stats: Vec<ConceptArtifactStats>,
    /// Regional artifact masks of every selected concept.
    pub regional: BTreeMap<ConceptId, RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxReport {
    pub id: String,
    pub seed: u64,
    pub candidates: Vec<BBox>,
    pub retained: Vec<RetainedBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scope {
    Image,
    Region { concept: ConceptId },
    /// Bounding box of a selected parent region.
    ParentBox { concept: ConceptId, bbox: BBox },
    /// Retained random box.
    RandomBox { index: usize, bbox: BBox },
}

impl Scope {
    fn bbox(&self) -> Option<BBox> {
        match self {
            Scope::ParentBox { bbox, .. } | Scope::RandomBox { bbox, .. } => Some(*bbox),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step3Record {
    pub prompt_hashes: Vec<String>,
    pub explanations: Vec<AtomicExplanation>,
    /// Concepts still missing after the one re-prompt.
    pub dropped: Vec<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeRecord {
    pub scope: Scope,
    pub prompt_hash: String,
    pub concepts: Vec<ConceptId>,
    pub interleaved: Interleaved,
    pub plain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedNarrative {
    pub scope: Scope,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub id: String,
    pub step3: Option<Step3Record>,
    pub narratives: Vec<NarrativeRecord>,
    pub rejected: Vec<RejectedNarrative>,
}

fn stage_dir(out: &Path, stage: &str) -> PathBuf {
    out.join(stage)
}

fn image_file(out: &Path, stage: &str, id: &str) -> PathBuf {
    stage_dir(out, stage).join(format!("{id}.json"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut text = serde_json::to_string_pretty(v).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| input_err(path, e))
}

/// Reads one image's output of an earlier stage.
pub fn read_stage<T: DeserializeOwned>(out: &Path, stage: &str, id: &str) -> Result<T> {
    read_json(&image_file(out, stage, id))
}

fn echo_config(cfg: &PipelineConfig, out: &Path, stage: &str) -> Result<()> {
    let dir = stage_dir(out, stage);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_ECHO), cfg.provenance_json() + "\n")?;
    Ok(())
}

/// Runs `f` over the images on `jobs` threads; results keep input order.
fn for_each_image<R: Send>(cfg: &PipelineConfig, images: &[ImageRecord], f: impl Fn(&ImageRecord) -> Result<R> + Sync) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| images.par_iter().map(&f).collect())
}

fn load_pair(r: &ImageRecord) -> Result<ImagePair> {
    let real = load_rgb(&r.real).map_err(|e| input_err(&r.real, e))?;
    let fake = load_rgb(&r.fake).map_err(|e| input_err(&r.fake, e))?;
    ImagePair::new(real, fake).map_err(|source| PipelineError::Artifact { id: r.id.clone(), source })
}

fn decode_all(id: &str, m: &BTreeMap<ConceptId, RleMask>) -> Result<BTreeMap<ConceptId, BitMask>> {
    m.iter()
        .map(|(k, v)| Ok((k.clone(), v.decode().map_err(|source| PipelineError::Mask { id: id.to_string(), source })?)))
        .collect()
}

/// Region masks of every concept for one image.
pub fn derive_masks(cfg: &PipelineConfig, res: &Resources, r: &ImageRecord) -> Result<MaskSet> {
    let fake = load_rgb(&r.fake).map_err(|e| input_err(&r.fake, e))?;
    let (w, h) = (fake.width() as usize, fake.height() as usize);
    let text = fs::read_to_string(&r.landmarks).map_err(|e| input_err(&r.landmarks, e))?;
    let lm = LandmarkSet::<f64>::from_json(&text, w, h, cfg.num_landmarks).map_err(|source| PipelineError::Region { id: r.id.clone(), source })?;
    let pm = ParsingMap::load(&r.parsing, cfg.num_classes).map_err(|source| PipelineError::Region { id: r.id.clone(), source })?;
    if pm.width() != w || pm.height() != h {
        return Err(input_err(&r.parsing, format!("parsing map is {}x{}, image is {w}x{h}", pm.width(), pm.height())));
    }
    let masks = all_region_masks(&res.tree, &res.rules, &lm, &pm).map_err(|source| PipelineError::Region { id: r.id.clone(), source })?;
    Ok(MaskSet { id: r.id.clone(), width: w, height: h, masks: masks.iter().map(|(k, m)| (k.clone(), rle_encode(m))).collect() })
}

/// Whole-image artifact mask and per-concept coverage for one image.
pub fn extract_artifacts(cfg: &PipelineConfig, res: &Resources, r: &ImageRecord, masks: &MaskSet) -> Result<ArtifactReport> {
    let pair = load_pair(r)?;
    let art = |source| PipelineError::Artifact { id: r.id.clone(), source };
    let gray = diff_grayscale::<f64>(&pair, cfg.gray_mode);
    let whole = threshold_top_fraction(&gray, cfg.selection.top_fraction).map_err(art)?;
    let regions = decode_all(&r.id, &masks.masks)?;
    let stats = coverage_stats(&res.tree, &regions, &whole).map_err(art)?;
    Ok(ArtifactReport {
        id: r.id.clone(),
        width: pair.width(),
        height: pair.height(),
        top_fraction: cfg.selection.top_fraction,
        k: top_k_count(cfg.selection.top_fraction, pair.width() * pair.height()),
        whole_area: whole.count_ones(),
        whole: rle_encode(&whole),
        stats,
    })
}

pub fn select_concepts(cfg: &PipelineConfig, res: &Resources, masks: &MaskSet, art: &ArtifactReport) -> Result<SelectionReport> {
    let e = |source| PipelineError::Artifact { id: art.id.clone(), source };
    let sel = select_artifact_concepts(&art.stats, &cfg.selection, &res.tree).map_err(e)?;
    let whole = art.whole.decode().map_err(|source| PipelineError::Mask { id: art.id.clone(), source })?;
    let chosen: BTreeMap<ConceptId, BitMask> = decode_all(&art.id, &masks.masks)?
        .into_iter()
        .filter(|(k, _)| sel.atomic.contains(k) || sel.parent.contains(k))
        .collect();
    let regional = regional_artifact_masks(&chosen, &whole).map_err(e)?;
    Ok(SelectionReport {
        id: art.id.clone(),
        width: art.width,
        height: art.height,
        atomic: sel.atomic,
        parent: sel.parent,
        stats: sel.stats,
        regional: regional.iter().map(|(k, m)| (k.clone(), rle_encode(m))).collect(),
    })
}

/// Random boxes seeded by run seed and image id, kept when they encompass
/// enough selected atomic concepts.
pub fn augment_boxes(cfg: &PipelineConfig, sel: &SelectionReport) -> Result<BoxReport> {
    let seed = derive_seed(cfg.seed, &sel.id);
    let candidates = generate_candidate_boxes(seed, cfg.boxes.n, sel.width, sel.height, cfg.boxes.min_side_frac);
    let atomic: BTreeMap<ConceptId, BitMask> =
        decode_all(&sel.id, &sel.regional)?.into_iter().filter(|(k, _)| sel.atomic.contains(k)).collect();
    let retained = retain_boxes(&candidates, &atomic, cfg.boxes.min_concepts, cfg.boxes.encompass_frac);
    Ok(BoxReport { id: sel.id.clone(), seed, candidates, retained })
}

fn display(tree: &ConceptTree, id: &ConceptId) -> String {
    tree.display_name(id).unwrap_or(id.as_str()).to_string()
}

/// Step 3 with one re-prompt for missing areas, then Step 4 per scope.
pub fn annotate_image(
    cfg: &PipelineConfig,
    res: &Resources,
    client: &ChatClient,
    r: &ImageRecord,
    sel: &SelectionReport,
    boxes: &BoxReport,
) -> Result<AnnotationReport> {
    let mut report = AnnotationReport { id: r.id.clone(), step3: None, narratives: vec![], rejected: vec![] };
    if r.forgery_type != ForgeryType::AttributeManipulation || sel.atomic.is_empty() {
        return Ok(report);
    }
    let chat_err = |source| PipelineError::Chat { id: r.id.clone(), source };
    let ex_err = |source| PipelineError::Explain { id: r.id.clone(), source };
    let order: Vec<ConceptId> = res.tree.nodes().iter().map(|n| n.id.clone()).filter(|id| sel.atomic.contains(id)).collect();

    let pair = load_pair(r)?;
    let whole = decode_all(&r.id, &sel.regional)?;
    let mut artifact = BitMask::zeros(sel.width, sel.height);
    if let Some(root) = whole.get(res.tree.root()) {
        artifact = root.clone();
    }
    let images = vec![
        encode_rgb_png(pair.fake()).map_err(|e| input_err(&r.fake, e))?,
        if artifact.count_ones() > 0 { mask_to_png(&artifact) } else { encode_gray_png(sel.width, sel.height, &vec![0; sel.width * sel.height]).map_err(|e| input_err(&r.fake, e))? },
    ];

    let mut hashes = Vec::new();
    let ask = |concepts: &[ConceptId]| -> Result<(String, String)> {
        let names: Vec<String> = concepts.iter().map(|c| display(&res.tree, c)).collect();
        let prompt = build_step3_prompt(&names).map_err(ex_err)?;
        let msgs = [ChatMessage::user(prompt)];
        let raw = client.chat(&msgs, &images).map_err(chat_err)?;
        Ok((sha256_hex(serde_json::to_string(&msgs).expect("messages serialize").as_bytes()), raw))
    };
    let (h, raw) = ask(&order)?;
    hashes.push(h);
    let (mut explanations, mut dropped) = match parse_step3(&raw, &order, &res.tree) {
        Ok(v) => (v, vec![]),
        Err(ExplainError::MissingConcepts { missing, found }) => (found, missing),
        Err(ExplainError::NoParsableLines) => (vec![], order.clone()),
        Err(e) => return Err(ex_err(e)),
    };
    if !dropped.is_empty() {
        let (h, raw) = ask(&dropped)?;
        hashes.push(h);
        let more = match parse_step3(&raw, &dropped, &res.tree) {
            Ok(v) => v,
            Err(ExplainError::MissingConcepts { found, .. }) => found,
            Err(ExplainError::NoParsableLines) => vec![],
            Err(e) => return Err(ex_err(e)),
        };
        let got: BTreeSet<ConceptId> = more.iter().map(|e| e.concept.clone()).collect();
        dropped.retain(|c| !got.contains(c));
        explanations.extend(more);
        explanations.sort_by_key(|e| order.iter().position(|c| *c == e.concept));
        if !dropped.is_empty() {
            log::warn!("{}: dropping {} concept(s) missing after re-prompt", r.id, dropped.len());
        }
    }
    let by_concept: BTreeMap<ConceptId, AtomicExplanation> = explanations.iter().map(|e| (e.concept.clone(), e.clone())).collect();
    report.step3 = Some(Step3Record { prompt_hashes: hashes, explanations: explanations.clone(), dropped });

    let mut scopes: Vec<(Scope, Vec<ConceptId>)> = vec![(Scope::Image, order.clone())];
    for p in res.tree.nodes().iter().filter(|n| n.kind == ConceptKind::Parent && sel.parent.contains(&n.id)) {
        if p.id == *res.tree.root() {
            continue;
        }
        let desc: BTreeSet<ConceptId> = res.tree.atomic_descendants(&p.id)?.into_iter().collect();
        let inside: Vec<ConceptId> = order.iter().filter(|c| desc.contains(*c)).cloned().collect();
        scopes.push((Scope::Region { concept: p.id.clone() }, inside.clone()));
        if cfg.parent_boxes {
            let region = decode_all(&r.id, &BTreeMap::from([(p.id.clone(), sel.regional[&p.id].clone())]))?;
            if let Some(b) = region[&p.id].measure().bbox {
                scopes.push((Scope::ParentBox { concept: p.id.clone(), bbox: b }, inside));
            }
        }
    }
    for (index, rb) in boxes.retained.iter().enumerate() {
        let inside: Vec<ConceptId> = order.iter().filter(|c| rb.concepts.contains(c)).cloned().collect();
        scopes.push((Scope::RandomBox { index, bbox: rb.bbox }, inside));
    }

    for (scope, concepts) in scopes {
        let ex: Vec<AtomicExplanation> = concepts.iter().filter_map(|c| by_concept.get(c).cloned()).collect();
        if ex.is_empty() {
            continue;
        }
        let prompt = build_step4_prompt(&ex).map_err(ex_err)?;
        let msgs = [ChatMessage::user(prompt)];
        let raw = client.chat(&msgs, &[]).map_err(chat_err)?;
        let prompt_hash = sha256_hex(serde_json::to_string(&msgs).expect("messages serialize").as_bytes());
        let parsed = parse_step4(&raw, &step4_index_map(&ex)).and_then(|n| {
            if n.grounded().next().is_none() {
                return Err(ExplainError::EmptyInput);
            }
            to_interleaved(&n, &whole).map(|i| (i, n.plain_text()))
        });
        match parsed {
            Ok((interleaved, plain)) => report.narratives.push(NarrativeRecord {
                scope,
                prompt_hash,
                concepts: ex.iter().map(|e| e.concept.clone()).collect(),
                interleaved,
                plain: plain.trim().to_string(),
            }),
            Err(e) => report.rejected.push(RejectedNarrative { scope, error: e.to_string() }),
        }
    }
    Ok(report)
}

/// Every sample one image contributes.
pub fn image_samples(
    cfg: &PipelineConfig,
    res: &Resources,
    r: &ImageRecord,
    art: &ArtifactReport,
    sel: &SelectionReport,
    ann: &AnnotationReport,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let base = SampleInputs { width: art.width, height: art.height, seed: cfg.seed, ..Default::default() };
    let path = |p: &Path| p.display().to_string();
    for (which, image, ft) in [("real", &r.real, ForgeryType::Real), ("fake", &r.fake, r.forgery_type)] {
        for task in [TaskTag::Det, TaskTag::Cls] {
            let i = SampleInputs { id: format!("{}/{}/{which}", r.id, task.as_str().to_lowercase()), image: path(image), forgery_type: Some(ft), ..base.clone() };
            out.push(make_sample(task, &i, &res.bank)?);
        }
    }
    if r.forgery_type != ForgeryType::AttributeManipulation {
        return Ok(out);
    }
    let fake = path(&r.fake);
    let dropped: Vec<String> = ann.step3.as_ref().map(|s| s.dropped.iter().map(|c| c.to_string()).collect()).unwrap_or_default();
    let step3_hashes: Vec<String> = ann.step3.as_ref().map(|s| s.prompt_hashes.clone()).unwrap_or_default();
    let inputs = |id: String| SampleInputs { id, image: fake.clone(), forgery_type: Some(r.forgery_type), dropped_concepts: dropped.clone(), ..base.clone() };
    let mask_err = |source| PipelineError::Mask { id: r.id.clone(), source };

    let whole = art.whole.decode().map_err(mask_err)?;
    if whole.count_ones() > 0 {
        let mut i = inputs(format!("{}/i_loc", r.id));
        i.artifact_mask = Some(art.whole.clone());
        out.push(make_sample(TaskTag::ILoc, &i, &res.bank)?);
    }
    for (concept, rle) in &sel.regional {
        if !sel.parent.contains(concept) || concept == res.tree.root() || rle.area() == 0 {
            continue;
        }
        let mut i = inputs(format!("{}/r_loc/{concept}", r.id));
        i.region = Some(display(&res.tree, concept));
        i.artifact_mask = Some(rle.clone());
        out.push(make_sample(TaskTag::RLoc, &i, &res.bank)?);
    }
    for n in &ann.narratives {
        let (toe, age, loc, suffix) = match &n.scope {
            Scope::Image => (TaskTag::IToe, TaskTag::IAge, None, "i".to_string()),
            Scope::Region { concept } => (TaskTag::RToe, TaskTag::RAge, None, format!("r/{concept}")),
            Scope::ParentBox { concept, .. } => (TaskTag::BToe, TaskTag::BAge, Some(TaskTag::BLoc), format!("b/{concept}")),
            Scope::RandomBox { index, .. } => (TaskTag::BToe, TaskTag::BAge, Some(TaskTag::BLoc), format!("b/random{index:02}")),
        };
        let region = match &n.scope {
            Scope::Region { concept } => Some(display(&res.tree, concept)),
            _ => None,
        };
        let mut hashes = step3_hashes.clone();
        hashes.push(n.prompt_hash.clone());
        let mk = |task: TaskTag| {
            let mut i = inputs(format!("{}/{}/{suffix}", r.id, task.as_str().to_lowercase()));
            i.region = region.clone();
            i.bbox = n.scope.bbox();
            i.prompt_hashes = hashes.clone();
            i
        };
        let mut t = mk(toe);
        t.explanation = Some(n.plain.clone());
        out.push(make_sample(toe, &t, &res.bank)?);
        let mut a = mk(age);
        a.grounded = Some(n.interleaved.clone());
        out.push(make_sample(age, &a, &res.bank)?);
        if let (Some(loc), Some(b)) = (loc, n.scope.bbox()) {
            let inside = whole.intersect(&BitMask::from_box(whole.width(), whole.height(), &b)).map_err(mask_err)?;
            if inside.count_ones() > 0 {
                let mut l = mk(loc);
                l.prompt_hashes = vec![];
                l.artifact_mask = Some(rle_encode(&inside));
                out.push(make_sample(loc, &l, &res.bank)?);
            }
        }
    }
    Ok(out)
}

/// Summary of one full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub images: usize,
    pub samples: usize,
    pub rejected_narratives: usize,
    pub dropped_concepts: usize,
    pub stats: CorpusStats,
}

pub fn run_derive_masks(cfg: &PipelineConfig, res: &Resources, list: &ImageList, out: &Path) -> Result<()> {
    echo_config(cfg, out, STAGE_MASKS)?;
    for_each_image(cfg, &list.images, |r| write_json(&image_file(out, STAGE_MASKS, &r.id), &derive_masks(cfg, res, r)?))?;
    Ok(())
}

pub fn run_extract_artifacts(cfg: &PipelineConfig, res: &Resources, list: &ImageList, out: &Path) -> Result<()> {
    echo_config(cfg, out, STAGE_ARTIFACTS)?;
    for_each_image(cfg, &list.images, |r| {
        let masks: MaskSet = read_json(&image_file(out, STAGE_MASKS, &r.id))?;
        write_json(&image_file(out, STAGE_ARTIFACTS, &r.id), &extract_artifacts(cfg, res, r, &masks)?)
    })?;
    Ok(())
}

pub fn run_select_concepts(cfg: &PipelineConfig, res: &Resources, list: &ImageList, out: &Path) -> Result<()> {
    echo_config(cfg, out, STAGE_SELECTION)?;
    for_each_image(cfg, &list.images, |r| {
        let masks: MaskSet = read_json(&image_file(out, STAGE_MASKS, &r.id))?;
        let art: ArtifactReport = read_json(&image_file(out, STAGE_ARTIFACTS, &r.id))?;
        write_json(&image_file(out, STAGE_SELECTION, &r.id), &select_concepts(cfg, res, &masks, &art)?)
    })?;
    Ok(())
}

pub fn run_augment_boxes(cfg: &PipelineConfig, list: &ImageList, out: &Path) -> Result<()> {
    echo_config(cfg, out, STAGE_BOXES)?;
    for_each_image(cfg, &list.images, |r| {
        let sel: SelectionReport = read_json(&image_file(out, STAGE_SELECTION, &r.id))?;
        write_json(&image_file(out, STAGE_BOXES, &r.id), &augment_boxes(cfg, &sel)?)
    })?;
    Ok(())
}

/// Chat client for a run; the cache defaults to `<out>/cache`.
pub fn make_client(cfg: &PipelineConfig, out: &Path) -> Result<ChatClient> {
    let mut b = cfg.backend.clone();
    if b.cache_dir.is_none() {
        b.cache_dir = Some(out.join("cache"));
    }
    ChatClient::new(b).map_err(|e| PipelineError::Config(e.to_string()))
}

pub fn run_annotate(cfg: &PipelineConfig, res: &Resources, list: &ImageList, out: &Path, client: &ChatClient) -> Result<()> {
    echo_config(cfg, out, STAGE_ANNOTATIONS)?;
    for_each_image(cfg, &list.images, |r| {
        let sel: SelectionReport = read_json(&image_file(out, STAGE_SELECTION, &r.id))?;
        let boxes: BoxReport = read_json(&image_file(out, STAGE_BOXES, &r.id))?;
        write_json(&image_file(out, STAGE_ANNOTATIONS, &r.id), &annotate_image(cfg, res, client, r, &sel, &boxes)?)
    })?;
    Ok(())
}

/// Builds, validates and writes the corpus, plus `stats.json` and
/// `stats.txt` next to it.
pub fn run_assemble(cfg: &PipelineConfig, res: &Resources, list: &ImageList, out: &Path) -> Result<RunSummary> {
    echo_config(cfg, out, STAGE_CORPUS)?;
    let per_image = for_each_image(cfg, &list.images, |r| {
        let art: ArtifactReport = read_json(&image_file(out, STAGE_ARTIFACTS, &r.id))?;
        let sel: SelectionReport = read_json(&image_file(out, STAGE_SELECTION, &r.id))?;
        let ann: AnnotationReport = read_json(&image_file(out, STAGE_ANNOTATIONS, &r.id))?;
        let s = image_samples(cfg, res, r, &art, &sel, &ann)?;
        Ok((s, ann.rejected.len(), ann.step3.map(|s| s.dropped.len()).unwrap_or(0)))
    })?;
    let mut samples = Vec::new();
    let (mut rejected, mut dropped) = (0, 0);
    for (s, rj, dr) in per_image {
        samples.extend(s);
        rejected += rj;
        dropped += dr;
    }
    let bad: Vec<(String, Vec<Issue>)> =
        samples.iter().map(validate_sample).filter(|v| !v.is_valid()).map(|v| (v.id, v.issues)).collect();
    if let Some((id, issues)) = bad.first() {
        return Err(PipelineError::InvalidSamples(bad.len(), format!("{id}: {issues:?}")));
    }
    let corpus = stage_dir(out, STAGE_CORPUS);
    let stats = assemble_corpus(&samples, &cfg.split, &corpus)?;
    write_json(&corpus.join("stats.json"), &stats.to_json())?;
    fs::write(corpus.join("stats.txt"), stats.render_table())?;
    let summary = RunSummary { images: list.images.len(), samples: samples.len(), rejected_narratives: rejected, dropped_concepts: dropped, stats };
    write_json(&corpus.join("summary.json"), &summary)?;
    Ok(summary)
}

/// All stages in order.
pub fn run_all(cfg: &PipelineConfig, list: &ImageList, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let res = Resources::load(cfg)?;
    run_derive_masks(cfg, &res, list, out)?;
    run_extract_artifacts(cfg, &res, list, out)?;
    run_select_concepts(cfg, &res, list, out)?;
    run_augment_boxes(cfg, list, out)?;
    let client = make_client(cfg, out)?;
    run_annotate(cfg, &res, list, out, &client)?;
    run_assemble(cfg, &res, list, out)
}

/// Writes synthetic real/fake pairs with landmarks and parsing maps plus an
/// `images.json` list. Odd-numbered extra pairs are labelled identity swaps so
/// the corpus has both gated and ungated sources.
pub fn write_fixture_set(dir: &Path, seeds: &[u64], size: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut images = Vec::new();
    let mut truth = BTreeMap::new();
    for (n, &seed) in seeds.iter().enumerate() {
        let f = synthetic_face(seed, size, size);
        let id = format!("face{seed:04}");
        let png = |name: &str, bytes: Vec<u8>| -> Result<PathBuf> {
            fs::write(dir.join(name), bytes)?;
            Ok(PathBuf::from(name))
        };
        let real = png(&format!("{id}_real.png"), encode_rgb_png(&f.real).map_err(|e| input_err(dir, e))?)?;
        let fake = png(&format!("{id}_fake.png"), encode_rgb_png(&f.fake).map_err(|e| input_err(dir, e))?)?;
        let parsing = png(&format!("{id}_parsing.png"), f.parsing.to_png_bytes().map_err(|source| PipelineError::Region { id: id.clone(), source })?)?;
        let landmarks = PathBuf::from(format!("{id}_landmarks.json"));
        fs::write(dir.join(&landmarks), f.landmarks.to_json())?;
        let forgery_type = if n % 2 == 1 { ForgeryType::IdentitySwap } else { ForgeryType::AttributeManipulation };
        truth.insert(id.clone(), serde_json::json!({"tampered": f.tampered, "core_area": f.core.count_ones()}));
        images.push(ImageRecord { id, real, fake, landmarks, parsing, forgery_type });
    }
    let list = dir.join("images.json");
    write_json(&list, &ImageList { images })?;
    write_json(&dir.join("truth.json"), &truth)?;
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_validates() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 7, "selection": {"max_rank": 10}}"#).unwrap();
        assert_eq!((partial.seed, partial.selection.max_rank, partial.selection.min_pixels), (7, 10, 50));
        let mut bad = c.clone();
        bad.boxes.min_side_frac = 1.5;
        assert!(bad.validate().is_err());
        let mut missing = c;
        missing.manifest = Some("/nonexistent/manifest.json".into());
        assert!(missing.validate().is_err());
    }

    #[test]
    fn image_ids_must_be_unique() {
        let d = tempfile::tempdir().unwrap();
        let rec = |id: &str| ImageRecord {
            id: id.into(),
            real: "r.png".into(),
            fake: "f.png".into(),
            landmarks: "l.json".into(),
            parsing: "p.png".into(),
            forgery_type: ForgeryType::Real,
        };
        let p = d.path().join("images.json");
        write_json(&p, &ImageList { images: vec![rec("b"), rec("a")] }).unwrap();
        let l = ImageList::load(&p).unwrap();
        assert_eq!(l.images[0].id, "a");
        assert_eq!(l.images[0].real, d.path().join("r.png"));
        write_json(&p, &ImageList { images: vec![rec("a"), rec("a")] }).unwrap();
        assert!(ImageList::load(&p).is_err());
    }
}
