//! Prompt resolution, region proposals, scoring and decoupled deployment.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, Dataset, DetectionRecord, Scene, SceneId};
use crate::embedding::{
    average_embeddings, cosine, Embedding, EncoderBundle, EncoderParams, PromptEncoders, RegionFeaturizer,
    RegionView, Tokenizer,
};
use crate::error::{Error, Result};
use crate::geometry::{batched_nms, iou, BBox};
use crate::seed::{self, tag};

pub const DEFAULT_VISUAL_EXEMPLARS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    Text,
    VisualGeneric,
    VisualInteractive,
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBox {
    pub scene_id: SceneId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplars: Vec<ExemplarBox>,
    /// How many of `exemplars` to average for visual-generic prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl PromptSpec {
    pub fn text(text: impl Into<String>) -> Self {
        PromptSpec {
            mode: PromptMode::Text,
            text: Some(text.into()),
            exemplars: Vec::new(),
            n: None,
        }
    }

    pub fn visual_generic(exemplars: Vec<ExemplarBox>, n: usize) -> Self {
        PromptSpec {
            mode: PromptMode::VisualGeneric,
            text: None,
            exemplars,
            n: Some(n),
        }
    }

    pub fn visual_interactive(exemplar: ExemplarBox) -> Self {
        PromptSpec {
            mode: PromptMode::VisualInteractive,
            text: None,
            exemplars: vec![exemplar],
            n: None,
        }
    }

    pub fn ensemble(text: impl Into<String>, exemplars: Vec<ExemplarBox>) -> Self {
        let n = exemplars.len();
        PromptSpec {
            mode: PromptMode::Ensemble,
            text: Some(text.into()),
            exemplars,
            n: Some(n),
        }
    }

    /// Visual-generic prompt from the dataset's exemplar index, using up to
    /// `n` exemplars.
    pub fn from_exemplar_index(ds: &Dataset, category: CategoryId, n: usize) -> Result<Self> {
        let exemplars = exemplar_boxes(ds, category)?;
        if exemplars.is_empty() {
            return Err(Error::Exemplars {
                category,
                requested: n,
                available: 0,
            });
        }
        let n = n.min(exemplars.len());
        Ok(PromptSpec::visual_generic(exemplars, n))
    }
}

pub fn exemplar_boxes(ds: &Dataset, category: CategoryId) -> Result<Vec<ExemplarBox>> {
    ds.exemplars_of(category)
        .iter()
        .map(|e| {
            let ann = ds.annotation(e.annotation_id).ok_or(Error::UnknownId {
                kind: "annotation",
                id: e.annotation_id,
            })?;
            Ok(ExemplarBox {
                scene_id: ann.scene_id,
                bbox: ann.bbox,
            })
        })
        .collect()
}

/// Resolved query embeddings. Ensemble prompts carry both.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub mode: PromptMode,
    pub text: Option<Embedding>,
    pub visual: Option<Embedding>,
}

fn encode_exemplar(model: &impl PromptEncoders, ds: &Dataset, ex: &ExemplarBox) -> Result<Embedding> {
    let scene = ds.scene(ex.scene_id).ok_or(Error::UnknownId {
        kind: "image",
        id: ex.scene_id,
    })?;
    model.encode_region(scene, &ex.bbox, RegionView::Prompt)
}

fn average_first(model: &impl PromptEncoders, ds: &Dataset, spec: &PromptSpec, category: CategoryId) -> Result<Embedding> {
    let n = spec.n.unwrap_or(spec.exemplars.len());
    if n == 0 || n > spec.exemplars.len() {
        return Err(Error::Exemplars {
            category,
            requested: n,
            available: spec.exemplars.len(),
        });
    }
    let items = spec.exemplars[..n]
        .iter()
        .map(|e| encode_exemplar(model, ds, e))
        .collect::<Result<Vec<_>>>()?;
    average_embeddings(&items)
}

pub fn resolve_prompt(model: &impl PromptEncoders, spec: &PromptSpec, category: CategoryId, ds: &Dataset) -> Result<Query> {
    let need_text = || {
        spec.text
            .as_deref()
            .ok_or_else(|| Error::Prompt(format!("{:?} prompt needs text", spec.mode)))
    };
    let (text, visual) = match spec.mode {
        PromptMode::Text => (Some(model.encode_text(need_text()?)?), None),
        PromptMode::VisualGeneric => (None, Some(average_first(model, ds, spec, category)?)),
        PromptMode::VisualInteractive => {
            if spec.exemplars.len() != 1 {
                return Err(Error::Prompt("visual-interactive prompt needs exactly one exemplar".into()));
            }
            (None, Some(encode_exemplar(model, ds, &spec.exemplars[0])?))
        }
        PromptMode::Ensemble => (
            Some(model.encode_text(need_text()?)?),
            Some(average_first(model, ds, spec, category)?),
        ),
    };
    Ok(Query {
        mode: spec.mode,
        text,
        visual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalMode {
    /// Boxes of the scene's objects (annotations for external scenes).
    #[default]
    Oracle,
    Grid,
    Combined,
}

/// Sliding window sized as fractions of the scene's width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridScale {
    pub width: f64,
    pub height: f64,
    pub stride: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub mode: ProposalMode,
    pub grid: Vec<GridScale>,
    /// Oracle boxes per object. Copies beyond the first only make sense
    /// with `jitter > 0`.
    pub copies: usize,
    /// Each oracle box edge moves by up to this fraction of the box size.
    pub jitter: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            mode: ProposalMode::Oracle,
            grid: vec![
                GridScale {
                    width: 0.15,
                    height: 0.15,
                    stride: 0.075,
                },
                GridScale {
                    width: 0.25,
                    height: 0.25,
                    stride: 0.125,
                },
            ],
            copies: 1,
            jitter: 0.0,
        }
    }
}

const DEDUP_IOU: f64 = 0.95;

fn grid_boxes(scene: &Scene, scale: &GridScale) -> Vec<BBox> {
    let mut out = Vec::new();
    if scale.width <= 0.0 || scale.height <= 0.0 || scale.width > 1.0 || scale.height > 1.0 || scale.stride <= 0.0 {
        return out;
    }
    let steps = |size: f64| ((1.0 - size) / scale.stride + 1e-9).floor() as usize + 1;
    for j in 0..steps(scale.height) {
        for i in 0..steps(scale.width) {
            let x = i as f64 * scale.stride;
            let y = j as f64 * scale.stride;
            out.push(BBox {
                x_min: x * scene.width,
                y_min: y * scene.height,
                x_max: ((x + scale.width) * scene.width).min(scene.width),
                y_max: ((y + scale.height) * scene.height).min(scene.height),
            });
        }
    }
    out
}

fn jittered(scene: &Scene, b: &BBox, object: usize, copy: usize, jitter: f64) -> BBox {
    let mut rng = seed::rng(&[tag::PROPOSAL, scene.id, object as u64, copy as u64, scene.width.to_bits()]);
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| rng.random_range(-jitter..=jitter) * s;
    let x0 = (b.x_min + d(w)).clamp(0.0, scene.width - 1.0);
    let y0 = (b.y_min + d(h)).clamp(0.0, scene.height - 1.0);
    let x1 = (b.x_max + d(w)).clamp(x0 + 1.0, scene.width);
    let y1 = (b.y_max + d(h)).clamp(y0 + 1.0, scene.height);
    BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

pub fn propose_regions(scene: &Scene, ds: &Dataset, cfg: &ProposalConfig) -> Vec<BBox> {
    let oracle = || -> Vec<BBox> {
        let exact: Vec<BBox> = if scene.is_synthetic() {
            scene.objects().iter().map(|o| o.bbox).collect()
        } else {
            ds.annotations_of(scene.id).map(|a| a.bbox).collect()
        };
        if cfg.jitter <= 0.0 {
            return exact;
        }
        let mut out = Vec::with_capacity(exact.len() * cfg.copies);
        for (i, b) in exact.iter().enumerate() {
            for c in 0..cfg.copies.max(1) {
                out.push(jittered(scene, b, i, c, cfg.jitter));
            }
        }
        out
    };
    let grid = || -> Vec<BBox> { cfg.grid.iter().flat_map(|g| grid_boxes(scene, g)).collect() };
    match cfg.mode {
        ProposalMode::Oracle => oracle(),
        ProposalMode::Grid => grid(),
        ProposalMode::Combined => {
            let mut kept = oracle();
            for b in grid() {
                if kept.iter().all(|k| iou(k, &b) <= DEDUP_IOU) {
                    kept.push(b);
                }
            }
            kept
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Combiner {
    #[default]
    Max,
    Mean,
    /// `text_weight * text + (1 - text_weight) * visual`.
    Weighted { text_weight: f64 },
}

impl Combiner {
    pub fn combine(&self, text: f64, visual: f64) -> f64 {
        match self {
            Combiner::Max => text.max(visual),
            Combiner::Mean => (text + visual) / 2.0,
            Combiner::Weighted { text_weight } => text_weight * text + (1.0 - text_weight) * visual,
        }
    }
}

/// How many categories a single proposal may be reported under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegionLabels {
    /// One detection per (proposal, prompt).
    #[default]
    All,
    /// Only the best-scoring prompt per proposal.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub labels: RegionLabels,
    /// Per-category NMS threshold; `None` (written `"off"`) disables
    /// suppression.
    #[serde(with = "nms_setting")]
    pub nms_iou: Option<f64>,
    pub combiner: Combiner,
    pub proposals: ProposalConfig,
}

/// `Option<f64>` that stays explicit in formats without a null.
mod nms_setting {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Setting {
        Iou(f64),
        Off(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Setting::Iou(*x),
            None => Setting::Off("off".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Setting::deserialize(d)? {
            Setting::Iou(x) => Ok(Some(x)),
            Setting::Off(t) if t == "off" => Ok(None),
            Setting::Off(t) => Err(serde::de::Error::custom(format!("expected an IoU or \"off\", got {t:?}"))),
        }
    }
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.0,
            labels: RegionLabels::All,
            nms_iou: Some(0.5),
            combiner: Combiner::Max,
            proposals: ProposalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSource {
    pub mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
    /// Category before prototype refinement reassigned it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_category: Option<CategoryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: SceneId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub score: f64,
    pub source: DetectionSource,
}

impl crate::dataset::Categorized for Detection {
    fn category(&self) -> CategoryId {
        self.category_id
    }
}

impl Detection {
    pub fn to_record(&self) -> DetectionRecord {
        DetectionRecord {
            image_id: self.scene_id,
            category_id: self.category_id,
            bbox: self.bbox.to_xywh(),
            score: self.score,
        }
    }
}

pub fn similarity_score(a: &Embedding, b: &Embedding) -> f64 {
    (cosine(a, b) + 1.0) / 2.0
}

/// Sorts by (scene, category, score desc); the stable sort keeps the
/// original index as the final tie-break.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.scene_id
            .cmp(&b.scene_id)
            .then(a.category_id.cmp(&b.category_id))
            .then(b.score.total_cmp(&a.score))
    });
}

/// Scores proposals for each resolved query. Returns detections before
/// thresholding/NMS so callers can inspect the raw pool.
pub fn score_regions(
    region_embeddings: &[Embedding],
    boxes: &[BBox],
    scene_id: SceneId,
    queries: &[(CategoryId, Query)],
    combiner: Combiner,
) -> Vec<Detection> {
    let mut out = Vec::with_capacity(boxes.len() * queries.len());
    for (cat, q) in queries {
        for (r, b) in region_embeddings.iter().zip(boxes) {
            let t = q.text.as_ref().map(|e| similarity_score(e, r));
            let v = q.visual.as_ref().map(|e| similarity_score(e, r));
            let score = match (t, v) {
                (Some(t), Some(v)) => combiner.combine(t, v),
                (Some(s), None) | (None, Some(s)) => s,
                (None, None) => continue,
            };
            out.push(Detection {
                scene_id,
                category_id: *cat,
                bbox: *b,
                score,
                source: DetectionSource {
                    mode: q.mode,
                    transform: None,
                    original_category: None,
                },
            });
        }
    }
    out
}

/// Keeps the best-scoring detection per distinct box; ties go to the
/// earlier detection.
pub fn best_label_per_box(dets: Vec<Detection>) -> Vec<Detection> {
    let mut best: std::collections::BTreeMap<(SceneId, [u64; 4]), usize> = Default::default();
    for (i, d) in dets.iter().enumerate() {
        let key = (
            d.scene_id,
            [d.bbox.x_min.to_bits(), d.bbox.y_min.to_bits(), d.bbox.x_max.to_bits(), d.bbox.y_max.to_bits()],
        );
        let slot = best.entry(key).or_insert(i);
        if d.score > dets[*slot].score {
            *slot = i;
        }
    }
    let mut keep: Vec<usize> = best.into_values().collect();
    keep.sort_unstable();
    let mut all: Vec<Option<Detection>> = dets.into_iter().map(Some).collect();
    keep.into_iter().map(|i| all[i].take().expect("kept once")).collect()
}

/// Thresholds, applies per-category NMS and sorts.
pub fn finalize(mut dets: Vec<Detection>, score_threshold: f64, nms_iou: Option<f64>) -> Vec<Detection> {
    dets.retain(|d| d.score >= score_threshold);
    if let Some(thr) = nms_iou {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let groups: Vec<u32> = dets.iter().map(|d| d.category_id).collect();
        let keep = batched_nms(&boxes, &scores, &groups, thr);
        let mut kept: Vec<Option<Detection>> = dets.into_iter().map(Some).collect();
        dets = keep.into_iter().map(|i| kept[i].take().expect("index kept once")).collect();
    }
    sort_detections(&mut dets);
    dets
}

/// Detection with pre-resolved queries. The scene may be a transformed or
/// cropped view; detections are reported in that scene's frame.
pub fn detect_with_queries(
    model: &impl PromptEncoders,
    scene: &Scene,
    ds: &Dataset,
    queries: &[(CategoryId, Query)],
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let boxes = propose_regions(scene, ds, &cfg.proposals);
    let regions = boxes
        .iter()
        .map(|b| model.encode_region(scene, b, RegionView::Proposal))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = score_regions(&regions, &boxes, scene.id, queries, cfg.combiner);
    if cfg.labels == RegionLabels::Best {
        raw = best_label_per_box(raw);
    }
    Ok(finalize(raw, cfg.score_threshold, cfg.nms_iou))
}

pub fn resolve_all(
    model: &impl PromptEncoders,
    prompts: &[(CategoryId, PromptSpec)],
    ds: &Dataset,
) -> Result<Vec<(CategoryId, Query)>> {
    prompts
        .iter()
        .map(|(cat, spec)| {
            ds.category(*cat).ok_or(Error::UnknownId {
                kind: "category",
                id: *cat as u64,
            })?;
            Ok((*cat, resolve_prompt(model, spec, *cat, ds)?))
        })
        .collect()
}

pub fn detect(
    model: &impl PromptEncoders,
    scene: &Scene,
    prompts: &[(CategoryId, PromptSpec)],
    ds: &Dataset,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    for (_, spec) in prompts {
        if spec.mode == PromptMode::VisualInteractive && spec.exemplars.iter().any(|e| e.scene_id != scene.id) {
            return Err(Error::Prompt("visual-interactive exemplar must come from the query scene".into()));
        }
    }
    let queries = resolve_all(model, prompts, ds)?;
    detect_with_queries(model, scene, ds, &queries, cfg)
}

/// Runs [`detect_with_queries`] over many scenes in parallel; output order
/// follows `scenes`.
pub fn detect_scenes(
    model: &impl PromptEncoders,
    scenes: &[&Scene],
    ds: &Dataset,
    queries: &[(CategoryId, Query)],
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let per_scene = scenes
        .par_iter()
        .map(|s| detect_with_queries(model, s, ds, queries, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Inference-only model: the contrastive encoders without the frozen
/// teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployedModel {
    pub tokenizer: Tokenizer,
    pub featurizer: RegionFeaturizer,
    pub contrastive_text: EncoderParams,
    pub contrastive_visual: EncoderParams,
    pub step: u64,
    pub config_hash: String,
}

impl PromptEncoders for DeployedModel {
    fn contrastive_text(&self) -> &EncoderParams {
        &self.contrastive_text
    }
    fn contrastive_visual(&self) -> &EncoderParams {
        &self.contrastive_visual
    }
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
    fn featurizer(&self) -> &RegionFeaturizer {
        &self.featurizer
    }
}

pub fn deploy(bundle: &EncoderBundle) -> DeployedModel {
    DeployedModel {
        tokenizer: bundle.tokenizer.clone(),
        featurizer: bundle.featurizer.clone(),
        contrastive_text: bundle.contrastive_text.clone(),
        contrastive_visual: bundle.contrastive_visual.clone(),
        step: bundle.step,
        config_hash: bundle.config_hash.clone(),
    }
}
