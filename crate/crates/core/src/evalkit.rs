//! COCO-style average precision, the three prompt protocols, per-domain
//! aggregation and Max AP.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, CategoryId, Dataset, Provenance, Scene, SceneId, Split};
use crate::embedding::PromptEncoders;
use crate::error::{Error, Result};
use crate::geometry::{iou, score_order};
use crate::inference::{
    detect_scenes, detect_with_queries, resolve_prompt, DetectConfig, Detection, ExemplarBox, PromptMode,
    PromptSpec, Query, DEFAULT_VISUAL_EXEMPLARS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Cap on detections per (scene, category), highest scores first.
    pub max_dets: usize,
    pub visual_exemplars: usize,
    /// Drop detections and ground truth outside each scene's known categories.
    pub restrict_known: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            recall_points: 101,
            max_dets: 100,
            visual_exemplars: DEFAULT_VISUAL_EXEMPLARS,
            restrict_known: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty()
            || self.iou_thresholds.windows(2).any(|w| w[0] >= w[1])
            || self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::Config("IoU thresholds must be strictly increasing within [0,1]".into()));
        }
        if self.recall_points < 2 {
            return Err(Error::Config("need at least two recall points".into()));
        }
        Ok(())
    }
}

/// The part of a detection the evaluator needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub scene_id: SceneId,
    pub category_id: CategoryId,
    pub bbox: crate::geometry::BBox,
    pub score: f64,
}

impl From<&Detection> for Scored {
    fn from(d: &Detection) -> Self {
        Scored {
            scene_id: d.scene_id,
            category_id: d.category_id,
            bbox: d.bbox,
            score: d.score,
        }
    }
}

/// Interpolated precision averaged over `points` evenly spaced recall levels.
/// `hits` are true-positive flags in descending score order.
pub fn interpolated_ap(hits: &[bool], n_gt: usize, points: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, h) in hits.iter().enumerate() {
        if *h {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..points {
        let r = k as f64 / (points - 1) as f64;
        let idx = recall.partition_point(|x| *x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / points as f64
}

fn restrict<'a>(
    dets: &'a [Scored],
    gts: &'a [Annotation],
    scenes: &BTreeMap<SceneId, &Scene>,
    on: bool,
) -> (Vec<&'a Scored>, Vec<&'a Annotation>) {
    let allowed = |scene: SceneId, cat: CategoryId| -> bool {
        if !on {
            return true;
        }
        match scenes.get(&scene).and_then(|s| s.known_categories.as_ref()) {
            Some(known) => known.contains(&cat),
            None => true,
        }
    };
    (
        dets.iter().filter(|d| allowed(d.scene_id, d.category_id)).collect(),
        gts.iter().filter(|g| allowed(g.scene_id, g.category_id)).collect(),
    )
}

/// Per-category AP at one IoU threshold. Categories without ground truth are
/// absent from the result.
pub fn average_precision(
    dets: &[Scored],
    gts: &[Annotation],
    scenes: &BTreeMap<SceneId, &Scene>,
    iou_threshold: f64,
    cfg: &EvalConfig,
) -> BTreeMap<CategoryId, f64> {
    let (dets, gts) = restrict(dets, gts, scenes, cfg.restrict_known);
    let mut gt_by: BTreeMap<(CategoryId, SceneId), Vec<&Annotation>> = BTreeMap::new();
    for g in &gts {
        gt_by.entry((g.category_id, g.scene_id)).or_default().push(g);
    }
    let mut det_by: BTreeMap<(CategoryId, SceneId), Vec<&Scored>> = BTreeMap::new();
    for d in &dets {
        det_by.entry((d.category_id, d.scene_id)).or_default().push(d);
    }
    let mut n_gt: BTreeMap<CategoryId, usize> = BTreeMap::new();
    for ((cat, _), v) in &gt_by {
        *n_gt.entry(*cat).or_default() += v.len();
    }
    // (score, tp) per category in scene order, then sorted by score.
    let mut pool: BTreeMap<CategoryId, Vec<(f64, bool)>> = BTreeMap::new();
    for ((cat, scene), ds) in &det_by {
        let scores: Vec<f64> = ds.iter().map(|d| d.score).collect();
        let order: Vec<usize> = score_order(&scores).into_iter().take(cfg.max_dets).collect();
        let empty = Vec::new();
        let g = gt_by.get(&(*cat, *scene)).unwrap_or(&empty);
        let mut matched = vec![false; g.len()];
        let entry = pool.entry(*cat).or_default();
        for i in order {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in g.iter().enumerate() {
                if matched[j] {
                    continue;
                }
                let v = iou(&ds[i].bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                matched[j] = true;
            }
            entry.push((ds[i].score, best.is_some()));
        }
    }
    n_gt.iter()
        .map(|(cat, n)| {
            let mut items = pool.remove(cat).unwrap_or_default();
            let scores: Vec<f64> = items.iter().map(|x| x.0).collect();
            let order = score_order(&scores);
            let hits: Vec<bool> = order.iter().map(|&i| items[i].1).collect();
            items.clear();
            (*cat, interpolated_ap(&hits, *n, cfg.recall_points))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    /// AP at each configured IoU threshold.
    pub per_threshold: Vec<f64>,
    pub mean: f64,
}

/// AP over the whole IoU grid, per category with ground truth.
pub fn evaluate_detections(
    dets: &[Scored],
    gts: &[Annotation],
    scenes: &BTreeMap<SceneId, &Scene>,
    cfg: &EvalConfig,
) -> BTreeMap<CategoryId, CategoryScores> {
    let mut out: BTreeMap<CategoryId, Vec<f64>> = BTreeMap::new();
    for thr in &cfg.iou_thresholds {
        for (cat, ap) in average_precision(dets, gts, scenes, *thr, cfg) {
            out.entry(cat).or_default().push(ap);
        }
    }
    out.into_iter()
        .map(|(cat, per_threshold)| {
            let mean = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
            (cat, CategoryScores { per_threshold, mean })
        })
        .collect()
}

pub fn mean_ap(scores: &BTreeMap<CategoryId, CategoryScores>) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    Some(scores.values().map(|s| s.mean).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "text-g")]
    TextG,
    #[serde(rename = "visual-g")]
    VisualG,
    #[serde(rename = "visual-i")]
    VisualI,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::TextG, Protocol::VisualG, Protocol::VisualI];

    pub fn label(self) -> &'static str {
        match self {
            Protocol::TextG => "Text-G",
            Protocol::VisualG => "Visual-G",
            Protocol::VisualI => "Visual-I",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: Protocol,
    /// Domain → mAP over categories with ground truth.
    pub per_domain: BTreeMap<String, f64>,
    pub per_category: BTreeMap<CategoryId, CategoryScores>,
    /// Categories excluded for having no ground truth in the split.
    pub excluded: Vec<CategoryId>,
}

fn gt_annotations(ds: &Dataset, scenes: &[&Scene]) -> Vec<Annotation> {
    scenes
        .iter()
        .flat_map(|s| ds.annotations_of(s.id))
        .filter(|a| a.provenance == Provenance::GroundTruth)
        .cloned()
        .collect()
}

/// The first ground-truth instance of each category in `scene`, used as the
/// interactive crop.
pub fn interactive_prompts(ds: &Dataset, scene: &Scene, categories: &[CategoryId]) -> Vec<(CategoryId, PromptSpec)> {
    let wanted: BTreeSet<CategoryId> = categories.iter().copied().collect();
    let mut first: BTreeMap<CategoryId, &Annotation> = BTreeMap::new();
    for a in ds.annotations_of(scene.id) {
        if a.provenance == Provenance::GroundTruth && wanted.contains(&a.category_id) {
            first.entry(a.category_id).or_insert(a);
        }
    }
    first
        .into_iter()
        .map(|(cat, a)| {
            (
                cat,
                PromptSpec::visual_interactive(ExemplarBox {
                    scene_id: scene.id,
                    bbox: a.bbox,
                }),
            )
        })
        .collect()
}

/// Detections for one protocol over `scenes`, restricted to `categories`.
pub fn protocol_detections(
    model: &impl PromptEncoders,
    ds: &Dataset,
    protocol: Protocol,
    scenes: &[&Scene],
    categories: &[CategoryId],
    cfg: &EvalConfig,
    detect_cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    match protocol {
        Protocol::TextG | Protocol::VisualG => {
            let mut queries: Vec<(CategoryId, Query)> = Vec::new();
            for &cat in categories {
                let spec = match protocol {
                    Protocol::TextG => {
                        let c = ds.category(cat).ok_or(Error::UnknownId {
                            kind: "category",
                            id: cat as u64,
                        })?;
                        PromptSpec::text(&c.name)
                    }
                    _ => match PromptSpec::from_exemplar_index(ds, cat, cfg.visual_exemplars) {
                        Ok(spec) => spec,
                        // no exemplars: the category simply gets no detections
                        Err(Error::Exemplars { .. }) => continue,
                        Err(e) => return Err(e),
                    },
                };
                queries.push((cat, resolve_prompt(model, &spec, cat, ds)?));
            }
            detect_scenes(model, scenes, ds, &queries, detect_cfg)
        }
        Protocol::VisualI => {
            use rayon::prelude::*;
            let per_scene = scenes
                .par_iter()
                .map(|scene| {
                    let prompts = interactive_prompts(ds, scene, categories);
                    let queries = prompts
                        .iter()
                        .map(|(cat, spec)| Ok((*cat, resolve_prompt(model, spec, *cat, ds)?)))
                        .collect::<Result<Vec<_>>>()?;
                    detect_with_queries(model, scene, ds, &queries, detect_cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(per_scene.into_iter().flatten().collect())
        }
    }
}

pub fn evaluate_protocol(
    model: &impl PromptEncoders,
    ds: &Dataset,
    protocol: Protocol,
    split: Split,
    cfg: &EvalConfig,
    detect_cfg: &DetectConfig,
) -> Result<ProtocolResult> {
    cfg.validate()?;
    let mut per_domain = BTreeMap::new();
    let mut per_category = BTreeMap::new();
    let mut excluded = Vec::new();
    for domain in ds.domains() {
        let scenes: Vec<&Scene> = ds.split_scenes(split).filter(|s| s.domain == domain).collect();
        let categories = ds.domain_categories(&domain);
        let dets = protocol_detections(model, ds, protocol, &scenes, &categories, cfg, detect_cfg)?;
        let scored: Vec<Scored> = dets.iter().map(Scored::from).collect();
        let gts = gt_annotations(ds, &scenes);
        let lookup: BTreeMap<SceneId, &Scene> = scenes.iter().map(|s| (s.id, *s)).collect();
        let scores = evaluate_detections(&scored, &gts, &lookup, cfg);
        for c in &categories {
            if !scores.contains_key(c) {
                excluded.push(*c);
            }
        }
        if let Some(m) = mean_ap(&scores) {
            per_domain.insert(domain.clone(), m);
        }
        per_category.extend(scores);
    }
    excluded.sort_unstable();
    excluded.dedup();
    Ok(ProtocolResult {
        protocol,
        per_domain,
        per_category,
        excluded,
    })
}

pub fn protocol_mean(per_domain: &BTreeMap<String, f64>) -> Option<f64> {
    if per_domain.is_empty() {
        return None;
    }
    Some(per_domain.values().sum::<f64>() / per_domain.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub text_g: Option<f64>,
    pub visual_g: Option<f64>,
    pub visual_i: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_domain: BTreeMap<String, DomainScores>,
    pub mean_text_g: Option<f64>,
    pub mean_visual_g: Option<f64>,
    pub mean_visual_i: Option<f64>,
    /// Mean over domains of the better of Text-G and Visual-G.
    pub max_ap: Option<f64>,
    /// Domains left out of Max AP for missing a protocol.
    pub max_ap_excluded: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate(per_domain: BTreeMap<String, DomainScores>) -> MetricReport {
    let mean_text_g = mean(per_domain.values().filter_map(|d| d.text_g));
    let mean_visual_g = mean(per_domain.values().filter_map(|d| d.visual_g));
    let mean_visual_i = mean(per_domain.values().filter_map(|d| d.visual_i));
    let mut max_ap_excluded = Vec::new();
    let mut maxes = Vec::new();
    for (name, d) in &per_domain {
        match (d.text_g, d.visual_g) {
            (Some(t), Some(v)) => maxes.push(t.max(v)),
            _ => max_ap_excluded.push(name.clone()),
        }
    }
    let report = MetricReport {
        mean_text_g,
        mean_visual_g,
        mean_visual_i,
        max_ap: mean(maxes.into_iter()),
        max_ap_excluded,
        per_domain,
    };
    debug_assert!(report.max_ap_holds());
    report
}

impl MetricReport {
    /// Max AP is never below either protocol mean when every domain has both.
    pub fn max_ap_holds(&self) -> bool {
        match (self.max_ap, self.mean_text_g, self.mean_visual_g) {
            (Some(m), Some(t), Some(v)) if self.max_ap_excluded.is_empty() => m + 1e-12 >= t.max(v),
            _ => true,
        }
    }
}

pub fn evaluate_all(
    model: &impl PromptEncoders,
    ds: &Dataset,
    split: Split,
    cfg: &EvalConfig,
    detect_cfg: &DetectConfig,
) -> Result<(MetricReport, Vec<ProtocolResult>)> {
    let mut results = Vec::new();
    let mut per_domain: BTreeMap<String, DomainScores> = BTreeMap::new();
    for p in Protocol::ALL {
        let r = evaluate_protocol(model, ds, p, split, cfg, detect_cfg)?;
        for (domain, v) in &r.per_domain {
            let e = per_domain.entry(domain.clone()).or_default();
            match p {
                Protocol::TextG => e.text_g = Some(*v),
                Protocol::VisualG => e.visual_g = Some(*v),
                Protocol::VisualI => e.visual_i = Some(*v),
            }
        }
        results.push(r);
    }
    Ok((aggregate(per_domain), results))
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub training_size: String,
    pub report: MetricReport,
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", x * 100.0)).unwrap_or_else(|| "-".into())
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let header = ["Model", "Training Data", "Visual-I AP", "Text-G AP", "Visual-G AP", "Max AP"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.training_size.clone(),
                pct(r.report.mean_visual_i),
                pct(r.report.mean_text_g),
                pct(r.report.mean_visual_g),
                pct(r.report.max_ap),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "| {} |", padded.join(" | "));
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

pub fn mode_of(protocol: Protocol) -> PromptMode {
    match protocol {
        Protocol::TextG => PromptMode::Text,
        Protocol::VisualG => PromptMode::VisualGeneric,
        Protocol::VisualI => PromptMode::VisualInteractive,
    }
}
