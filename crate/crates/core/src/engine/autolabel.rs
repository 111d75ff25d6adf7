use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracles::LabelingOracles;
use crate::dataset::{Annotation, CategoryId, Dataset, Provenance, Scene, SceneId};
use crate::embedding::PromptEncoders;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::inference::{detect_with_queries, resolve_prompt, DetectConfig, PromptSpec, DEFAULT_VISUAL_EXEMPLARS};

pub const DUPLICATE_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelFilterConfig {
    /// Boxes smaller than this fraction of the scene area are dropped.
    pub min_area: f64,
    /// Region/caption pairs scoring below this are dropped.
    pub alignment_floor: f64,
}

impl Default for LabelFilterConfig {
    fn default() -> Self {
        LabelFilterConfig {
            min_area: 5e-4,
            alignment_floor: 0.3,
        }
    }
}

impl LabelFilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("min_area", self.min_area), ("alignment_floor", self.alignment_floor)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn area_ok(&self, scene: &Scene, b: &BBox) -> bool {
        b.area() / scene.area() >= self.min_area
    }

    pub fn alignment_ok(&self, score: f64) -> bool {
        score >= self.alignment_floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutolabelConfig {
    pub filters: LabelFilterConfig,
    /// Exemplars averaged into the visual half of forward queries.
    pub exemplars: usize,
    pub detect: DetectConfig,
}

impl Default for AutolabelConfig {
    fn default() -> Self {
        AutolabelConfig {
            filters: LabelFilterConfig::default(),
            exemplars: DEFAULT_VISUAL_EXEMPLARS,
            detect: DetectConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene_id: SceneId,
    pub message: String,
}

/// Why candidates did not become labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub non_physical: usize,
    /// Phrase or caption that names no dataset category.
    pub unknown_category: usize,
    pub small: usize,
    pub low_alignment: usize,
    pub duplicate: usize,
}

impl DropCounts {
    fn add(&mut self, o: &DropCounts) {
        self.non_physical += o.non_physical;
        self.unknown_category += o.unknown_category;
        self.small += o.small;
        self.low_alignment += o.low_alignment;
        self.duplicate += o.duplicate;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AutolabelReport {
    pub annotations: Vec<Annotation>,
    pub failures: Vec<SceneFailure>,
    pub dropped: DropCounts,
}

struct Candidate {
    category_id: CategoryId,
    bbox: BBox,
}

fn overlaps_same_category(kept: &[Candidate], c: CategoryId, b: &BBox) -> bool {
    kept.iter().any(|k| k.category_id == c && iou(&k.bbox, b) >= DUPLICATE_IOU)
}

/// Runs `per_scene` over all scenes in parallel; failures are recorded and
/// do not stop the other scenes. Annotation ids continue from the dataset.
fn collect<F>(ds: &Dataset, scenes: &[&Scene], provenance: Provenance, per_scene: F) -> AutolabelReport
where
    F: Fn(&Scene) -> Result<(Vec<Candidate>, DropCounts)> + Sync,
{
    let results: Vec<(SceneId, Result<(Vec<Candidate>, DropCounts)>)> =
        scenes.par_iter().map(|s| (s.id, per_scene(s))).collect();
    let mut report = AutolabelReport::default();
    let mut next = ds.next_annotation_id();
    for (scene_id, r) in results {
        match r {
            Ok((cands, drops)) => {
                report.dropped.add(&drops);
                for c in cands {
                    report.annotations.push(Annotation {
                        id: next,
                        scene_id,
                        category_id: c.category_id,
                        bbox: c.bbox,
                        provenance,
                    });
                    next += 1;
                }
            }
            Err(e) => report.failures.push(SceneFailure {
                scene_id,
                message: e.to_string(),
            }),
        }
    }
    report
}

/// Caption the scene, keep physical noun phrases, and localize each phrase
/// with the model. A phrase mentioned `k` times yields at most `k` boxes.
pub fn autolabel_forward(
    model: &impl PromptEncoders,
    ds: &Dataset,
    scenes: &[&Scene],
    oracles: &dyn LabelingOracles,
    cfg: &AutolabelConfig,
) -> Result<AutolabelReport> {
    cfg.filters.validate()?;
    Ok(collect(ds, scenes, Provenance::AutoLabelForward, |scene| {
        let caption = oracles.caption(scene)?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut drops = DropCounts::default();
        for phrase in oracles.extract_phrases(&caption)? {
            if oracles.is_physical(&phrase)? {
                *counts.entry(phrase).or_default() += 1;
            } else {
                drops.non_physical += 1;
            }
        }
        let mut kept: Vec<Candidate> = Vec::new();
        for (phrase, k) in counts {
            let Some(cat) = ds.category_by_name(&phrase).map(|c| c.id) else {
                drops.unknown_category += k;
                continue;
            };
            let spec = match PromptSpec::from_exemplar_index(ds, cat, cfg.exemplars) {
                Ok(v) => {
                    let n = v.n.unwrap_or(v.exemplars.len());
                    PromptSpec::ensemble(&phrase, v.exemplars.into_iter().take(n).collect())
                }
                Err(Error::Exemplars { .. }) => PromptSpec::text(&phrase),
                Err(e) => return Err(e),
            };
            let query = resolve_prompt(model, &spec, cat, ds)?;
            let dets = detect_with_queries(model, scene, ds, &[(cat, query)], &cfg.detect)?;
            let mut taken = 0;
            for d in dets {
                if taken == k {
                    break;
                }
                if !cfg.filters.area_ok(scene, &d.bbox) {
                    drops.small += 1;
                    continue;
                }
                if !cfg.filters.alignment_ok(oracles.alignment(scene, &d.bbox, &phrase)?) {
                    drops.low_alignment += 1;
                    continue;
                }
                if overlaps_same_category(&kept, cat, &d.bbox) {
                    drops.duplicate += 1;
                    continue;
                }
                kept.push(Candidate {
                    category_id: cat,
                    bbox: d.bbox,
                });
                taken += 1;
            }
        }
        Ok((kept, drops))
    }))
}

/// Propose regions, caption each one, and keep well-aligned regions whose
/// caption names a dataset category.
pub fn autolabel_backward(
    ds: &Dataset,
    scenes: &[&Scene],
    oracles: &dyn LabelingOracles,
    filters: &LabelFilterConfig,
) -> Result<AutolabelReport> {
    filters.validate()?;
    Ok(collect(ds, scenes, Provenance::AutoLabelBackward, |scene| {
        let mut drops = DropCounts::default();
        let mut scored: Vec<(f64, Candidate)> = Vec::new();
        for b in oracles.propose(scene)? {
            let caption = oracles.region_caption(scene, &b)?;
            let Some(cat) = ds.category_by_name(&caption).map(|c| c.id) else {
                drops.unknown_category += 1;
                continue;
            };
            if !filters.area_ok(scene, &b) {
                drops.small += 1;
                continue;
            }
            let a = oracles.alignment(scene, &b, &caption)?;
            if !filters.alignment_ok(a) {
                drops.low_alignment += 1;
                continue;
            }
            scored.push((a, Candidate { category_id: cat, bbox: b }));
        }
        // Stable sort: equal scores keep proposal order.
        scored.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut kept = Vec::new();
        for (_, c) in scored {
            if overlaps_same_category(&kept, c.category_id, &c.bbox) {
                drops.duplicate += 1;
            } else {
                kept.push(c);
            }
        }
        Ok((kept, drops))
    }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// Annotation counts per provenance in the merged dataset.
    pub counts: BTreeMap<Provenance, usize>,
    pub added: usize,
    pub duplicates_dropped: usize,
}

/// Adds auto-labels to `ds`. Existing annotations are always kept. New
/// labels are taken in precedence order (ground truth, pseudo-label,
/// forward, backward) and dropped when a kept annotation of the same
/// category overlaps them at IoU >= 0.5. Merging the output again with the
/// same labels changes nothing.
pub fn merge_labels(ds: &Dataset, labels: &[&[Annotation]]) -> Result<(Dataset, MergeReport)> {
    let mut incoming: Vec<&Annotation> = labels.iter().flat_map(|l| l.iter()).collect();
    incoming.sort_by_key(|a| a.provenance);
    let mut by_scene: BTreeMap<SceneId, Vec<(CategoryId, BBox)>> = BTreeMap::new();
    for a in &ds.annotations {
        by_scene.entry(a.scene_id).or_default().push((a.category_id, a.bbox));
    }
    let mut out = ds.annotations.clone();
    let mut next = ds.next_annotation_id();
    let mut report = MergeReport::default();
    for a in incoming {
        if ds.scene(a.scene_id).is_none() {
            return Err(Error::UnknownId {
                kind: "image",
                id: a.scene_id,
            });
        }
        let kept = by_scene.entry(a.scene_id).or_default();
        if kept.iter().any(|(c, b)| *c == a.category_id && iou(b, &a.bbox) >= DUPLICATE_IOU) {
            report.duplicates_dropped += 1;
            continue;
        }
        kept.push((a.category_id, a.bbox));
        out.push(Annotation { id: next, ..a.clone() });
        next += 1;
        report.added += 1;
    }
    for a in &out {
        *report.counts.entry(a.provenance).or_default() += 1;
    }
    Ok((ds.with_annotations(out)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_bounds() {
        assert!(LabelFilterConfig::default().validate().is_ok());
        let bad = LabelFilterConfig {
            min_area: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
