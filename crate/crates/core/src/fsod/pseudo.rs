use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, CategoryId, Dataset, Provenance, Scene, SceneId, Split};
use crate::embedding::PromptEncoders;
use crate::error::{Error, Result};
use crate::geometry::{iou, score_order};
use crate::inference::{detect_with_queries, resolve_all, DetectConfig, PromptSpec};
use crate::seed::{self, tag};

/// Removes all boxes of about `fraction` of the (scene, category) pairs in
/// the train and val splits. Train scenes list every category actually
/// present as known, so hidden ones become pseudo-label targets; val scenes
/// list only the categories still labeled, so evaluation restricted to
/// known categories stays sound. Returns the reduced dataset and the hidden
/// annotations.
pub fn hide_annotations(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<Annotation>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("hidden fraction must be in [0, 1], got {fraction}")));
    }
    let partial: BTreeSet<SceneId> = ds
        .splits
        .get(Split::Train)
        .iter()
        .chain(ds.splits.get(Split::Val))
        .copied()
        .collect();
    let mut pairs: Vec<(SceneId, CategoryId)> = Vec::new();
    for &sid in &partial {
        let cats: BTreeSet<CategoryId> = ds.annotations_of(sid).map(|a| a.category_id).collect();
        pairs.extend(cats.into_iter().map(|c| (sid, c)));
    }
    let n = (fraction * pairs.len() as f64).round() as usize;
    let mut rng = seed::rng(&[tag::FIXTURE, seed, 0x4849_4445]);
    let hidden: BTreeSet<(SceneId, CategoryId)> = pairs.choose_multiple(&mut rng, n).copied().collect();
    let (gone, kept): (Vec<Annotation>, Vec<Annotation>) = ds
        .annotations
        .iter()
        .cloned()
        .partition(|a| hidden.contains(&(a.scene_id, a.category_id)));
    let scenes: Vec<Scene> = ds
        .scenes
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if partial.contains(&s.id) {
                let is_train = ds.splits.get(Split::Train).contains(&s.id);
                let cats: BTreeSet<CategoryId> = ds
                    .annotations_of(s.id)
                    .map(|a| a.category_id)
                    .filter(|c| is_train || !hidden.contains(&(s.id, *c)))
                    .collect();
                s.known_categories = Some(cats.into_iter().collect());
            }
            s
        })
        .collect();
    let out = ds.with_scenes(scenes)?.with_annotations(kept)?;
    Ok((out, gone))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Minimum detection score for a pseudo-label.
    pub floor: f64,
    /// Candidates overlapping an existing box at this IoU or more are
    /// dropped.
    pub duplicate_iou: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            floor: 0.9,
            duplicate_iou: 0.5,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::Config(format!("pseudo-label floor must be in (0, 1], got {}", self.floor)));
        }
        if !(0.0..=1.0).contains(&self.duplicate_iou) {
            return Err(Error::Config("duplicate_iou must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// High-confidence detections of known but unlabeled categories in train
/// scenes. Candidates are taken in score order and skipped when they
/// overlap an existing annotation or an accepted candidate.
pub fn pseudo_label(
    model: &impl PromptEncoders,
    ds: &Dataset,
    cfg: &PseudoLabelConfig,
    detect: &DetectConfig,
) -> Result<Vec<Annotation>> {
    cfg.validate()?;
    let prompts: Vec<(CategoryId, PromptSpec)> =
        ds.categories.iter().map(|c| (c.id, PromptSpec::text(c.name.clone()))).collect();
    let all_queries = resolve_all(model, &prompts, ds)?;
    let scenes: Vec<&Scene> = ds.split_scenes(Split::Train).collect();
    let per_scene = scenes
        .par_iter()
        .map(|scene| -> Result<Vec<Annotation>> {
            let Some(known) = &scene.known_categories else {
                return Ok(Vec::new());
            };
            let labeled: BTreeSet<CategoryId> = ds.annotations_of(scene.id).map(|a| a.category_id).collect();
            let targets: BTreeSet<CategoryId> = known.iter().copied().filter(|c| !labeled.contains(c)).collect();
            if targets.is_empty() {
                return Ok(Vec::new());
            }
            let queries: Vec<_> = all_queries.iter().filter(|(c, _)| targets.contains(c)).cloned().collect();
            let dets = detect_with_queries(model, scene, ds, &queries, detect)?;
            let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
            let mut taken: Vec<_> = ds.annotations_of(scene.id).map(|a| a.bbox).collect();
            let mut out = Vec::new();
            for i in score_order(&scores) {
                let d = &dets[i];
                if d.score < cfg.floor || taken.iter().any(|t| iou(t, &d.bbox) >= cfg.duplicate_iou) {
                    continue;
                }
                taken.push(d.bbox);
                out.push(Annotation {
                    id: 0,
                    scene_id: scene.id,
                    category_id: d.category_id,
                    bbox: d.bbox,
                    provenance: Provenance::PseudoLabel,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut next = ds.next_annotation_id();
    let mut added = Vec::new();
    for mut a in per_scene.into_iter().flatten() {
        a.id = next;
        next += 1;
        added.push(a);
    }
    Ok(added)
}

/// Precision of `added` against `truth`: the share of added labels that
/// match an unclaimed truth box of the same category at IoU >= 0.5.
pub fn label_precision(added: &[Annotation], truth: &[Annotation]) -> Option<f64> {
    if added.is_empty() {
        return None;
    }
    let mut pool: BTreeMap<(SceneId, CategoryId), Vec<(crate::geometry::BBox, bool)>> = BTreeMap::new();
    for t in truth {
        pool.entry((t.scene_id, t.category_id)).or_default().push((t.bbox, false));
    }
    let mut hits = 0;
    for a in added {
        if let Some(cands) = pool.get_mut(&(a.scene_id, a.category_id)) {
            let best = cands
                .iter_mut()
                .filter(|(b, used)| !*used && iou(b, &a.bbox) >= 0.5)
                .max_by(|x, y| iou(&x.0, &a.bbox).total_cmp(&iou(&y.0, &a.bbox)));
            if let Some(slot) = best {
                slot.1 = true;
                hits += 1;
            }
        }
    }
    Some(hits as f64 / added.len() as f64)
}
