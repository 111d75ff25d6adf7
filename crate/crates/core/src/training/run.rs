use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    alignment_loss, detection_loss, distillation_loss, sample_encoder, schedule_probs, CategoryExample,
    DetectionPrompt, Grads, LossReport, SceneExample, TrainingConfig,
};
use crate::dataset::{CategoryId, Dataset, Scene, SceneId, Split};
use crate::embedding::{EncoderBundle, EncoderRole, RegionView};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::seed::{self, tag};

/// Text prompts per category (the category name first) plus negative
/// prompts that must match nothing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptTable {
    pub prompts: BTreeMap<CategoryId, Vec<String>>,
    pub negatives: Vec<String>,
}

impl PromptTable {
    pub fn from_names(ds: &Dataset) -> Self {
        PromptTable {
            prompts: ds.categories.iter().map(|c| (c.id, vec![c.name.clone()])).collect(),
            negatives: Vec::new(),
        }
    }

    pub fn texts_of(&self, category: CategoryId) -> &[String] {
        self.prompts.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every prompt string in the table, for tokenizer vocabularies.
    pub fn vocabulary(&self) -> Vec<String> {
        self.prompts.values().flatten().chain(&self.negatives).cloned().collect()
    }
}

/// Where visual prompts for the detection loss come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VisualSource {
    /// A crop of an instance in the scene being trained on.
    InImage,
    /// An exemplar from a scene outside the current scene batch.
    #[default]
    OutImage,
}

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    seed::rng(&[tag::STEP, seed, step])
}

/// Everything one SGD step consumes, assembled from the step's own RNG so a
/// resumed run replays identical batches.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub role: EncoderRole,
    pub categories: Vec<CategoryExample>,
    pub negatives: Vec<Vec<f64>>,
    pub scenes: Vec<SceneExample>,
    /// Visual prompts that had no usable exemplar.
    pub missing_exemplars: usize,
}

const BACKGROUND_MAX_IOU: f64 = 0.1;
const BACKGROUND_ATTEMPTS: usize = 20;

fn background_boxes(scene: &Scene, taken: &[BBox], n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..BACKGROUND_ATTEMPTS {
            let w = rng.random_range(0.1..=0.3) * scene.width;
            let h = rng.random_range(0.1..=0.3) * scene.height;
            let x = rng.random_range(0.0..=scene.width - w);
            let y = rng.random_range(0.0..=scene.height - h);
            let b = BBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
            };
            if taken.iter().all(|t| iou(t, &b) < BACKGROUND_MAX_IOU) {
                out.push(b);
                break;
            }
        }
    }
    out
}

fn pick_text<'a>(prompts: &'a PromptTable, ds: &'a Dataset, cat: CategoryId, rng: &mut ChaCha8Rng) -> Result<&'a str> {
    let texts = prompts.texts_of(cat);
    match texts.choose(rng) {
        Some(t) => Ok(t),
        None => Ok(&ds
            .category(cat)
            .ok_or(Error::UnknownId {
                kind: "category",
                id: cat as u64,
            })?
            .name),
    }
}

pub fn assemble_step(
    ds: &Dataset,
    bundle: &EncoderBundle,
    cfg: &TrainingConfig,
    prompts: &PromptTable,
    visual_source: VisualSource,
    step: u64,
) -> Result<StepBatch> {
    let mut rng = step_rng(cfg.seed, step);
    let role = sample_encoder(schedule_probs(step, cfg.total_steps)?, rng.random::<f64>());
    let tok = &bundle.tokenizer;
    let feat = &bundle.featurizer;
    let train: BTreeSet<SceneId> = ds.splits.train.iter().copied().collect();

    let exemplar_features = |r: &crate::dataset::ExemplarRef| -> Result<Vec<f64>> {
        let ann = ds.annotation(r.annotation_id).ok_or(Error::UnknownId {
            kind: "annotation",
            id: r.annotation_id,
        })?;
        let scene = ds.scene(ann.scene_id).ok_or(Error::UnknownId {
            kind: "image",
            id: ann.scene_id,
        })?;
        feat.featurize_region(scene, &ann.bbox, RegionView::Prompt)
    };

    let eligible: Vec<CategoryId> = ds
        .categories
        .iter()
        .map(|c| c.id)
        .filter(|c| !ds.exemplars_of(*c).is_empty())
        .collect();
    let chosen: Vec<CategoryId> = eligible
        .choose_multiple(&mut rng, cfg.category_batch.min(eligible.len()))
        .copied()
        .collect();
    let mut categories = Vec::with_capacity(chosen.len());
    for cat in chosen {
        let ex = ds.exemplars_of(cat).choose(&mut rng).expect("eligible category has exemplars");
        let text = pick_text(prompts, ds, cat, &mut rng)?;
        categories.push(CategoryExample {
            category_id: cat,
            text: tok.featurize_text(text)?,
            visual: exemplar_features(ex)?,
        });
    }
    let negatives = prompts
        .negatives
        .iter()
        .map(|n| tok.featurize_text(n))
        .collect::<Result<Vec<_>>>()?;

    let candidates: Vec<&Scene> = ds
        .split_scenes(Split::Train)
        .filter(|s| ds.annotations_of(s.id).next().is_some())
        .collect();
    let batch: Vec<&Scene> = candidates
        .choose_multiple(&mut rng, cfg.scene_batch.min(candidates.len()))
        .copied()
        .collect();
    let in_batch: BTreeSet<SceneId> = batch.iter().map(|s| s.id).collect();
    let mut scenes = Vec::with_capacity(batch.len());
    let mut missing_exemplars = 0;
    for scene in batch {
        let anns: Vec<_> = ds.annotations_of(scene.id).collect();
        let mut boxes: Vec<BBox> = anns.iter().map(|a| a.bbox).collect();
        let labels: Vec<Option<CategoryId>> = anns.iter().map(|a| Some(a.category_id)).collect();
        let bg = background_boxes(scene, &boxes, cfg.background_boxes, &mut rng);
        let labels: Vec<Option<CategoryId>> = labels.into_iter().chain(bg.iter().map(|_| None)).collect();
        boxes.extend(bg);
        let regions = boxes
            .iter()
            .map(|b| feat.featurize_region(scene, b, RegionView::Proposal))
            .collect::<Result<Vec<_>>>()?;
        let present: BTreeSet<CategoryId> = anns.iter().map(|a| a.category_id).collect();
        let mut scene_prompts = Vec::with_capacity(present.len());
        for cat in present {
            let features = match role {
                EncoderRole::PretrainedText | EncoderRole::ContrastiveText => {
                    tok.featurize_text(pick_text(prompts, ds, cat, &mut rng)?)?
                }
                EncoderRole::ContrastiveVisual => {
                    let outside: Vec<_> = ds
                        .exemplars_of(cat)
                        .iter()
                        .filter(|e| !in_batch.contains(&e.scene_id) && train.contains(&e.scene_id))
                        .collect();
                    let in_scene: Vec<BBox> = anns.iter().filter(|a| a.category_id == cat).map(|a| a.bbox).collect();
                    match (visual_source, outside.choose(&mut rng)) {
                        (VisualSource::OutImage, Some(e)) => exemplar_features(e)?,
                        _ => {
                            if visual_source == VisualSource::OutImage {
                                missing_exemplars += 1;
                            }
                            let b = in_scene.choose(&mut rng).expect("category present in scene");
                            feat.featurize_region(scene, b, RegionView::Prompt)?
                        }
                    }
                }
            };
            scene_prompts.push(DetectionPrompt {
                category_id: cat,
                features,
                positives: labels.iter().map(|l| *l == Some(cat)).collect(),
            });
        }
        scenes.push(SceneExample {
            scene_id: scene.id,
            regions,
            prompts: scene_prompts,
        });
    }

    Ok(StepBatch {
        role,
        categories,
        negatives,
        scenes,
        missing_exemplars,
    })
}

/// Runs SGD from `bundle.step` up to `cfg.total_steps`, calling `on_step`
/// after every update. A resumed bundle continues exactly where it stopped.
pub fn train(
    ds: &Dataset,
    bundle: &mut EncoderBundle,
    cfg: &TrainingConfig,
    prompts: &PromptTable,
    visual_source: VisualSource,
    mut on_step: impl FnMut(&EncoderBundle, &LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    bundle.validate()?;
    if ds.splits.train.is_empty() {
        return Err(Error::Missing("dataset has no train split".into()));
    }
    let tau = cfg.temperature;
    let mut reports = Vec::new();
    for step in bundle.step..cfg.total_steps {
        let batch = assemble_step(ds, bundle, cfg, prompts, visual_source, step)?;
        let mut grads = Grads::zeros(bundle);
        let (mut det, mut distill, mut align, mut skipped) = (0.0, 0.0, 0.0, batch.missing_exemplars);
        if cfg.lambda_det > 0.0 {
            let (l, g, s) = detection_loss(bundle, &batch.scenes, batch.role, tau)?;
            det = l;
            skipped += s;
            grads.add_scaled(&g, cfg.lambda_det);
        }
        if cfg.lambda_distill > 0.0 {
            let (l, g) = distillation_loss(bundle, &batch.categories, tau)?;
            distill = l;
            grads.add_scaled(&g, cfg.lambda_distill);
        }
        if cfg.lambda_align > 0.0 {
            let (l, g) = alignment_loss(bundle, &batch.categories, &batch.negatives, tau)?;
            align = l;
            grads.add_scaled(&g, cfg.lambda_align);
        }
        let report = LossReport {
            step,
            encoder: batch.role,
            det,
            distill,
            align,
            total: cfg.lambda_det * det + cfg.lambda_distill * distill + cfg.lambda_align * align,
            skipped,
        };
        if !report.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("non-finite loss: {report:?}"),
            });
        }
        if cfg.lambda_det + cfg.lambda_distill + cfg.lambda_align > 0.0 {
            for role in [EncoderRole::ContrastiveText, EncoderRole::ContrastiveVisual] {
                bundle.encoder_mut(role).sgd_step(grads.get(role), cfg.learning_rate);
            }
            if !(bundle.contrastive_text.all_finite() && bundle.contrastive_visual.all_finite()) {
                return Err(Error::Diverged {
                    step,
                    message: format!("parameters became non-finite; last report {report:?}"),
                });
            }
        }
        bundle.step = step + 1;
        on_step(bundle, &report)?;
        reports.push(report);
    }
    Ok(reports)
}
