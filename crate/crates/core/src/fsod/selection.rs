use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, CategoryId, Dataset, Provenance, Scene, SceneId, Split};
use crate::embedding::PromptEncoders;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_detections, mean_ap, EvalConfig, Scored};
use crate::inference::{detect_scenes, resolve_prompt, DetectConfig, Detection, PromptSpec, Query};
use crate::training::VisualSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TextFactor {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "original+augmented")]
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnnotationFactor {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "original+pseudo-labeled")]
    PseudoLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InferenceFactor {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "visual")]
    Visual,
    #[serde(rename = "text+visual")]
    TextVisual,
}

/// The factors fixed when a checkpoint is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrainingFactors {
    pub text_prompt: TextFactor,
    pub visual_prompt: VisualSource,
    pub annotations: AnnotationFactor,
}

impl TrainingFactors {
    pub fn grid() -> Vec<TrainingFactors> {
        let mut out = Vec::with_capacity(8);
        for text_prompt in [TextFactor::Original, TextFactor::Augmented] {
            for visual_prompt in [VisualSource::InImage, VisualSource::OutImage] {
                for annotations in [AnnotationFactor::Original, AnnotationFactor::PseudoLabeled] {
                    out.push(TrainingFactors {
                        text_prompt,
                        visual_prompt,
                        annotations,
                    });
                }
            }
        }
        out
    }

    /// Short stable name, used for checkpoint file names.
    pub fn slug(&self) -> String {
        format!(
            "{}-{}-{}",
            match self.text_prompt {
                TextFactor::Original => "txt",
                TextFactor::Augmented => "txtaug",
            },
            match self.visual_prompt {
                VisualSource::InImage => "in",
                VisualSource::OutImage => "out",
            },
            match self.annotations {
                AnnotationFactor::Original => "gt",
                AnnotationFactor::PseudoLabeled => "gtpl",
            }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorAssignment {
    pub text_prompt: TextFactor,
    pub visual_prompt: VisualSource,
    pub annotations: AnnotationFactor,
    pub inference: InferenceFactor,
}

impl FactorAssignment {
    /// All 24 assignments, training factors outermost.
    pub fn grid() -> Vec<FactorAssignment> {
        TrainingFactors::grid()
            .into_iter()
            .flat_map(|t| {
                [InferenceFactor::Text, InferenceFactor::Visual, InferenceFactor::TextVisual]
                    .into_iter()
                    .map(move |inference| FactorAssignment {
                        text_prompt: t.text_prompt,
                        visual_prompt: t.visual_prompt,
                        annotations: t.annotations,
                        inference,
                    })
            })
            .collect()
    }

    pub fn training(&self) -> TrainingFactors {
        TrainingFactors {
            text_prompt: self.text_prompt,
            visual_prompt: self.visual_prompt,
            annotations: self.annotations,
        }
    }
}

impl fmt::Display for FactorAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inf = match self.inference {
            InferenceFactor::Text => "text",
            InferenceFactor::Visual => "visual",
            InferenceFactor::TextVisual => "text+visual",
        };
        write!(f, "{}/{}", self.training().slug(), inf)
    }
}

/// One checkpoint evaluated under one factor assignment.
pub struct Candidate<'a, M> {
    pub checkpoint: String,
    pub assignment: FactorAssignment,
    pub model: &'a M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub domain: String,
    pub checkpoint: String,
    pub assignment: FactorAssignment,
    pub val_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Every (candidate, domain) evaluation, candidates outermost.
    pub entries: Vec<SelectionEntry>,
    /// Best entry per domain; ties keep the earlier candidate.
    pub winners: BTreeMap<String, SelectionEntry>,
}

/// Resolved queries for `categories` under an inference factor. Visual
/// queries need exemplars; categories without any fall back to text under
/// text+visual and are skipped under visual.
pub fn inference_queries(
    model: &impl PromptEncoders,
    ds: &Dataset,
    categories: &[CategoryId],
    inference: InferenceFactor,
    exemplars: usize,
) -> Result<Vec<(CategoryId, Query)>> {
    let mut out = Vec::with_capacity(categories.len());
    for &cat in categories {
        let name = &ds
            .category(cat)
            .ok_or(Error::UnknownId {
                kind: "category",
                id: cat as u64,
            })?
            .name;
        let visual = match PromptSpec::from_exemplar_index(ds, cat, exemplars) {
            Ok(spec) => Some(spec),
            Err(Error::Exemplars { .. }) => None,
            Err(e) => return Err(e),
        };
        let spec = match (inference, visual) {
            (InferenceFactor::Text, _) | (InferenceFactor::TextVisual, None) => PromptSpec::text(name),
            (InferenceFactor::Visual, Some(v)) => v,
            (InferenceFactor::Visual, None) => continue,
            (InferenceFactor::TextVisual, Some(v)) => PromptSpec::ensemble(name, v.exemplars),
        };
        out.push((cat, resolve_prompt(model, &spec, cat, ds)?));
    }
    Ok(out)
}

pub fn ground_truth(ds: &Dataset, scenes: &[&Scene]) -> Vec<Annotation> {
    scenes
        .iter()
        .flat_map(|s| ds.annotations_of(s.id))
        .filter(|a| a.provenance == Provenance::GroundTruth)
        .cloned()
        .collect()
}

/// mAP of `dets` against the ground truth of `scenes`.
pub fn scenes_map(ds: &Dataset, scenes: &[&Scene], dets: &[Detection], eval: &EvalConfig) -> f64 {
    let lookup: BTreeMap<SceneId, &Scene> = scenes.iter().map(|s| (s.id, *s)).collect();
    let scored: Vec<Scored> = dets.iter().map(Scored::from).collect();
    mean_ap(&evaluate_detections(&scored, &ground_truth(ds, scenes), &lookup, eval)).unwrap_or(0.0)
}

/// Validation mAP of one model/inference factor on one domain, restricted
/// to each scene's known categories.
pub fn domain_val_map(
    model: &impl PromptEncoders,
    ds: &Dataset,
    split: Split,
    domain: &str,
    inference: InferenceFactor,
    eval: &EvalConfig,
    detect: &DetectConfig,
) -> Result<f64> {
    let eval = EvalConfig {
        restrict_known: true,
        ..eval.clone()
    };
    let scenes: Vec<&Scene> = ds.split_scenes(split).filter(|s| s.domain == domain).collect();
    let queries = inference_queries(model, ds, &ds.domain_categories(domain), inference, eval.visual_exemplars)?;
    let dets = detect_scenes(model, &scenes, ds, &queries, detect)?;
    Ok(scenes_map(ds, &scenes, &dets, &eval))
}

/// Evaluates every candidate on every domain of `split` and keeps the best
/// per domain.
pub fn select_checkpoint<M: PromptEncoders>(
    candidates: &[Candidate<'_, M>],
    ds: &Dataset,
    split: Split,
    eval: &EvalConfig,
    detect: &DetectConfig,
) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return Err(Error::Missing("checkpoint selection needs at least one candidate".into()));
    }
    let domains = ds.domains();
    let jobs: Vec<(usize, &String)> = (0..candidates.len())
        .flat_map(|c| domains.iter().map(move |d| (c, d)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|(c, domain)| {
            let cand = &candidates[*c];
            Ok(SelectionEntry {
                domain: (*domain).clone(),
                checkpoint: cand.checkpoint.clone(),
                assignment: cand.assignment,
                val_map: domain_val_map(cand.model, ds, split, domain, cand.assignment.inference, eval, detect)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut winners: BTreeMap<String, SelectionEntry> = BTreeMap::new();
    for e in &entries {
        match winners.get(&e.domain) {
            Some(w) if w.val_map >= e.val_map => {}
            _ => {
                winners.insert(e.domain.clone(), e.clone());
            }
        }
    }
    Ok(SelectionReport { entries, winners })
}
