use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene, SceneId};
use crate::embedding::{dot, PromptEncoders, RegionView};
use crate::error::{Error, Result};
use crate::inference::{propose_regions, similarity_score, ProposalConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    #[default]
    Entropy,
    Margin,
}

/// What scene-level embeddings are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    /// Contrastive visual embeddings of the scene's proposals.
    #[default]
    ContrastiveVisual,
    /// Raw region descriptors, no encoder.
    Descriptors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub budget: usize,
    /// Weight of uncertainty against diversity gain.
    pub alpha: f64,
    pub embedding: EmbeddingSource,
    pub uncertainty: UncertaintyMode,
    /// Softmax temperature over per-category similarities.
    pub temperature: f64,
    pub proposals: ProposalConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            budget: 16,
            alpha: 0.5,
            embedding: EmbeddingSource::default(),
            uncertainty: UncertaintyMode::default(),
            temperature: 0.1,
            proposals: ProposalConfig::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self, pool: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.budget > pool {
            return Err(Error::Config(format!("budget {} exceeds the {pool} candidate scenes", self.budget)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("selection temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Per-scene inputs to the selection objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures {
    pub scene_id: SceneId,
    /// Unit-norm, or all zeros for a scene without regions.
    pub embedding: Vec<f64>,
    /// In `[0, 1]`.
    pub uncertainty: f64,
}

/// Normalized entropy, or one minus the top-two margin, of a probability
/// vector.
pub fn uncertainty_of(probs: &[f64], mode: UncertaintyMode) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    match mode {
        UncertaintyMode::Entropy => {
            let h: f64 = probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
            (h / (probs.len() as f64).ln()).clamp(0.0, 1.0)
        }
        UncertaintyMode::Margin => {
            let mut sorted = probs.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            (1.0 - (sorted[0] - sorted[1])).clamp(0.0, 1.0)
        }
    }
}

fn softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn unit_or_zero(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}

/// Scene embedding (normalized mean over proposals) and uncertainty of the
/// softmax over each category's best region similarity to its name.
pub fn scene_features(
    model: &impl PromptEncoders,
    ds: &Dataset,
    scenes: &[&Scene],
    cfg: &SelectionConfig,
) -> Result<Vec<SceneFeatures>> {
    let texts = ds
        .categories
        .iter()
        .map(|c| model.encode_text(&c.name))
        .collect::<Result<Vec<_>>>()?;
    scenes
        .par_iter()
        .map(|scene| {
            let boxes = propose_regions(scene, ds, &cfg.proposals);
            let regions = boxes
                .iter()
                .map(|b| model.encode_region(scene, b, RegionView::Proposal))
                .collect::<Result<Vec<_>>>()?;
            let dim = match cfg.embedding {
                EmbeddingSource::ContrastiveVisual => model.contrastive_visual().output_dim,
                EmbeddingSource::Descriptors => model.featurizer().dim(),
            };
            let mut mean = vec![0.0; dim];
            for (b, r) in boxes.iter().zip(&regions) {
                let v = match cfg.embedding {
                    EmbeddingSource::ContrastiveVisual => r.values().to_vec(),
                    EmbeddingSource::Descriptors => {
                        model.featurizer().featurize_region(scene, b, RegionView::Proposal)?
                    }
                };
                mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x);
            }
            let uncertainty = if regions.is_empty() || texts.is_empty() {
                1.0
            } else {
                let best: Vec<f64> = texts
                    .iter()
                    .map(|t| {
                        regions
                            .iter()
                            .map(|r| similarity_score(t, r))
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect();
                uncertainty_of(&softmax(&best, cfg.temperature), cfg.uncertainty)
            };
            Ok(SceneFeatures {
                scene_id: scene.id,
                embedding: unit_or_zero(mean),
                uncertainty,
            })
        })
        .collect()
}

/// Pairwise similarity `(cos + 1) / 2` in `[0, 1]`; zero vectors have
/// cosine 0.
pub fn pair_similarity(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b).clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Greedy maximization of `alpha * uncertainty + (1 - alpha) * gain / n`,
/// where gain is the facility-location increase over the pool of `n`
/// scenes. Candidates are visited in scene-id order and only a strictly
/// better score replaces the incumbent, so ties go to the lower id.
pub fn greedy_select(features: &[SceneFeatures], budget: usize, alpha: f64) -> Vec<SceneId> {
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by_key(|&i| features[i].scene_id);
    let n = features.len();
    let sim: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| pair_similarity(&features[i].embedding, &features[j].embedding)).collect())
        .collect();
    let mut cover = vec![0.0; n];
    let mut chosen = vec![false; n];
    let mut out = Vec::with_capacity(budget);
    for _ in 0..budget.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for &c in &order {
            if chosen[c] {
                continue;
            }
            let gain: f64 = (0..n).map(|i| (sim[i][c] - cover[i]).max(0.0)).sum();
            let score = alpha * features[c].uncertainty + (1.0 - alpha) * gain / n as f64;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((c, score));
            }
        }
        let (c, _) = best.expect("budget within pool");
        chosen[c] = true;
        for i in 0..n {
            cover[i] = cover[i].max(sim[i][c]);
        }
        out.push(features[c].scene_id);
    }
    out
}

/// Picks `cfg.budget` scenes from `scenes`, balancing model uncertainty and
/// embedding diversity.
pub fn select_subset(
    model: &impl PromptEncoders,
    ds: &Dataset,
    scenes: &[&Scene],
    cfg: &SelectionConfig,
) -> Result<Vec<SceneId>> {
    cfg.validate(scenes.len())?;
    if cfg.budget == 0 {
        return Ok(Vec::new());
    }
    let features = scene_features(model, ds, scenes, cfg)?;
    Ok(greedy_select(&features, cfg.budget, cfg.alpha))
}
