use rayon::prelude::*;

use super::info_nce_from_sims;
use crate::dataset::{CategoryId, SceneId};
use crate::embedding::{dot, EncoderBundle, EncoderRole, ForwardCache, ParamGrads};
use crate::error::Result;

/// One category's text features paired with one visual exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryExample {
    pub category_id: CategoryId,
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
}

/// A prompt into one training scene, with the regions it should match.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPrompt {
    pub category_id: CategoryId,
    pub features: Vec<f64>,
    pub positives: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneExample {
    pub scene_id: SceneId,
    pub regions: Vec<Vec<f64>>,
    pub prompts: Vec<DetectionPrompt>,
}

/// Gradients for every encoder of a bundle. The pretrained slot exists so
/// callers can check it stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub pretrained_text: ParamGrads,
    pub contrastive_text: ParamGrads,
    pub contrastive_visual: ParamGrads,
}

impl Grads {
    pub fn zeros(bundle: &EncoderBundle) -> Self {
        Grads {
            pretrained_text: ParamGrads::zeros_like(&bundle.pretrained_text),
            contrastive_text: ParamGrads::zeros_like(&bundle.contrastive_text),
            contrastive_visual: ParamGrads::zeros_like(&bundle.contrastive_visual),
        }
    }

    pub fn get(&self, role: EncoderRole) -> &ParamGrads {
        match role {
            EncoderRole::PretrainedText => &self.pretrained_text,
            EncoderRole::ContrastiveText => &self.contrastive_text,
            EncoderRole::ContrastiveVisual => &self.contrastive_visual,
        }
    }

    fn get_mut(&mut self, role: EncoderRole) -> &mut ParamGrads {
        match role {
            EncoderRole::PretrainedText => &mut self.pretrained_text,
            EncoderRole::ContrastiveText => &mut self.contrastive_text,
            EncoderRole::ContrastiveVisual => &mut self.contrastive_visual,
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for role in EncoderRole::ALL {
            self.get_mut(role).add_scaled(other.get(role), s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for role in EncoderRole::ALL {
            self.get_mut(role).scale(s);
        }
    }
}

fn backward(bundle: &EncoderBundle, role: EncoderRole, cache: &ForwardCache, grad: &[f64], grads: &mut Grads) {
    // The frozen teacher is evaluated off-tape.
    if bundle.encoder(role).frozen {
        return;
    }
    bundle.encoder(role).backward(cache, grad, grads.get_mut(role));
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, xi)| *o += a * xi);
}

/// Visual exemplar embeddings pulled toward the frozen text embedding of
/// their own category, against the other categories in the batch.
pub fn distillation_loss(bundle: &EncoderBundle, batch: &[CategoryExample], tau: f64) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros(bundle);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let teacher = batch
        .iter()
        .map(|c| bundle.pretrained_text.encode(&c.text))
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (i, c) in batch.iter().enumerate() {
        let cache = bundle.contrastive_visual.forward(&c.visual)?;
        let anchor = cache.output.values();
        let sims: Vec<f64> = teacher.iter().map(|t| dot(anchor, t.values())).collect();
        let mask: Vec<bool> = (0..batch.len()).map(|j| j == i).collect();
        let (loss, g) = info_nce_from_sims(&sims, &mask, tau).expect("diagonal positive");
        total += loss / n;
        let mut d_anchor = vec![0.0; anchor.len()];
        for (gj, t) in g.iter().zip(&teacher) {
            axpy(&mut d_anchor, gj / n, t.values());
        }
        backward(bundle, EncoderRole::ContrastiveVisual, &cache, &d_anchor, &mut grads);
    }
    Ok((total, grads))
}

/// Mean InfoNCE with `anchors[i]` matched to `cands[i]`; accumulates the
/// output-space gradients of both sides.
fn directional_nce(
    anchors: &[ForwardCache],
    cands: &[ForwardCache],
    d_anchor: &mut [Vec<f64>],
    d_cand: &mut [Vec<f64>],
    tau: f64,
) -> f64 {
    let n = anchors.len() as f64;
    let mut total = 0.0;
    for (i, anchor) in anchors.iter().enumerate() {
        let a = anchor.output.values();
        let sims: Vec<f64> = cands.iter().map(|c| dot(a, c.output.values())).collect();
        let mask: Vec<bool> = (0..cands.len()).map(|j| j == i).collect();
        let (loss, g) = info_nce_from_sims(&sims, &mask, tau).expect("diagonal positive");
        total += loss / n;
        for (j, gj) in g.iter().enumerate() {
            axpy(&mut d_anchor[i], gj / n, cands[j].output.values());
            axpy(&mut d_cand[j], gj / n, a);
        }
    }
    total
}

/// Symmetric InfoNCE between contrastive visual and contrastive text
/// embeddings: visual-to-text plus text-to-visual, each averaged over the
/// batch. `negatives` are text features that match no category; they only
/// appear as extra candidates on the visual-to-text side.
pub fn alignment_loss(
    bundle: &EncoderBundle,
    batch: &[CategoryExample],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros(bundle);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let vis = batch
        .iter()
        .map(|c| bundle.contrastive_visual.forward(&c.visual))
        .collect::<Result<Vec<_>>>()?;
    let txt = batch
        .iter()
        .map(|c| &c.text)
        .chain(negatives)
        .map(|t| bundle.contrastive_text.forward(t))
        .collect::<Result<Vec<_>>>()?;
    let dim = bundle.config.dim;
    let b = batch.len();
    let mut d_vis = vec![vec![0.0; dim]; b];
    let mut d_txt = vec![vec![0.0; dim]; txt.len()];
    let mut total = directional_nce(&vis, &txt, &mut d_vis, &mut d_txt, tau);
    total += directional_nce(&txt[..b], &vis, &mut d_txt[..b], &mut d_vis, tau);
    for (cache, d) in vis.iter().zip(&d_vis) {
        backward(bundle, EncoderRole::ContrastiveVisual, cache, d, &mut grads);
    }
    for (cache, d) in txt.iter().zip(&d_txt) {
        backward(bundle, EncoderRole::ContrastiveText, cache, d, &mut grads);
    }
    Ok((total, grads))
}

struct SceneTerm {
    loss: f64,
    counted: usize,
    skipped: usize,
    grads: Grads,
}

fn scene_term(bundle: &EncoderBundle, scene: &SceneExample, role: EncoderRole, tau: f64) -> Result<SceneTerm> {
    let mut grads = Grads::zeros(bundle);
    let regions = scene
        .regions
        .iter()
        .map(|r| bundle.contrastive_visual.forward(r))
        .collect::<Result<Vec<_>>>()?;
    let dim = bundle.config.dim;
    let mut d_regions = vec![vec![0.0; dim]; regions.len()];
    let mut loss = 0.0;
    let mut counted = 0;
    let mut skipped = 0;
    let mut terms = Vec::new();
    for p in &scene.prompts {
        let cache = bundle.encoder(role).forward(&p.features)?;
        let q = cache.output.values();
        let sims: Vec<f64> = regions.iter().map(|r| dot(q, r.output.values())).collect();
        match info_nce_from_sims(&sims, &p.positives, tau) {
            None => skipped += 1,
            Some((l, g)) => {
                loss += l;
                counted += 1;
                terms.push((cache, g));
            }
        }
    }
    for (cache, g) in &terms {
        let q = cache.output.values();
        let mut d_q = vec![0.0; dim];
        for (k, gk) in g.iter().enumerate() {
            axpy(&mut d_q, *gk, regions[k].output.values());
            axpy(&mut d_regions[k], *gk, q);
        }
        backward(bundle, role, cache, &d_q, &mut grads);
    }
    for (cache, d) in regions.iter().zip(&d_regions) {
        backward(bundle, EncoderRole::ContrastiveVisual, cache, d, &mut grads);
    }
    // Unscaled sums; the caller divides by the global pair count.
    Ok(SceneTerm {
        loss,
        counted,
        skipped,
        grads,
    })
}

/// Grounds prompts to regions: for every (scene, prompted category) the
/// prompt embedding must pick out the category's regions among all regions
/// of the scene. Returns the mean loss over counted pairs, gradients, and the
/// number of pairs skipped for having no positive region.
pub fn detection_loss(
    bundle: &EncoderBundle,
    scenes: &[SceneExample],
    role: EncoderRole,
    tau: f64,
) -> Result<(f64, Grads, usize)> {
    let terms = scenes
        .par_iter()
        .map(|s| scene_term(bundle, s, role, tau))
        .collect::<Result<Vec<_>>>()?;
    let counted: usize = terms.iter().map(|t| t.counted).sum();
    let skipped: usize = terms.iter().map(|t| t.skipped).sum();
    let mut grads = Grads::zeros(bundle);
    if counted == 0 {
        return Ok((0.0, grads, skipped));
    }
    let n = counted as f64;
    let mut loss = 0.0;
    for t in &terms {
        loss += t.loss;
        grads.add_scaled(&t.grads, 1.0 / n);
    }
    Ok((loss / n, grads, skipped))
}
