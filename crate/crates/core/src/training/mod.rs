//! Progressive multi-prompt training: InfoNCE losses with hand-written
//! gradients, the prompt-usage schedule, and the SGD loop.

mod losses;
mod run;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embedding::EncoderRole;
use crate::error::{Error, Result};

pub use losses::{
    alignment_loss, detection_loss, distillation_loss, CategoryExample, DetectionPrompt, Grads, SceneExample,
};
pub use run::{assemble_step, step_rng, train, PromptTable, StepBatch, VisualSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub temperature: f64,
    pub lambda_det: f64,
    pub lambda_distill: f64,
    pub lambda_align: f64,
    pub learning_rate: f64,
    pub category_batch: usize,
    pub scene_batch: usize,
    /// Random negative boxes added to each training scene.
    pub background_boxes: usize,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            temperature: 0.07,
            lambda_det: 1.0,
            lambda_distill: 1.0,
            lambda_align: 1.0,
            learning_rate: 0.05,
            category_batch: 16,
            scene_batch: 8,
            background_boxes: 4,
            total_steps: 600,
            seed: 17,
        }
    }
}

impl TrainingConfig {
    /// Structural checks. An all-zero loss weighting is allowed here (it is
    /// a no-op run); [`TrainingConfig::require_signal`] rejects it.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [
            ("lambda_det", self.lambda_det),
            ("lambda_distill", self.lambda_distill),
            ("lambda_align", self.lambda_align),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative".into());
        }
        if self.total_steps == 0 || !self.total_steps.is_multiple_of(2) {
            return bad(format!("total_steps must be even and positive, got {}", self.total_steps));
        }
        if self.category_batch == 0 || self.scene_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn require_signal(&self) -> Result<()> {
        if self.lambda_det + self.lambda_distill + self.lambda_align <= 0.0 {
            return Err(Error::Config("training: at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Usage probabilities `(pretrained, contrastive text, contrastive visual)`
/// at step `t` of `total`.
pub fn schedule_probs(t: u64, total: u64) -> Result<(f64, f64, f64)> {
    if total == 0 || !total.is_multiple_of(2) {
        return Err(Error::Config(format!("schedule needs an even positive step count, got {total}")));
    }
    if t > total {
        return Err(Error::Config(format!("step {t} is past the schedule end {total}")));
    }
    if 2 * t >= total {
        return Ok((0.0, 0.5, 0.5));
    }
    let c = t as f64 / total as f64;
    Ok((1.0 - 2.0 * c, c, c))
}

/// Picks an encoder from the schedule using a uniform draw in `[0, 1)`.
pub fn sample_encoder(probs: (f64, f64, f64), u: f64) -> EncoderRole {
    if u < probs.0 {
        EncoderRole::PretrainedText
    } else if u < probs.0 + probs.1 {
        EncoderRole::ContrastiveText
    } else {
        EncoderRole::ContrastiveVisual
    }
}

/// Multi-positive InfoNCE over raw similarities. Returns the loss and its
/// derivative with respect to each similarity. `None` when no candidate is
/// positive.
pub fn info_nce_from_sims(sims: &[f64], positive: &[bool], tau: f64) -> Option<(f64, Vec<f64>)> {
    debug_assert_eq!(sims.len(), positive.len());
    if !positive.iter().any(|p| *p) {
        return None;
    }
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let max_all = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_pos = logits
        .iter()
        .zip(positive)
        .filter(|(_, p)| **p)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let exp_all: Vec<f64> = logits.iter().map(|l| (l - max_all).exp()).collect();
    let z_all: f64 = exp_all.iter().sum();
    let exp_pos: Vec<f64> = logits
        .iter()
        .zip(positive)
        .map(|(l, p)| if *p { (l - max_pos).exp() } else { 0.0 })
        .collect();
    let z_pos: f64 = exp_pos.iter().sum();
    let loss = (max_all + z_all.ln()) - (max_pos + z_pos.ln());
    let grad = exp_all
        .iter()
        .zip(&exp_pos)
        .map(|(a, p)| (a / z_all - p / z_pos) / tau)
        .collect();
    Some((loss.max(0.0), grad))
}

/// Single-positive InfoNCE on embeddings.
pub fn info_nce(
    anchor: &crate::embedding::Embedding,
    candidates: &[crate::embedding::Embedding],
    positive_index: usize,
    tau: f64,
) -> Result<f64> {
    if candidates.is_empty() || positive_index >= candidates.len() {
        return Err(Error::Config("info_nce needs a valid positive among non-empty candidates".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let sims: Vec<f64> = candidates.iter().map(|c| crate::embedding::cosine(anchor, c)).collect();
    let mask: Vec<bool> = (0..sims.len()).map(|i| i == positive_index).collect();
    Ok(info_nce_from_sims(&sims, &mask, tau).expect("one positive").0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub encoder: EncoderRole,
    pub det: f64,
    pub distill: f64,
    pub align: f64,
    pub total: f64,
    /// Scene/category pairs without a positive region.
    pub skipped: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.det.is_finite() && self.distill.is_finite() && self.align.is_finite() && self.total.is_finite()
    }
}

pub const LOSS_CSV_HEADER: &str = "step,sampled_encoder,det,distill,align";

pub fn loss_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.encoder.name(), r.det, r.distill, r.align);
    }
    out
}
