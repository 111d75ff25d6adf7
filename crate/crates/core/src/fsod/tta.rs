use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, Dataset, Scene};
use crate::embedding::PromptEncoders;
use crate::error::{Error, Result};
use crate::geometry::GeomTransform;
use crate::inference::{detect_with_queries, DetectConfig, Detection, Query};
use crate::postproc::batched_nms;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub scales: Vec<f64>,
    pub hflip: bool,
    pub merge_iou: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            scales: vec![0.8, 1.0, 1.2],
            hflip: true,
            merge_iou: 0.5,
        }
    }
}

impl TtaConfig {
    /// Only the untransformed view.
    pub fn identity() -> Self {
        TtaConfig {
            scales: vec![1.0],
            hflip: false,
            merge_iou: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("tta scales must be positive".into()));
        }
        if !self.scales.contains(&1.0) {
            return Err(Error::Config("tta scales must include 1.0".into()));
        }
        if !(0.0..=1.0).contains(&self.merge_iou) {
            return Err(Error::Config("tta merge_iou must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// (scale, flipped) pairs in run order.
    pub fn combinations(&self) -> Vec<(f64, bool)> {
        let flips: &[bool] = if self.hflip { &[false, true] } else { &[false] };
        self.scales
            .iter()
            .flat_map(|s| flips.iter().map(move |f| (*s, *f)))
            .collect()
    }
}

/// Detections from every (scale, flip) view mapped back to the original
/// frame and concatenated in run order. The untransformed view carries no
/// transform tag.
pub fn tta_candidates(
    model: &impl PromptEncoders,
    scene: &Scene,
    ds: &Dataset,
    queries: &[(CategoryId, Query)],
    tta: &TtaConfig,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    tta.validate()?;
    let mut pool = Vec::new();
    for (scale, flip) in tta.combinations() {
        if scale == 1.0 && !flip {
            pool.extend(detect_with_queries(model, scene, ds, queries, cfg)?);
            continue;
        }
        let mut chain = Vec::new();
        if scale != 1.0 {
            chain.push(GeomTransform::Scale { factor: scale });
        }
        if flip {
            chain.push(GeomTransform::HorizontalFlip {
                width: scene.width * scale,
            });
        }
        let view = chain.iter().fold(scene.clone(), |s, t| s.transformed(t));
        let id = chain.iter().map(GeomTransform::id).collect::<Vec<_>>().join("+");
        for mut d in detect_with_queries(model, &view, ds, queries, cfg)? {
            d.bbox = chain
                .iter()
                .rev()
                .fold(d.bbox, |b, t| t.inverse(&b))
                .clip(scene.width, scene.height);
            d.source.transform = Some(id.clone());
            pool.push(d);
        }
    }
    Ok(pool)
}

/// TTA detection: candidates from all views merged by batched NMS. A single
/// identity view returns plain detection unchanged.
pub fn tta_detect(
    model: &impl PromptEncoders,
    scene: &Scene,
    ds: &Dataset,
    queries: &[(CategoryId, Query)],
    tta: &TtaConfig,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let pool = tta_candidates(model, scene, ds, queries, tta, cfg)?;
    if tta.combinations().len() == 1 {
        return Ok(pool);
    }
    Ok(batched_nms(pool, tta.merge_iou))
}
