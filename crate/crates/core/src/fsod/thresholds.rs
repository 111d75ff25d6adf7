use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, CategoryId, Scene, SceneId};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_detections, EvalConfig, Scored};
use crate::inference::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSearch {
    pub step: f64,
    pub max: f64,
    /// Threshold for categories without validation boxes.
    pub default: f64,
}

impl Default for ThresholdSearch {
    fn default() -> Self {
        ThresholdSearch {
            step: 0.05,
            max: 0.95,
            default: 0.0,
        }
    }
}

impl ThresholdSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && (0.0..=1.0).contains(&self.max) && (0.0..=1.0).contains(&self.default)) {
            return Err(Error::Config("threshold search needs step > 0 and max, default in [0, 1]".into()));
        }
        Ok(())
    }

    /// `0, step, 2*step, ...` up to `max`, computed by multiplication so
    /// grid points are exact multiples.
    pub fn grid(&self) -> Vec<f64> {
        let n = (self.max / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub thresholds: BTreeMap<CategoryId, f64>,
    /// Categories that got the default because validation had no boxes.
    pub defaulted: Vec<CategoryId>,
}

impl ThresholdMap {
    /// Keeps detections scoring at least their category's threshold;
    /// categories missing from the map pass unfiltered.
    pub fn apply(&self, dets: Vec<Detection>) -> Vec<Detection> {
        dets.into_iter()
            .filter(|d| self.thresholds.get(&d.category_id).is_none_or(|t| d.score >= *t))
            .collect()
    }
}

/// AP of one category over the IoU grid, or `None` without ground truth.
pub fn category_ap(
    dets: &[Scored],
    gts: &[Annotation],
    scenes: &BTreeMap<SceneId, &Scene>,
    category: CategoryId,
    eval: &EvalConfig,
) -> Option<f64> {
    let d: Vec<Scored> = dets.iter().filter(|d| d.category_id == category).cloned().collect();
    let g: Vec<Annotation> = gts.iter().filter(|g| g.category_id == category).cloned().collect();
    evaluate_detections(&d, &g, scenes, eval).get(&category).map(|s| s.mean)
}

/// Per-category threshold maximizing that category's AP; ties go to the
/// lower threshold. Categories are independent because each category's AP
/// only sees its own detections.
pub fn search_thresholds(
    dets: &[Detection],
    gts: &[Annotation],
    scenes: &BTreeMap<SceneId, &Scene>,
    categories: &[CategoryId],
    eval: &EvalConfig,
    search: &ThresholdSearch,
) -> Result<ThresholdMap> {
    search.validate()?;
    let grid = search.grid();
    let scored: Vec<Scored> = dets.iter().map(Scored::from).collect();
    let mut map = ThresholdMap::default();
    for &cat in categories {
        let own: Vec<Scored> = scored.iter().filter(|d| d.category_id == cat).cloned().collect();
        let mut best: Option<(f64, f64)> = None;
        for &t in &grid {
            let kept: Vec<Scored> = own.iter().filter(|d| d.score >= t).cloned().collect();
            let Some(ap) = category_ap(&kept, gts, scenes, cat, eval) else {
                break;
            };
            if best.is_none_or(|(_, b)| ap > b) {
                best = Some((t, ap));
            }
        }
        match best {
            Some((t, _)) => {
                map.thresholds.insert(cat, t);
            }
            None => {
                map.thresholds.insert(cat, search.default);
                map.defaulted.push(cat);
            }
        }
    }
    Ok(map)
}
