//! Reference implementations written independently of the library, used to
//! check it on random instances.

use std::collections::{BTreeMap, BTreeSet};

/// `[x0, y0, x1, y1]`.
pub type RawBox = [f64; 4];

pub fn iou_ref(a: &RawBox, b: &RawBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &RawBox| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Priority rank: higher score first, lower index on ties.
fn outranks(scores: &[f64], j: usize, i: usize) -> bool {
    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
}

/// A box survives iff no surviving box that outranks it overlaps it by
/// more than `thr`. Evaluated over the full pairwise IoU matrix.
pub fn nms_ref(boxes: &[RawBox], scores: &[f64], groups: &[u32], thr: f64) -> BTreeSet<usize> {
    let n = boxes.len();
    let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou_ref(&boxes[i], &boxes[j])).collect()).collect();
    let mut keep: Vec<Option<bool>> = vec![None; n];
    // Resolve in rank order so every box's dominators are already decided.
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in &rank {
        let suppressed = (0..n).any(|j| {
            j != i && groups[j] == groups[i] && outranks(scores, j, i) && keep[j] == Some(true) && m[i][j] > thr
        });
        keep[i] = Some(!suppressed);
    }
    (0..n).filter(|&i| keep[i] == Some(true)).collect()
}

/// One detection for the AP oracle.
#[derive(Debug, Clone)]
pub struct RefDet {
    pub image: u64,
    pub bbox: RawBox,
    pub score: f64,
}

/// Greedy COCO-style matching and 101-point interpolated AP for one
/// category at one IoU threshold. Scores are assumed distinct.
pub fn ap_ref(dets: &[RefDet], gts: &BTreeMap<u64, Vec<RawBox>>, thr: f64, points: usize) -> f64 {
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<&RefDet> = dets.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used: BTreeMap<u64, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = Vec::new();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        if let Some(g) = gts.get(&d.image) {
            for (j, gb) in g.iter().enumerate() {
                let v = iou_ref(&d.bbox, gb);
                if !used[&d.image][j] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, _)) = best {
            used.get_mut(&d.image).unwrap()[j] = true;
        }
        tp.push(best.is_some());
    }
    // Precision and recall at every cut-off of the ranked list.
    let mut curve = Vec::new();
    let mut hits = 0;
    for (k, t) in tp.iter().enumerate() {
        hits += *t as usize;
        curve.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for p in 0..points {
        let r = p as f64 / (points - 1) as f64;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        total += best;
    }
    total / points as f64
}

/// Facility-location value of `subset` over a similarity matrix.
pub fn facility_value(sim: &[Vec<f64>], subset: &[usize]) -> f64 {
    (0..sim.len())
        .map(|i| subset.iter().map(|&s| sim[i][s]).fold(0.0, f64::max))
        .sum()
}

/// Best facility-location value over all `k`-subsets.
pub fn facility_optimum(sim: &[Vec<f64>], k: usize) -> f64 {
    fn rec(sim: &[Vec<f64>], k: usize, start: usize, cur: &mut Vec<usize>, best: &mut f64) {
        if cur.len() == k {
            *best = best.max(facility_value(sim, cur));
            return;
        }
        for i in start..sim.len() {
            cur.push(i);
            rec(sim, k, i + 1, cur, best);
            cur.pop();
        }
    }
    let mut best = 0.0;
    rec(sim, k, 0, &mut Vec::new(), &mut best);
    best
}

/// Relative-plus-absolute agreement used for gradient checks.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8
}
