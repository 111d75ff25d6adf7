//! One check per acceptance criterion. Each returns a short detail line on
//! success and the reason on failure; `tests/acceptance.rs` runs them all.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptdet::dataset::{Annotation, CategoryId, Provenance, Scene, SceneContent, SceneId, Split};
use promptdet::embedding::{EncoderBundle, EncoderParams, EncoderRole};
use promptdet::evalkit::{aggregate, evaluate_all, evaluate_detections, mean_ap, protocol_detections, DomainScores, EvalConfig, Protocol, Scored};
use promptdet::fsod::{
    hide_annotations, label_precision, pseudo_label, search_thresholds, FactorAssignment, PseudoLabelConfig, ThresholdMap,
    ThresholdSearch,
};
use promptdet::geometry::{batched_nms, nms, BBox};
use promptdet::inference::{deploy, DetectConfig, Detection, DetectionSource, PromptMode, PromptSpec};
use promptdet::postproc::{ladder_rows, render_ladder, run_cascade, LadderRow};
use promptdet::engine::{greedy_select, pair_similarity, SceneFeatures};
use promptdet::training::{
    alignment_loss, assemble_step, detection_loss, distillation_loss, info_nce, info_nce_from_sims, schedule_probs,
    PromptTable, TrainingConfig, VisualSource,
};

use super::oracles::{ap_ref, facility_optimum, facility_value, grads_agree, nms_ref, RawBox, RefDet};

pub type Outcome = Result<String, String>;

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    let d = detail.into();
    if ok {
        Ok(d)
    } else {
        Err(d)
    }
}

fn raw(b: &BBox) -> RawBox {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

fn external_scene(id: SceneId, size: f64) -> Scene {
    Scene {
        id,
        width: size,
        height: size,
        domain: "fixture".into(),
        known_categories: None,
        content: SceneContent::External { reference: None },
    }
}

fn gt(id: u64, scene: SceneId, cat: CategoryId, b: BBox) -> Annotation {
    Annotation {
        id,
        scene_id: scene,
        category_id: cat,
        bbox: b,
        provenance: Provenance::GroundTruth,
    }
}

fn det(scene: SceneId, cat: CategoryId, b: BBox, score: f64) -> Detection {
    Detection {
        scene_id: scene,
        category_id: cat,
        bbox: b,
        score,
        source: DetectionSource {
            mode: PromptMode::Text,
            transform: None,
            original_category: None,
        },
    }
}

fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = rng.random_range(0.05..0.4) * size;
    let h = rng.random_range(0.05..0.4) * size;
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, amount: f64) -> BBox {
    let s = amount * b.width().min(b.height());
    let mut d = || rng.random_range(-s..=s);
    let (x0, y0) = (b.x_min + d(), b.y_min + d());
    let (x1, y1) = (b.x_max + d(), b.y_max + d());
    BBox::new(x0.min(x1 - 1e-3), y0.min(y1 - 1e-3), x1, y1).unwrap()
}

pub fn schedule_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for total in [2u64, 10, 100, 600, 1000, 4096] {
        if schedule_probs(0, total).map_err(|e| e.to_string())? != (1.0, 0.0, 0.0) {
            return Err(format!("t=0 of {total} is not (1,0,0)"));
        }
        for t in 0..=total {
            let p = schedule_probs(t, total).map_err(|e| e.to_string())?;
            if 2 * t >= total && p != (0.0, 0.5, 0.5) {
                return Err(format!("t={t} of {total} gave {p:?}, expected (0,0.5,0.5)"));
            }
            let c = (t as f64 / total as f64).min(0.5);
            let expected = (1.0 - 2.0 * c, c, c);
            worst = worst
                .max((p.0 - expected.0).abs())
                .max((p.1 - expected.1).abs())
                .max((p.2 - expected.2).abs())
                .max((p.0 + p.1 + p.2 - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-12 && secs < 1.0, format!("max deviation {worst:.1e}, {secs:.3}s"))
}

/// Central difference of `f` in parameter `k` of `role`.
fn numeric_grad(bundle: &mut EncoderBundle, role: EncoderRole, k: usize, f: &dyn Fn(&EncoderBundle) -> f64) -> f64 {
    const H: f64 = 1e-6;
    let orig = bundle.encoder(role).get(k);
    bundle.encoder_mut(role).set(k, orig + H);
    let up = f(bundle);
    bundle.encoder_mut(role).set(k, orig - H);
    let down = f(bundle);
    bundle.encoder_mut(role).set(k, orig);
    (up - down) / (2.0 * H)
}

pub fn gradient_fidelity() -> Outcome {
    const DRAWS: u64 = 100;
    const INDICES: usize = 4;
    let start = Instant::now();
    let ds = super::shape_world();
    let base = super::untrained(ds);
    let cfg = TrainingConfig::default();
    let prompts = PromptTable::from_names(ds);
    let trainable = [EncoderRole::ContrastiveText, EncoderRole::ContrastiveVisual];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    let mut roles = BTreeSet::new();
    for draw in 0..DRAWS {
        let mut b = base.clone();
        for role in trainable {
            let p = b.encoder(role);
            let fresh = EncoderParams::init(p.input_dim, p.hidden_dim, p.output_dim, 1000 + draw, role as u64 + 1);
            *b.encoder_mut(role) = fresh;
        }
        let step = (draw * 6) % cfg.total_steps;
        let batch = assemble_step(ds, &b, &cfg, &prompts, VisualSource::OutImage, step).map_err(|e| e.to_string())?;
        // Prompt features match the sampled encoder, so the batch fixes the role.
        let det_role = batch.role;
        roles.insert(det_role);
        let tau = cfg.temperature;
        let losses: [(&str, Box<dyn Fn(&EncoderBundle) -> f64>); 3] = [
            ("distillation", Box::new(|b: &EncoderBundle| distillation_loss(b, &batch.categories, tau).unwrap().0)),
            ("alignment", Box::new(|b: &EncoderBundle| alignment_loss(b, &batch.categories, &batch.negatives, tau).unwrap().0)),
            ("detection", Box::new(|b: &EncoderBundle| detection_loss(b, &batch.scenes, det_role, tau).unwrap().0)),
        ];
        let analytic = [
            distillation_loss(&b, &batch.categories, tau).map_err(|e| e.to_string())?.1,
            alignment_loss(&b, &batch.categories, &batch.negatives, tau).map_err(|e| e.to_string())?.1,
            detection_loss(&b, &batch.scenes, det_role, tau).map_err(|e| e.to_string())?.1,
        ];
        for ((name, f), grads) in losses.iter().zip(&analytic) {
            if !grads.pretrained_text.is_zero() {
                return Err(format!("draw {draw}: {name} gives the frozen encoder a gradient"));
            }
            for role in trainable {
                let n = b.encoder(role).n_params();
                for _ in 0..INDICES {
                    let k = rng.random_range(0..n);
                    let a = grads.get(role).get(k);
                    let num = numeric_grad(&mut b, role, k, f.as_ref());
                    if !grads_agree(a, num) {
                        return Err(format!(
                            "draw {draw}: {name} d/d{}[{k}] analytic {a:.6e} vs numeric {num:.6e}",
                            role.name()
                        ));
                    }
                    worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
                    checked += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 30.0 && roles.len() == 3,
        format!("{checked} partials over {DRAWS} draws ({} prompt encoders), worst relative gap {worst:.1e}, frozen grads zero, {secs:.1}s", roles.len()),
    )
}

pub fn info_nce_anchors() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in [2usize, 10, 100] {
        let sims = vec![0.3; k];
        let mut positive = vec![false; k];
        positive[0] = true;
        let (loss, _) = info_nce_from_sims(&sims, &positive, 0.07).ok_or("no positive")?;
        worst = worst.max((loss - (k as f64).ln()).abs());
    }
    let two = (1.0 + (-1.0f64).exp()).ln();
    let (loss, _) = info_nce_from_sims(&[1.0, 0.0], &[true, false], 1.0).ok_or("no positive")?;
    worst = worst.max((loss - two).abs());
    // Same case through embeddings: cosine 1 to the positive, 0 to the negative.
    let e = |v: Vec<f64>| promptdet::embedding::Embedding::normalize(v).unwrap();
    let anchor = e(vec![1.0, 0.0, 0.0]);
    let loss = info_nce(&anchor, &[e(vec![1.0, 0.0, 0.0]), e(vec![0.0, 1.0, 0.0])], 0, 1.0).map_err(|e| e.to_string())?;
    worst = worst.max((loss - two).abs());
    check(worst <= 1e-9, format!("max deviation {worst:.1e}"))
}

pub fn nms_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut boxes_seen = 0usize;
    for inst in 0..1000 {
        let n = rng.random_range(0..=200);
        let mut boxes = Vec::with_capacity(n);
        // Clustered boxes so that suppression chains are common.
        let centers: Vec<BBox> = (0..rng.random_range(1..=12)).map(|_| random_box(&mut rng, 100.0)).collect();
        for _ in 0..n {
            let c = &centers[rng.random_range(0..centers.len())];
            boxes.push(jitter(&mut rng, c, 0.3));
        }
        // Quantized scores produce ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..50) as f64) / 50.0).collect();
        let groups: Vec<u32> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let thr = rng.random_range(0.1..0.9);
        let raws: Vec<RawBox> = boxes.iter().map(raw).collect();

        let single: BTreeSet<usize> = nms(&boxes, &scores, thr).into_iter().collect();
        if single != nms_ref(&raws, &scores, &vec![0; n], thr) {
            return Err(format!("instance {inst}: single-class NMS differs from the reference"));
        }
        let batched: BTreeSet<usize> = batched_nms(&boxes, &scores, &groups, thr).into_iter().collect();
        if batched != nms_ref(&raws, &scores, &groups, thr) {
            return Err(format!("instance {inst}: batched NMS differs from the reference"));
        }
        boxes_seen += n;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("1000 instances, {boxes_seen} boxes, {secs:.2}s"))
}

/// A random evaluation instance: a few scenes, a few categories.
pub struct ApInstance {
    pub scenes: Vec<Scene>,
    pub gts: Vec<Annotation>,
    pub dets: Vec<Scored>,
}

pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> ApInstance {
    let n_scenes = rng.random_range(1..=4);
    let n_cats = rng.random_range(1..=3);
    let scenes: Vec<Scene> = (1..=n_scenes).map(|i| external_scene(i, 100.0)).collect();
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for s in &scenes {
        for cat in 1..=n_cats {
            let n_gt = rng.random_range(0..=5);
            for _ in 0..n_gt {
                let b = random_box(rng, 100.0);
                gts.push(gt(gts.len() as u64 + 1, s.id, cat, b));
                // Each object is found zero to two times, at varying overlap.
                for _ in 0..rng.random_range(0..=2) {
                    let amount = rng.random_range(0.0..0.5);
                    dets.push((s.id, cat, jitter(rng, &b, amount)));
                }
            }
            for _ in 0..rng.random_range(0..=3) {
                dets.push((s.id, cat, random_box(rng, 100.0)));
            }
        }
    }
    let dets = dets
        .into_iter()
        .map(|(scene_id, category_id, bbox)| Scored {
            scene_id,
            category_id,
            bbox,
            score: rng.random::<f64>(),
        })
        .collect();
    ApInstance { scenes, gts, dets }
}

/// Oracle mean over the IoU grid for one category.
pub fn ap_oracle_for(inst: &ApInstance, cat: CategoryId, cfg: &EvalConfig) -> f64 {
    let dets: Vec<RefDet> = inst
        .dets
        .iter()
        .filter(|d| d.category_id == cat)
        .map(|d| RefDet {
            image: d.scene_id,
            bbox: raw(&d.bbox),
            score: d.score,
        })
        .collect();
    let mut gts: BTreeMap<u64, Vec<RawBox>> = BTreeMap::new();
    for g in inst.gts.iter().filter(|g| g.category_id == cat) {
        gts.entry(g.scene_id).or_default().push(raw(&g.bbox));
    }
    let per: Vec<f64> = cfg.iou_thresholds.iter().map(|t| ap_ref(&dets, &gts, *t, cfg.recall_points)).collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn scene_map(scenes: &[Scene]) -> BTreeMap<SceneId, &Scene> {
    scenes.iter().map(|s| (s.id, s)).collect()
}

pub fn ap_oracle() -> Outcome {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let inst = random_ap_instance(&mut rng);
        let got = evaluate_detections(&inst.dets, &inst.gts, &scene_map(&inst.scenes), &cfg);
        let with_gt: BTreeSet<CategoryId> = inst.gts.iter().map(|g| g.category_id).collect();
        if got.keys().copied().collect::<BTreeSet<_>>() != with_gt {
            return Err(format!("instance {i}: evaluated categories differ from those with ground truth"));
        }
        for (cat, s) in &got {
            let want = ap_oracle_for(&inst, *cat, &cfg);
            worst = worst.max((s.mean - want).abs());
            compared += 1;
        }
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:.1e} over {compared} category scores"));
    }

    // Hand-checkable fixtures.
    let scenes = vec![external_scene(1, 100.0), external_scene(2, 100.0)];
    let boxes = [
        (1, 1, BBox::new(10.0, 10.0, 30.0, 40.0).unwrap()),
        (1, 2, BBox::new(50.0, 50.0, 90.0, 70.0).unwrap()),
        (2, 1, BBox::new(5.0, 60.0, 45.0, 95.0).unwrap()),
    ];
    let gts: Vec<Annotation> = boxes.iter().enumerate().map(|(i, (s, c, b))| gt(i as u64 + 1, *s, *c, *b)).collect();
    let perfect: Vec<Scored> = boxes
        .iter()
        .enumerate()
        .map(|(i, (s, c, b))| Scored {
            scene_id: *s,
            category_id: *c,
            bbox: *b,
            score: 0.9 - 0.1 * i as f64,
        })
        .collect();
    let map = scene_map(&scenes);
    let p = mean_ap(&evaluate_detections(&perfect, &gts, &map, &cfg)).ok_or("no categories")?;
    let z = mean_ap(&evaluate_detections(&[], &gts, &map, &cfg)).ok_or("no categories")?;
    check(
        p == 1.0 && z == 0.0,
        format!("200 instances ({compared} category scores), max deviation {worst:.1e}; perfect {p}, empty {z}"),
    )
}

pub fn max_ap_inequality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut dominated = 0;
    for m in 0..100 {
        let n = rng.random_range(1..=6);
        let force = m % 3; // 0: free, 1: text dominates, 2: visual dominates
        let mut per_domain = BTreeMap::new();
        let mut text_ge = true;
        let mut visual_ge = true;
        for d in 0..n {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            let (t, v) = match force {
                1 => (a.max(b), a.min(b)),
                2 => (a.min(b), a.max(b)),
                _ => (a, b),
            };
            text_ge &= t >= v;
            visual_ge &= v >= t;
            per_domain.insert(
                format!("d{d}"),
                DomainScores {
                    text_g: Some(t),
                    visual_g: Some(v),
                    visual_i: None,
                },
            );
        }
        let r = aggregate(per_domain);
        let (max_ap, t, v) = (r.max_ap.unwrap(), r.mean_text_g.unwrap(), r.mean_visual_g.unwrap());
        if !r.max_ap_holds() || max_ap + 1e-12 < t.max(v) {
            return Err(format!("matrix {m}: Max AP {max_ap} below protocol means {t}, {v}"));
        }
        let equal = (max_ap - t.max(v)).abs() <= 1e-12;
        let dominates = text_ge || visual_ge;
        if equal != dominates {
            return Err(format!("matrix {m}: equality {equal} but dominance {dominates}"));
        }
        dominated += dominates as usize;
    }
    // Published row: Text-G 24.5, Visual-G 18.5, Max AP 29.1.
    let (text_g, visual_g, max_ap) = (24.5, 18.5, 29.1);
    check(
        max_ap >= f64::max(text_g, visual_g),
        format!("100 matrices ({dominated} with a dominant protocol); published row {max_ap} >= {text_g}"),
    )
}

fn same_bits(a: &[Detection], b: &[Detection]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.scene_id == y.scene_id
                && x.category_id == y.category_id
                && x.score.to_bits() == y.score.to_bits()
                && raw(&x.bbox).map(f64::to_bits) == raw(&y.bbox).map(f64::to_bits)
                && x.source == y.source
        })
}

pub fn decoupling() -> Outcome {
    let ds = super::shape_world();
    let bundle = super::trained();
    let deployed = deploy(bundle);
    let eval = EvalConfig::default();
    let detect = DetectConfig::default();
    let mut total = 0;
    for domain in ds.domains() {
        let scenes: Vec<&Scene> = ds.split_scenes(Split::Test).filter(|s| s.domain == domain).collect();
        let cats = ds.domain_categories(&domain);
        for p in Protocol::ALL {
            let a = protocol_detections(bundle, ds, p, &scenes, &cats, &eval, &detect).map_err(|e| e.to_string())?;
            let b = protocol_detections(&deployed, ds, p, &scenes, &cats, &eval, &detect).map_err(|e| e.to_string())?;
            if !same_bits(&a, &b) {
                return Err(format!("{domain} {}: deployed detections differ", p.label()));
            }
            total += a.len();
        }
    }
    check(total > 0, format!("{total} detections bit-identical across protocols"))
}

pub fn learning_signal() -> Outcome {
    let start = Instant::now();
    let ds = super::shape_world();
    let eval = EvalConfig::default();
    let detect = DetectConfig::default();
    let (before, _) = evaluate_all(&super::untrained(ds), ds, Split::Test, &eval, &detect).map_err(|e| e.to_string())?;
    let (after, _) = evaluate_all(super::trained(), ds, Split::Test, &eval, &detect).map_err(|e| e.to_string())?;
    let pairs = [
        ("Text-G", before.mean_text_g, after.mean_text_g),
        ("Visual-G", before.mean_visual_g, after.mean_visual_g),
        ("Visual-I", before.mean_visual_i, after.mean_visual_i),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, b, a) in pairs {
        let (b, a) = (b.ok_or("missing protocol")?, a.ok_or("missing protocol")?);
        ok &= a - b >= 0.3;
        parts.push(format!("{name} {b:.3}->{a:.3}"));
    }
    let ordered = after.mean_visual_i >= after.mean_text_g;
    let secs = start.elapsed().as_secs_f64();
    check(ok && ordered && secs < 300.0, format!("{}; Visual-I >= Text-G: {ordered}; {secs:.1}s", parts.join(", ")))
}

pub const PAPER_LADDER: [(&str, f64); 5] = [
    ("Base detector", 0.485),
    ("+ Category refinement and tiling", 0.528),
    ("+ Background filter", 0.580),
    ("+ Batched NMS", 0.691),
    ("+ Box refinement", 0.703),
];

pub fn paper_ladder_rows() -> Vec<LadderRow> {
    PAPER_LADDER
        .iter()
        .enumerate()
        .map(|(i, (m, ap))| LadderRow {
            method: m.to_string(),
            ap: *ap,
            gain: (i > 0).then(|| ap - PAPER_LADDER[i - 1].1),
        })
        .collect()
}

pub const GOLDEN_LADDER: &str = include_str!("../golden/ladder.md");

pub fn cascade_ladder() -> Outcome {
    let ds = super::insdet_world();
    let prompts: Vec<(CategoryId, PromptSpec)> =
        ds.categories.iter().map(|c| (c.id, PromptSpec::text(c.name.clone()))).collect();
    let stages = run_cascade(super::insdet_model(), ds, Split::Test, &prompts, &super::insdet_cascade(), &EvalConfig::default())
        .map_err(|e| e.to_string())?;
    let rows = ladder_rows(&stages);
    if let Some(r) = rows.iter().find(|r| r.gain.is_some_and(|g| g < -0.002)) {
        return Err(format!("stage {:?} loses {:.4}", r.method, r.gain.unwrap()));
    }
    let rendered = render_ladder(&paper_ladder_rows());
    if rendered != GOLDEN_LADDER {
        return Err("rendered ladder differs from the golden file".into());
    }
    let aps: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.ap)).collect();
    check(stages.len() == 5, format!("ladder {}; golden render matches", aps.join(" -> ")))
}

/// Five categories over four scenes with true and false detections.
pub fn threshold_fixture(seed: u64) -> (Vec<Scene>, Vec<Annotation>, Vec<Detection>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<Scene> = (1..=4).map(|i| external_scene(i, 100.0)).collect();
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for cat in 1..=5u32 {
        for s in &scenes {
            for _ in 0..rng.random_range(0..=2) {
                let b = random_box(&mut rng, 100.0);
                gts.push(gt(gts.len() as u64 + 1, s.id, cat, b));
                if rng.random_bool(0.8) {
                    let amount = rng.random_range(0.0..0.3);
                    dets.push(det(s.id, cat, jitter(&mut rng, &b, amount), rng.random()));
                }
            }
            for _ in 0..rng.random_range(0..=2) {
                dets.push(det(s.id, cat, random_box(&mut rng, 100.0), rng.random()));
            }
        }
        if !gts.iter().any(|g| g.category_id == cat) {
            let b = random_box(&mut rng, 100.0);
            gts.push(gt(gts.len() as u64 + 1, 1, cat, b));
        }
    }
    (scenes, gts, dets)
}

/// Exhaustive joint search: the lexicographically smallest threshold vector
/// among those reaching the best mAP.
pub fn joint_threshold_search(
    scenes: &[Scene],
    gts: &[Annotation],
    dets: &[Detection],
    cats: &[CategoryId],
    grid: &[f64],
    eval: &EvalConfig,
) -> (Vec<f64>, f64) {
    let map = scene_map(scenes);
    let mut combos: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut idx = vec![0usize; cats.len()];
    loop {
        let th: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
        let kept: Vec<Scored> = dets
            .iter()
            .filter(|d| {
                let k = cats.iter().position(|c| *c == d.category_id).unwrap();
                d.score >= th[k]
            })
            .map(Scored::from)
            .collect();
        let m = mean_ap(&evaluate_detections(&kept, gts, &map, eval)).unwrap_or(0.0);
        combos.push((th, m));
        // Odometer increment, last category fastest.
        let mut pos = cats.len();
        loop {
            if pos == 0 {
                let best = combos.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
                let winner = combos
                    .iter()
                    .filter(|c| c.1 >= best - 1e-12)
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .unwrap();
                return winner.clone();
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < grid.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

pub fn threshold_optimality() -> Outcome {
    let eval = EvalConfig::default();
    let search = ThresholdSearch {
        step: 0.25,
        max: 0.75,
        default: 0.0,
    };
    let grid = search.grid();
    let cats: Vec<CategoryId> = (1..=5).collect();
    for seed in 0..5 {
        let (scenes, gts, dets) = threshold_fixture(seed);
        let got = search_thresholds(&dets, &gts, &scene_map(&scenes), &cats, &eval, &search).map_err(|e| e.to_string())?;
        let (joint, _) = joint_threshold_search(&scenes, &gts, &dets, &cats, &grid, &eval);
        let want = ThresholdMap {
            thresholds: cats.iter().copied().zip(joint).collect(),
            defaulted: Vec::new(),
        };
        if got != want {
            return Err(format!("fixture {seed}: per-class {:?} vs joint {:?}", got.thresholds, want.thresholds));
        }
    }
    let assignments = FactorAssignment::grid();
    let distinct: BTreeSet<_> = assignments.iter().collect();
    let product = 2 * 2 * 2 * 3;
    check(
        assignments.len() == product && distinct.len() == product,
        format!("5 fixtures x {} joint combinations agree; factor grid {}", grid.len().pow(5), assignments.len()),
    )
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Vec<SceneFeatures> {
    (0..n)
        .map(|i| SceneFeatures {
            scene_id: 10 + i as SceneId,
            embedding: unit((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
            uncertainty: rng.random(),
        })
        .collect()
}

pub fn similarity_matrix(f: &[SceneFeatures]) -> Vec<Vec<f64>> {
    f.iter()
        .map(|a| {
            f.iter()
                .map(|b| {
                    let d: f64 = a.embedding.iter().zip(&b.embedding).map(|(x, y)| x * y).sum();
                    (d.clamp(-1.0, 1.0) + 1.0) / 2.0
                })
                .collect()
        })
        .collect()
}

pub fn selection_quality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bound = 1.0 - (-1.0f64).exp();
    let mut worst: f64 = f64::INFINITY;
    let mut fixtures = 0;
    for n in 2..=12 {
        for _ in 0..6 {
            let f = random_features(&mut rng, n);
            let sim = similarity_matrix(&f);
            for k in 1..=n.min(4) {
                let picked = greedy_select(&f, k, 0.0);
                let idx: Vec<usize> = picked.iter().map(|id| (*id - 10) as usize).collect();
                let ratio = facility_value(&sim, &idx) / facility_optimum(&sim, k);
                worst = worst.min(ratio);
                if ratio < bound {
                    return Err(format!("n={n} k={k}: greedy reaches {ratio:.4} of the optimum"));
                }
                let mut top: Vec<&SceneFeatures> = f.iter().collect();
                top.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty).then(a.scene_id.cmp(&b.scene_id)));
                let want: Vec<SceneId> = top.iter().take(k).map(|s| s.scene_id).collect();
                if greedy_select(&f, k, 1.0) != want {
                    return Err(format!("n={n} k={k}: alpha=1 is not the uncertainty top-k"));
                }
                fixtures += 1;
            }
        }
    }
    // The library similarity is the one the oracle re-derives.
    let f = random_features(&mut rng, 3);
    let lib = pair_similarity(&f[0].embedding, &f[1].embedding);
    check(
        (lib - similarity_matrix(&f)[0][1]).abs() < 1e-15,
        format!("{fixtures} fixtures, worst ratio {worst:.4} (bound {bound:.4}); alpha=1 top-k exact"),
    )
}

pub fn pseudo_label_conservatism() -> Outcome {
    let (hidden_ds, hidden) = hide_annotations(super::shape_world(), 0.3, 11).map_err(|e| e.to_string())?;
    let model = super::train_bundle(&hidden_ds, &TrainingConfig::default());
    let cfg = PseudoLabelConfig {
        floor: 0.9,
        ..PseudoLabelConfig::default()
    };
    let added = pseudo_label(&model, &hidden_ds, &cfg, &DetectConfig::default()).map_err(|e| e.to_string())?;
    let precision = label_precision(&added, &hidden).ok_or("no pseudo-labels added")?;
    check(
        precision >= 0.95,
        format!("{} hidden, {} added, precision {precision:.3}", hidden.len(), added.len()),
    )
}

/// Runs the CLI binary; returns the exit code and stderr.
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_promptdet")).args(args).output().expect("spawn cli");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs `args --out <out>` with one worker, again into the same directory
/// with three workers, and compares every output byte.
fn twice(args: &[&str], out: &Path) -> Result<usize, String> {
    let o = out.to_str().unwrap();
    let mut first: Vec<&str> = vec!["--workers", "1"];
    first.extend_from_slice(args);
    first.extend_from_slice(&["--out", o]);
    let (code, _, err) = run_cli(&first);
    if code != 0 {
        return Err(format!("{args:?} exited {code}: {err}"));
    }
    let a = snapshot(out);
    let mut second: Vec<&str> = vec!["--workers", "3"];
    second.extend_from_slice(args);
    second.extend_from_slice(&["--out", o, "--force"]);
    let (code, _, err) = run_cli(&second);
    if code != 0 {
        return Err(format!("{args:?} (rerun) exited {code}: {err}"));
    }
    let b = snapshot(out);
    if a != b {
        let differing: Vec<_> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
        return Err(format!("{args:?}: outputs differ in {differing:?}"));
    }
    Ok(a.len())
}

pub fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| tmp.path().join(name);
    let s = |q: &PathBuf| q.to_str().unwrap().to_string();
    let (data, train, detect) = (s(&p("data")), s(&p("train")), s(&p("detect")));
    let ckpt = format!("{train}/checkpoint.json");
    let dets = format!("{detect}/detections.json");
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("data", vec!["synth"]),
        ("train", vec!["train", "--dataset", &data, "--save-every", "300"]),
        ("eval", vec!["eval", "--checkpoint", &ckpt, "--dataset", &data]),
        ("detect", vec!["detect", "--checkpoint", &ckpt, "--dataset", &data]),
        ("detect-tta", vec!["detect", "--checkpoint", &ckpt, "--dataset", &data, "--tta", "--prompt", "red square"]),
        ("eval-dets", vec!["eval", "--detections", &dets, "--dataset", &data]),
        ("insdet", vec!["insdet", "--checkpoint", &ckpt, "--dataset", &data]),
        ("curate", vec!["curate", "--checkpoint", &ckpt, "--dataset", &data, "--budget", "5"]),
        ("autolabel", vec!["autolabel", "--checkpoint", &ckpt, "--dataset", &data]),
        ("fsod", vec!["fsod", "--dataset", &data]),
    ];
    let mut files = 0;
    for (dir, args) in &runs {
        files += twice(args, &p(dir))?;
    }
    check(true, format!("{} commands, {files} files byte-identical across reruns and worker counts", runs.len()))
}
