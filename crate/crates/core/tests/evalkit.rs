mod common;

use std::collections::BTreeMap;

use common::criteria::{ap_oracle_for, random_ap_instance};
use promptdet::dataset::{Annotation, Provenance, Scene, SceneContent};
use promptdet::evalkit::{
    aggregate, evaluate_detections, interpolated_ap, mean_ap, render_summary, DomainScores, EvalConfig, Scored,
    SummaryRow,
};
use promptdet::geometry::BBox;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene(id: u64, known: Option<Vec<u32>>) -> Scene {
    Scene {
        id,
        width: 100.0,
        height: 100.0,
        domain: "d".into(),
        known_categories: known,
        content: SceneContent::External { reference: None },
    }
}

fn gt(id: u64, scene_id: u64, category_id: u32, b: BBox) -> Annotation {
    Annotation {
        id,
        scene_id,
        category_id,
        bbox: b,
        provenance: Provenance::GroundTruth,
    }
}

fn scored(scene_id: u64, category_id: u32, bbox: BBox, score: f64) -> Scored {
    Scored {
        scene_id,
        category_id,
        bbox,
        score,
    }
}

fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::from_xywh(x, y, w, h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluator_matches_oracle(seed in any::<u64>()) {
        let inst = random_ap_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = EvalConfig::default();
        let map: BTreeMap<_, _> = inst.scenes.iter().map(|s| (s.id, s)).collect();
        for (cat, s) in evaluate_detections(&inst.dets, &inst.gts, &map, &cfg) {
            prop_assert!((s.mean - ap_oracle_for(&inst, cat, &cfg)).abs() <= 1e-9);
            prop_assert!(s.per_threshold.windows(2).all(|w| w[0] + 1e-12 >= w[1]), "AP grows with IoU threshold");
        }
    }

    #[test]
    fn max_ap_bounds_both_protocols(values in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..8)) {
        let per: BTreeMap<String, DomainScores> = values
            .iter()
            .enumerate()
            .map(|(i, (t, v))| (format!("d{i}"), DomainScores { text_g: Some(*t), visual_g: Some(*v), visual_i: None }))
            .collect();
        let r = aggregate(per);
        prop_assert!(r.max_ap_holds());
        let m = r.max_ap.unwrap();
        prop_assert!(m + 1e-12 >= r.mean_text_g.unwrap().max(r.mean_visual_g.unwrap()));
        prop_assert!(m <= 1.0);
    }
}

#[test]
fn interpolation_on_a_known_curve() {
    // TP, FP, TP with two ground truths: precision 1 up to recall 0.5,
    // then 2/3 up to recall 1.
    let ap = interpolated_ap(&[true, false, true], 2, 101);
    let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
    assert!((ap - want).abs() < 1e-12);
    assert_eq!(interpolated_ap(&[], 3, 101), 0.0);
    assert_eq!(interpolated_ap(&[true], 0, 101), 0.0);
}

#[test]
fn duplicates_count_as_false_positives() {
    let s = scene(1, None);
    let map = BTreeMap::from([(1, &s)]);
    let g = vec![gt(1, 1, 1, b(10.0, 10.0, 20.0, 20.0))];
    let d = vec![scored(1, 1, b(10.0, 10.0, 20.0, 20.0), 0.9), scored(1, 1, b(10.0, 10.0, 20.0, 20.0), 0.8)];
    let r = evaluate_detections(&d, &g, &map, &EvalConfig::default());
    assert_eq!(r[&1].mean, 1.0, "the duplicate ranks after the hit, so AP stays 1");
    let d = vec![scored(1, 1, b(60.0, 60.0, 20.0, 20.0), 0.95), d[0]];
    let r = evaluate_detections(&d, &g, &map, &EvalConfig::default());
    assert!((r[&1].mean - 0.5).abs() < 1e-12);
}

#[test]
fn max_dets_caps_per_scene_and_category() {
    let s = scene(1, None);
    let map = BTreeMap::from([(1, &s)]);
    let g = vec![gt(1, 1, 1, b(10.0, 10.0, 20.0, 20.0))];
    let mut d = vec![scored(1, 1, b(60.0, 60.0, 10.0, 10.0), 0.9)];
    d.push(scored(1, 1, b(10.0, 10.0, 20.0, 20.0), 0.5));
    let cfg = EvalConfig {
        max_dets: 1,
        ..EvalConfig::default()
    };
    assert_eq!(evaluate_detections(&d, &g, &map, &cfg)[&1].mean, 0.0);
}

#[test]
fn known_category_restriction() {
    let s = scene(1, Some(vec![1]));
    let map = BTreeMap::from([(1, &s)]);
    let g = vec![gt(1, 1, 1, b(10.0, 10.0, 20.0, 20.0)), gt(2, 1, 2, b(50.0, 50.0, 20.0, 20.0))];
    let d = vec![scored(1, 1, b(10.0, 10.0, 20.0, 20.0), 0.9)];
    let open = evaluate_detections(&d, &g, &map, &EvalConfig::default());
    assert_eq!(mean_ap(&open), Some(0.5));
    let cfg = EvalConfig {
        restrict_known: true,
        ..EvalConfig::default()
    };
    let restricted = evaluate_detections(&d, &g, &map, &cfg);
    assert_eq!(mean_ap(&restricted), Some(1.0));
    assert!(!restricted.contains_key(&2));
}

#[test]
fn max_ap_excludes_incomplete_domains() {
    let per = BTreeMap::from([
        ("a".to_string(), DomainScores { text_g: Some(0.4), visual_g: Some(0.6), visual_i: Some(0.9) }),
        ("b".to_string(), DomainScores { text_g: Some(0.5), visual_g: None, visual_i: None }),
    ]);
    let r = aggregate(per);
    assert_eq!(r.max_ap, Some(0.6));
    assert_eq!(r.max_ap_excluded, vec!["b".to_string()]);
    let table = render_summary(&[SummaryRow {
        model: "shape-world".into(),
        training_size: "240 scenes".into(),
        report: r,
    }]);
    assert!(table.starts_with("| Model "));
    assert!(table.contains("| 90.0 "));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn invalid_eval_config_is_rejected() {
    let cfg = EvalConfig {
        iou_thresholds: vec![0.7, 0.5],
        ..EvalConfig::default()
    };
    assert!(cfg.validate().is_err());
}
