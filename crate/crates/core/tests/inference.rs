mod common;

use std::collections::BTreeSet;

use promptdet::dataset::{Scene, Split};
use promptdet::embedding::{load_checkpoint, save_checkpoint, Checkpoint};
use promptdet::geometry::iou;
use promptdet::inference::{
    deploy, detect, Combiner, DetectConfig, ExemplarBox, PromptMode, PromptSpec, RegionLabels,
};
use promptdet::Error;

fn test_scenes() -> Vec<&'static Scene> {
    common::shape_world().split_scenes(Split::Test).collect()
}

fn text_prompts() -> Vec<(u32, PromptSpec)> {
    common::shape_world().categories.iter().map(|c| (c.id, PromptSpec::text(c.name.clone()))).collect()
}

#[test]
fn deployed_checkpoint_reproduces_bundle_detections() {
    let ds = common::shape_world();
    let bundle = common::trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deployed.json");
    save_checkpoint(&path, &Checkpoint::Deployed(deploy(bundle))).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(matches!(loaded, Checkpoint::Deployed(_)));
    let cfg = DetectConfig::default();
    for scene in test_scenes().into_iter().take(10) {
        let a = detect(bundle, scene, &text_prompts(), ds, &cfg).unwrap();
        let b = detect(&loaded, scene, &text_prompts(), ds, &cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn trained_text_prompts_label_their_objects() {
    let ds = common::shape_world();
    let cfg = DetectConfig {
        nms_iou: None,
        ..DetectConfig::default()
    };
    let (mut hits, mut total) = (0, 0);
    for scene in test_scenes() {
        let dets = detect(common::trained(), scene, &text_prompts(), ds, &cfg).unwrap();
        for a in ds.annotations_of(scene.id) {
            let top = dets
                .iter()
                .filter(|d| iou(&d.bbox, &a.bbox) >= 0.5)
                .max_by(|x, y| x.score.total_cmp(&y.score));
            total += 1;
            hits += top.is_some_and(|d| d.category_id == a.category_id) as usize;
        }
    }
    assert!(hits as f64 >= 0.8 * total as f64, "{hits}/{total}");
}

#[test]
fn scores_thresholds_and_labels() {
    let ds = common::shape_world();
    let scene = test_scenes()[0];
    let all = detect(common::trained(), scene, &text_prompts(), ds, &DetectConfig::default()).unwrap();
    assert!(all.iter().all(|d| (0.0..=1.0).contains(&d.score) && d.source.mode == PromptMode::Text));
    let cfg = DetectConfig {
        score_threshold: 0.8,
        ..DetectConfig::default()
    };
    let high = detect(common::trained(), scene, &text_prompts(), ds, &cfg).unwrap();
    assert!(high.iter().all(|d| d.score >= 0.8));
    assert!(high.len() <= all.len());
    let cfg = DetectConfig {
        labels: RegionLabels::Best,
        nms_iou: None,
        ..DetectConfig::default()
    };
    let best = detect(common::trained(), scene, &text_prompts(), ds, &cfg).unwrap();
    let boxes: BTreeSet<_> = best.iter().map(|d| d.bbox.to_xywh().map(f64::to_bits)).collect();
    assert_eq!(boxes.len(), best.len(), "one label per proposal");
}

#[test]
fn interactive_exemplar_must_come_from_the_scene() {
    let ds = common::shape_world();
    let scenes = test_scenes();
    let other = ds.annotations_of(scenes[1].id).next().unwrap();
    let spec = PromptSpec::visual_interactive(ExemplarBox {
        scene_id: other.scene_id,
        bbox: other.bbox,
    });
    let err = detect(common::trained(), scenes[0], &[(other.category_id, spec)], ds, &DetectConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Prompt(_)), "{err}");
}

#[test]
fn ensemble_prompts_combine_both_scores() {
    let ds = common::shape_world();
    let scene = test_scenes()[2];
    let a = ds.annotations_of(scene.id).next().unwrap();
    let name = ds.category(a.category_id).unwrap().name.clone();
    let ex = promptdet::inference::exemplar_boxes(ds, a.category_id).unwrap();
    let cfg = DetectConfig {
        nms_iou: None,
        ..DetectConfig::default()
    };
    let model = common::trained();
    let run = |spec: PromptSpec, combiner: Combiner| {
        let cfg = DetectConfig { combiner, ..cfg.clone() };
        detect(model, scene, &[(a.category_id, spec)], ds, &cfg).unwrap()
    };
    let text = run(PromptSpec::text(name.clone()), Combiner::Max);
    let visual = run(PromptSpec::visual_generic(ex.clone(), ex.len()), Combiner::Max);
    let both = run(PromptSpec::ensemble(name, ex), Combiner::Mean);
    assert_eq!(text.len(), both.len());
    for d in &both {
        let t = text.iter().find(|x| x.bbox == d.bbox).unwrap().score;
        let v = visual.iter().find(|x| x.bbox == d.bbox).unwrap().score;
        assert!((d.score - (t + v) / 2.0).abs() < 1e-12);
        assert_eq!(d.source.mode, PromptMode::Ensemble);
    }
    assert_eq!(Combiner::Weighted { text_weight: 0.25 }.combine(1.0, 0.0), 0.25);
}
