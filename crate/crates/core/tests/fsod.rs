mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::criteria::{joint_threshold_search, threshold_fixture};
use promptdet::dataset::{Annotation, Provenance, Split};
use promptdet::evalkit::EvalConfig;
use promptdet::fsod::{
    augment_prompts, format_term_line, hide_annotations, label_precision, negative_pool, parse_term_line, run_fsod,
    search_thresholds, tta_candidates, tta_detect, AugmentConfig, FactorAssignment, FsodConfig, IdentityParaphraser,
    Paraphraser, SynonymParaphraser, ThresholdSearch, TrainingFactors, TtaConfig, PARAPHRASE_PREAMBLE,
};
use promptdet::geometry::BBox;
use promptdet::inference::{detect_with_queries, resolve_all, DetectConfig, PromptSpec};
use promptdet::training::TrainingConfig;
use promptdet::Error;
use proptest::prelude::*;

#[test]
fn per_class_search_equals_joint_search() {
    let eval = EvalConfig::default();
    let search = ThresholdSearch {
        step: 0.25,
        max: 0.75,
        default: 0.0,
    };
    let cats: Vec<u32> = (1..=5).collect();
    for seed in 100..106 {
        let (scenes, gts, dets) = threshold_fixture(seed);
        let map = scenes.iter().map(|s| (s.id, s)).collect();
        let got = search_thresholds(&dets, &gts, &map, &cats, &eval, &search).unwrap();
        let (joint, _) = joint_threshold_search(&scenes, &gts, &dets, &cats, &search.grid(), &eval);
        assert_eq!(got.thresholds.values().copied().collect::<Vec<_>>(), joint, "fixture {seed}");
        assert!(got.defaulted.is_empty());
    }
}

#[test]
fn categories_without_validation_boxes_get_the_default() {
    let (scenes, gts, dets) = threshold_fixture(3);
    let map = scenes.iter().map(|s| (s.id, s)).collect();
    let search = ThresholdSearch {
        default: 0.4,
        ..ThresholdSearch::default()
    };
    let got = search_thresholds(&dets, &gts, &map, &[1, 42], &EvalConfig::default(), &search).unwrap();
    assert_eq!(got.thresholds[&42], 0.4);
    assert_eq!(got.defaulted, vec![42]);
    let grid = ThresholdSearch::default().grid();
    assert_eq!(grid.len(), 20);
    assert_eq!(grid[7], 7.0 * 0.05);
}

#[test]
fn factor_grid_is_the_full_product() {
    let grid = FactorAssignment::grid();
    assert_eq!(grid.len(), 24);
    assert_eq!(grid.iter().collect::<BTreeSet<_>>().len(), 24);
    let training = TrainingFactors::grid();
    assert_eq!(training.len(), 8);
    let slugs: BTreeSet<String> = training.iter().map(TrainingFactors::slug).collect();
    assert_eq!(slugs.len(), 8);
    for t in &training {
        assert_eq!(grid.iter().filter(|a| a.training() == *t).count(), 3);
    }
}

proptest! {
    #[test]
    fn term_lines_round_trip(term in "[a-z]{1,8}( [a-z]{1,8})?", def in "[a-z]{1,8}( [a-z]{1,8}){0,4}") {
        let line = format_term_line(&term, &def);
        prop_assert_eq!(parse_term_line(&line).unwrap(), (term, def));
    }
}

#[test]
fn malformed_term_lines_are_rejected() {
    for bad in ["no separator", " = definition", "term = ", "term=definition"] {
        assert!(matches!(parse_term_line(bad), Err(Error::ParaphraseFormat { .. })), "{bad}");
    }
    assert!(PARAPHRASE_PREAMBLE.contains("[term] = [paraphrased definition]"));
}

struct Swap;

impl Paraphraser for Swap {
    fn paraphrase(&self, lines: &[String]) -> promptdet::Result<Vec<String>> {
        // Every term is "paraphrased" as the first term's name.
        let first = parse_term_line(&lines[0])?.0;
        lines.iter().map(|l| Ok(format_term_line(&parse_term_line(l)?.0, &first))).collect()
    }
}

#[test]
fn prompt_augmentation() {
    let cats = &common::shape_world().categories;
    let plain = augment_prompts(cats, &IdentityParaphraser, &AugmentConfig::default()).unwrap();
    for c in cats {
        assert_eq!(plain.texts_of(c.id)[0], c.name);
    }
    assert_eq!(plain.negatives.len(), 2 * cats.len());
    let words: BTreeSet<String> = cats.iter().flat_map(|c| promptdet::embedding::tokens(&c.name)).collect();
    for n in negative_pool(cats) {
        assert!(promptdet::embedding::tokens(&n).iter().all(|w| !words.contains(w)), "{n}");
    }
    let syn = augment_prompts(cats, &SynonymParaphraser::shape_world(1), &AugmentConfig::default()).unwrap();
    assert!(cats.iter().any(|c| syn.texts_of(c.id).len() == 2));
    assert_eq!(syn, augment_prompts(cats, &SynonymParaphraser::shape_world(1), &AugmentConfig::default()).unwrap());
    let err = augment_prompts(cats, &Swap, &AugmentConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Ambiguity { .. }), "{err}");
}

#[test]
fn hiding_annotations() {
    let ds = common::shape_world();
    let (same, none) = hide_annotations(ds, 0.0, 1).unwrap();
    assert!(none.is_empty());
    assert_eq!(same.annotations, ds.annotations);
    let (reduced, hidden) = hide_annotations(ds, 0.3, 11).unwrap();
    assert_eq!(reduced.annotations.len() + hidden.len(), ds.annotations.len());
    let test: BTreeSet<_> = ds.splits.get(Split::Test).iter().collect();
    assert!(hidden.iter().all(|a| !test.contains(&a.scene_id)));
    // Train scenes still list hidden categories as present.
    for a in &hidden {
        let s = reduced.scene(a.scene_id).unwrap();
        let train = ds.splits.get(Split::Train).contains(&s.id);
        assert_eq!(s.known_categories.as_ref().unwrap().contains(&a.category_id), train);
    }
    assert!(hide_annotations(ds, 1.5, 1).is_err());
}

fn ann(id: u64, scene: u64, cat: u32, x: f64) -> Annotation {
    Annotation {
        id,
        scene_id: scene,
        category_id: cat,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
        provenance: Provenance::PseudoLabel,
    }
}

#[test]
fn precision_counts_each_truth_once() {
    let truth = vec![ann(1, 1, 1, 0.0), ann(2, 1, 2, 50.0)];
    assert_eq!(label_precision(&[], &truth), None);
    assert_eq!(label_precision(&[ann(9, 1, 1, 1.0)], &truth), Some(1.0));
    assert_eq!(label_precision(&[ann(9, 1, 1, 1.0), ann(10, 1, 1, 0.0)], &truth), Some(0.5));
    assert_eq!(label_precision(&[ann(9, 1, 2, 0.0)], &truth), Some(0.0));
}

#[test]
fn tta_views() {
    let ds = common::shape_world();
    let model = common::trained();
    let scene = ds.split_scenes(Split::Test).next().unwrap();
    let prompts: Vec<_> = ds.categories.iter().map(|c| (c.id, PromptSpec::text(c.name.clone()))).collect();
    let queries = resolve_all(model, &prompts, ds).unwrap();
    let cfg = DetectConfig::default();
    let plain = detect_with_queries(model, scene, ds, &queries, &cfg).unwrap();
    assert_eq!(tta_detect(model, scene, ds, &queries, &TtaConfig::identity(), &cfg).unwrap(), plain);

    let flip = TtaConfig {
        hflip: true,
        ..TtaConfig::identity()
    };
    let pool = tta_candidates(model, scene, ds, &queries, &flip, &cfg).unwrap();
    let flipped: Vec<_> = pool.iter().filter(|d| d.source.transform.is_some()).collect();
    assert_eq!(flipped.len(), plain.len(), "a mirrored scene yields the same objects");
    for d in &flipped {
        let twin = plain.iter().find(|p| p.category_id == d.category_id && p.bbox.max_abs_diff(&d.bbox) < 1e-9);
        assert!(twin.is_some(), "flipped box maps back onto an unflipped one");
    }

    let full = TtaConfig::default();
    assert_eq!(full.combinations().len(), 6);
    let pool = tta_candidates(model, scene, ds, &queries, &full, &cfg).unwrap();
    let tags: BTreeSet<Option<String>> = pool.iter().map(|d| d.source.transform.clone()).collect();
    assert_eq!(tags.len(), 6);
    let merged = tta_detect(model, scene, ds, &queries, &full, &cfg).unwrap();
    assert!(!merged.is_empty() && merged.len() < pool.len());
    assert!(merged.iter().all(|d| d.bbox.within(scene.width, scene.height)));
    assert!(TtaConfig { scales: vec![0.5], ..TtaConfig::default() }.validate().is_err());
}

#[test]
fn short_fsod_run_covers_every_domain() {
    let ds = common::shape_world();
    let cfg = FsodConfig {
        training: TrainingConfig {
            total_steps: 40,
            ..TrainingConfig::default()
        },
        ..FsodConfig::default()
    };
    let out = run_fsod(ds, &cfg).unwrap();
    assert_eq!(out.checkpoints.len(), 8);
    let domains: BTreeSet<String> = ds.domains().into_iter().collect();
    assert_eq!(out.selection.winners.keys().cloned().collect::<BTreeSet<_>>(), domains);
    assert_eq!(out.selection.entries.len(), 24 * domains.len());
    assert_eq!(out.thresholds.keys().cloned().collect::<BTreeSet<_>>(), domains);
    assert!(out.test_map.values().all(|m| (0.0..=1.0).contains(m)));
    for (d, w) in &out.selection.winners {
        let best = out.selection.entries.iter().filter(|e| &e.domain == d).map(|e| e.val_map).fold(f64::MIN, f64::max);
        assert_eq!(w.val_map, best);
    }
    let by_domain: BTreeMap<_, _> = ds.scenes.iter().map(|s| (s.id, s.domain.clone())).collect();
    for det in &out.test_detections {
        let t = out.thresholds[&by_domain[&det.scene_id]].thresholds.get(&det.category_id);
        assert!(t.is_none_or(|t| det.score >= *t));
    }
}
