//! Inference cascade: tiled detection, prototype category refinement,
//! background filtering, batched NMS and box refinement, evaluated stage by
//! stage into an ablation ladder.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, Dataset, Provenance, Scene, SceneId, Split};
use crate::embedding::{average_embeddings, cosine, dot, Embedding, PromptEncoders, RegionView};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_detections, mean_ap, EvalConfig, Scored};
use crate::geometry::{self, iou, BBox, GeomTransform};
use crate::inference::{
    detect_with_queries, finalize, resolve_all, sort_detections, DetectConfig, Detection, PromptSpec, Query,
    RegionLabels,
};
use crate::seed::{self, tag};

/// Oracle-snap replaces a box only when it already overlaps a ground-truth
/// box this much.
pub const SNAP_MIN_IOU: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    /// Fraction of a tile added on each side, in `[0, 0.5]`.
    pub overlap: f64,
}

impl Default for TileGrid {
    fn default() -> Self {
        TileGrid {
            rows: 2,
            cols: 2,
            overlap: 0.25,
        }
    }
}

impl TileGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("tile grid needs at least one row and column".into()));
        }
        if !(0.0..=0.5).contains(&self.overlap) {
            return Err(Error::Config(format!("tile overlap must be in [0, 0.5], got {}", self.overlap)));
        }
        Ok(())
    }

    /// Tile windows in row-major order, clipped to the scene.
    pub fn windows(&self, width: f64, height: f64, min_tile: f64) -> Result<Vec<BBox>> {
        self.validate()?;
        let tw = width / self.cols as f64;
        let th = height / self.rows as f64;
        if tw < min_tile || th < min_tile {
            return Err(Error::Config(format!(
                "tiles of {tw:.1}x{th:.1} are smaller than the minimum region size {min_tile}"
            )));
        }
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (px, py) = (self.overlap * tw, self.overlap * th);
                out.push(BBox {
                    x_min: (c as f64 * tw - px).max(0.0),
                    y_min: (r as f64 * th - py).max(0.0),
                    x_max: ((c + 1) as f64 * tw + px).min(width),
                    y_max: ((r + 1) as f64 * th + py).min(height),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoxRefiner {
    Identity,
    #[default]
    OracleSnap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    /// Training crops, split evenly between background and objects.
    pub samples: usize,
    pub threshold: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            samples: 200,
            threshold: 0.5,
            learning_rate: 1.0,
            l2: 1e-4,
            max_iters: 5000,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub refine_and_tile: bool,
    pub background_filter: bool,
    pub batched_nms: bool,
    pub box_refinement: bool,
    pub tiles: TileGrid,
    /// Smallest allowed tile side, in scene units.
    pub min_tile_size: f64,
    /// IoU above which tile and full-frame detections are treated as the
    /// same box when merging.
    pub tile_merge_iou: f64,
    /// Exemplars averaged into each category prototype.
    pub prototype_exemplars: usize,
    pub background: BackgroundConfig,
    pub nms_iou: f64,
    pub refiner: BoxRefiner,
    /// Fraction of base detections relabeled to a random other category.
    /// A fixture knob for exercising the refinement stage.
    pub label_noise: f64,
    pub seed: u64,
    pub detect: DetectConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            refine_and_tile: true,
            background_filter: true,
            batched_nms: true,
            box_refinement: true,
            tiles: TileGrid::default(),
            min_tile_size: 16.0,
            tile_merge_iou: 0.95,
            prototype_exemplars: 8,
            background: BackgroundConfig::default(),
            nms_iou: 0.5,
            refiner: BoxRefiner::OracleSnap,
            label_noise: 0.0,
            seed: 0,
            detect: DetectConfig {
                labels: RegionLabels::Best,
                nms_iou: None,
                ..DetectConfig::default()
            },
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.tiles.validate()?;
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("tile_merge_iou", self.tile_merge_iou)?;
        unit("nms_iou", self.nms_iou)?;
        unit("background.threshold", self.background.threshold)?;
        unit("label_noise", self.label_noise)?;
        unit("detect.score_threshold", self.detect.score_threshold)?;
        if !(self.min_tile_size > 0.0) {
            return Err(Error::Config("min_tile_size must be positive".into()));
        }
        if self.prototype_exemplars == 0 {
            return Err(Error::Config("prototype_exemplars must be positive".into()));
        }
        if self.background.samples < 2 || self.background.max_iters == 0 || !(self.background.learning_rate > 0.0) {
            return Err(Error::Config(
                "background classifier needs >= 2 samples, iterations and a positive rate".into(),
            ));
        }
        Ok(())
    }
}

fn touches_inner_edge(b: &BBox, window: &BBox, scene: &Scene) -> bool {
    let eps = 1e-9 * scene.width.max(scene.height);
    (window.x_min > eps && b.x_min <= eps)
        || (window.y_min > eps && b.y_min <= eps)
        || (window.x_max < scene.width - eps && b.x_max >= window.width() - eps)
        || (window.y_max < scene.height - eps && b.y_max >= window.height() - eps)
}

/// Detects on the full frame and on each tile, maps tile boxes back to the
/// scene frame and merges with batched NMS at `merge_iou`. Tile boxes cut by
/// an interior tile edge are dropped; the full-frame pass covers those
/// objects.
#[allow(clippy::too_many_arguments)]
pub fn tiled_detect(
    model: &impl PromptEncoders,
    scene: &Scene,
    ds: &Dataset,
    queries: &[(CategoryId, Query)],
    grid: &TileGrid,
    min_tile: f64,
    merge_iou: f64,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let windows = grid.windows(scene.width, scene.height, min_tile)?;
    let mut all = detect_with_queries(model, scene, ds, queries, cfg)?;
    for w in windows {
        let shift = GeomTransform::TileOffset {
            dx: -w.x_min,
            dy: -w.y_min,
        };
        let tile = scene.crop(&w);
        for mut d in detect_with_queries(model, &tile, ds, queries, cfg)? {
            if touches_inner_edge(&d.bbox, &w, scene) {
                continue;
            }
            d.bbox = shift.inverse(&d.bbox).clip(scene.width, scene.height);
            d.source.transform = Some(shift.id());
            all.push(d);
        }
    }
    Ok(batched_nms(all, merge_iou))
}

/// NMS within each (scene, category); boxes of different categories never
/// suppress each other. Output is sorted like [`sort_detections`].
pub fn batched_nms(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut by_scene: BTreeMap<SceneId, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_scene.entry(d.scene_id).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, group) in by_scene {
        out.extend(finalize(group, f64::NEG_INFINITY, Some(iou_threshold)));
    }
    sort_detections(&mut out);
    out
}

/// One prototype per category: the average of its first `n` exemplar crop
/// embeddings. Categories without exemplars get no prototype.
pub fn build_prototypes(
    model: &impl PromptEncoders,
    ds: &Dataset,
    categories: &[CategoryId],
    n: usize,
) -> Result<BTreeMap<CategoryId, Embedding>> {
    let mut out = BTreeMap::new();
    for &cat in categories {
        if ds.exemplars_of(cat).is_empty() {
            continue;
        }
        let spec = PromptSpec::from_exemplar_index(ds, cat, n)?;
        let items = spec
            .exemplars
            .iter()
            .map(|e| {
                let scene = ds.scene(e.scene_id).ok_or(Error::UnknownId {
                    kind: "image",
                    id: e.scene_id,
                })?;
                model.encode_region(scene, &e.bbox, RegionView::Prompt)
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(cat, average_embeddings(&items)?);
    }
    Ok(out)
}

fn crop_embedding(model: &impl PromptEncoders, ds: &Dataset, d: &Detection) -> Result<Embedding> {
    let scene = ds.scene(d.scene_id).ok_or(Error::UnknownId {
        kind: "image",
        id: d.scene_id,
    })?;
    model.encode_region(scene, &d.bbox, RegionView::Proposal)
}

/// Nearest prototype by cosine; ties go to the lower category id.
pub fn nearest_prototype(e: &Embedding, prototypes: &BTreeMap<CategoryId, Embedding>) -> Option<(CategoryId, f64)> {
    let mut best: Option<(CategoryId, f64)> = None;
    for (cat, p) in prototypes {
        let c = cosine(e, p);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((*cat, c));
        }
    }
    best
}

/// Reassigns each detection to its nearest prototype and rescores it with
/// that similarity. The first pre-refinement category is kept in the
/// detection source.
pub fn refine_categories(
    dets: Vec<Detection>,
    prototypes: &BTreeMap<CategoryId, Embedding>,
    model: &impl PromptEncoders,
    ds: &Dataset,
) -> Result<Vec<Detection>> {
    if prototypes.is_empty() {
        return Err(Error::Missing("category refinement needs at least one prototype".into()));
    }
    let mut out = dets
        .into_par_iter()
        .map(|mut d| {
            let e = crop_embedding(model, ds, &d)?;
            let (cat, c) = nearest_prototype(&e, prototypes).expect("non-empty prototypes");
            d.source.original_category = d.source.original_category.or(Some(d.category_id));
            d.category_id = cat;
            d.score = (c + 1.0) / 2.0;
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_detections(&mut out);
    Ok(out)
}

/// Logistic model over crop embeddings giving the probability that a crop
/// is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

const PROB_CLAMP: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl BackgroundClassifier {
    /// Always strictly inside `(0, 1)`.
    pub fn probability(&self, e: &Embedding) -> f64 {
        sigmoid(dot(&self.weights, e.values()) + self.bias).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    pub fn is_background(&self, e: &Embedding) -> bool {
        self.probability(e) > self.threshold
    }
}

/// Full-batch gradient descent on L2-regularized log loss, from zero, until
/// the loss improves by less than 1e-8 or `max_iters` is reached.
pub fn train_background_classifier(
    backgrounds: &[Embedding],
    objects: &[Embedding],
    cfg: &BackgroundConfig,
) -> Result<BackgroundClassifier> {
    if backgrounds.is_empty() || objects.is_empty() {
        return Err(Error::Missing(
            "background classifier needs both background and object crops".into(),
        ));
    }
    let dim = backgrounds[0].dim();
    if let Some(e) = backgrounds.iter().chain(objects).find(|e| e.dim() != dim) {
        return Err(Error::Shape {
            expected: dim,
            actual: e.dim(),
        });
    }
    let samples: Vec<(&Embedding, f64)> = backgrounds
        .iter()
        .map(|e| (e, 1.0))
        .chain(objects.iter().map(|e| (e, 0.0)))
        .collect();
    let n = samples.len() as f64;
    let mut clf = BackgroundClassifier {
        weights: vec![0.0; dim],
        bias: 0.0,
        threshold: cfg.threshold,
    };
    let loss_of = |clf: &BackgroundClassifier| -> f64 {
        let data: f64 = samples
            .iter()
            .map(|(e, y)| {
                let p = clf.probability(e);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        data + 0.5 * cfg.l2 * dot(&clf.weights, &clf.weights)
    };
    let mut prev = loss_of(&clf);
    for _ in 0..cfg.max_iters {
        let mut gw: Vec<f64> = clf.weights.iter().map(|w| cfg.l2 * w).collect();
        let mut gb = 0.0;
        for (e, y) in &samples {
            let r = (sigmoid(dot(&clf.weights, e.values()) + clf.bias) - y) / n;
            gw.iter_mut().zip(e.values()).for_each(|(g, x)| *g += r * x);
            gb += r;
        }
        clf.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= cfg.learning_rate * g);
        clf.bias -= cfg.learning_rate * gb;
        let loss = loss_of(&clf);
        if (prev - loss).abs() < 1e-8 {
            break;
        }
        prev = loss;
    }
    Ok(clf)
}

const BACKGROUND_ATTEMPTS: usize = 50;

/// Content boxes of a scene: its objects when synthetic, else its
/// ground-truth annotations.
fn content_boxes(scene: &Scene, ds: &Dataset) -> Vec<BBox> {
    if scene.is_synthetic() {
        scene.objects().iter().map(|o| o.bbox).collect()
    } else {
        ds.annotations_of(scene.id).map(|a| a.bbox).collect()
    }
}

/// A random box between 10% and 30% of the scene side that touches no
/// content.
pub fn sample_background_box(scene: &Scene, content: &[BBox], rng: &mut impl Rng) -> Option<BBox> {
    for _ in 0..BACKGROUND_ATTEMPTS {
        let w = rng.random_range(0.1..=0.3) * scene.width;
        let h = rng.random_range(0.1..=0.3) * scene.height;
        let x = rng.random_range(0.0..=scene.width - w);
        let y = rng.random_range(0.0..=scene.height - h);
        let b = BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        };
        if content.iter().all(|c| b.intersection(c).is_none_or(|i| i.area() <= 0.0)) {
            return Some(b);
        }
    }
    None
}

/// Background-only and ground-truth object crop embeddings from `split`,
/// `samples / 2` of each.
pub fn background_training_crops(
    model: &impl PromptEncoders,
    ds: &Dataset,
    split: Split,
    samples: usize,
    seed: u64,
) -> Result<(Vec<Embedding>, Vec<Embedding>)> {
    let mut rng = seed::rng(&[tag::CLASSIFIER, seed]);
    let scenes: Vec<&Scene> = ds.split_scenes(split).collect();
    let gts: Vec<_> = scenes
        .iter()
        .flat_map(|s| ds.annotations_of(s.id))
        .filter(|a| a.provenance == Provenance::GroundTruth)
        .collect();
    if scenes.is_empty() || gts.is_empty() {
        return Err(Error::Missing(format!("no annotated {split:?} scenes for background training")));
    }
    let half = samples / 2;
    let mut objects = Vec::with_capacity(half);
    for _ in 0..half {
        let a = gts[rng.random_range(0..gts.len())];
        let scene = ds.scene(a.scene_id).expect("annotation scene exists");
        objects.push(model.encode_region(scene, &a.bbox, RegionView::Proposal)?);
    }
    let mut backgrounds = Vec::with_capacity(half);
    let mut misses = 0;
    while backgrounds.len() < half {
        let scene = scenes[rng.random_range(0..scenes.len())];
        match sample_background_box(scene, &content_boxes(scene, ds), &mut rng) {
            Some(b) => backgrounds.push(model.encode_region(scene, &b, RegionView::Proposal)?),
            None => {
                misses += 1;
                if misses > 100 * samples.max(1) {
                    return Err(Error::Missing("scenes too crowded to sample background crops".into()));
                }
            }
        }
    }
    Ok((backgrounds, objects))
}

/// Drops detections the classifier calls background.
pub fn filter_background(
    dets: Vec<Detection>,
    clf: &BackgroundClassifier,
    model: &impl PromptEncoders,
    ds: &Dataset,
) -> Result<Vec<Detection>> {
    let keep = dets
        .par_iter()
        .map(|d| Ok(!clf.is_background(&crop_embedding(model, ds, d)?)))
        .collect::<Result<Vec<bool>>>()?;
    Ok(dets.into_iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d).collect())
}

/// Identity, or snap each box to the ground-truth box it overlaps most when
/// that IoU is at least [`SNAP_MIN_IOU`].
pub fn refine_boxes(dets: Vec<Detection>, refiner: BoxRefiner, ds: &Dataset) -> Result<Vec<Detection>> {
    match refiner {
        BoxRefiner::Identity => Ok(dets),
        BoxRefiner::OracleSnap => {
            if !ds.annotations.iter().any(|a| a.provenance == Provenance::GroundTruth) {
                return Err(Error::Missing("oracle-snap refinement needs ground-truth boxes".into()));
            }
            let mut gt: BTreeMap<SceneId, Vec<BBox>> = BTreeMap::new();
            for a in ds.annotations.iter().filter(|a| a.provenance == Provenance::GroundTruth) {
                gt.entry(a.scene_id).or_default().push(a.bbox);
            }
            Ok(dets
                .into_iter()
                .map(|mut d| {
                    let mut best: Option<(BBox, f64)> = None;
                    for g in gt.get(&d.scene_id).into_iter().flatten() {
                        let v = iou(&d.bbox, g);
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((*g, v));
                        }
                    }
                    if let Some((g, v)) = best {
                        if v >= SNAP_MIN_IOU {
                            d.bbox = g;
                        }
                    }
                    d
                })
                .collect())
        }
    }
}

/// Relabels about `rate` of the detections to a different random category
/// among `categories`, deterministically per scene.
pub fn inject_label_noise(mut dets: Vec<Detection>, categories: &[CategoryId], rate: f64, seed: u64) -> Vec<Detection> {
    if rate <= 0.0 || categories.len() < 2 {
        return dets;
    }
    let mut current: Option<(SceneId, rand_chacha::ChaCha8Rng)> = None;
    for d in dets.iter_mut() {
        if current.as_ref().is_none_or(|(s, _)| *s != d.scene_id) {
            current = Some((d.scene_id, seed::rng(&[tag::FIXTURE, seed, d.scene_id])));
        }
        let rng = &mut current.as_mut().expect("set above").1;
        if rng.random::<f64>() < rate {
            let others: Vec<CategoryId> = categories.iter().copied().filter(|c| *c != d.category_id).collect();
            d.category_id = others[rng.random_range(0..others.len())];
        }
    }
    sort_detections(&mut dets);
    dets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    RefineAndTile,
    BackgroundFilter,
    BatchedNms,
    BoxRefinement,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [
        Stage::Base,
        Stage::RefineAndTile,
        Stage::BackgroundFilter,
        Stage::BatchedNms,
        Stage::BoxRefinement,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Base => "Base detector",
            Stage::RefineAndTile => "+ Category refinement and tiling",
            Stage::BackgroundFilter => "+ Background filter",
            Stage::BatchedNms => "+ Batched NMS",
            Stage::BoxRefinement => "+ Box refinement",
        }
    }

    fn enabled(self, cfg: &CascadeConfig) -> bool {
        match self {
            Stage::Base => true,
            Stage::RefineAndTile => cfg.refine_and_tile,
            Stage::BackgroundFilter => cfg.background_filter,
            Stage::BatchedNms => cfg.batched_nms,
            Stage::BoxRefinement => cfg.box_refinement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage: Stage,
    pub ap: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub method: String,
    pub ap: f64,
    /// AP change from the previous row; `None` on the first row.
    pub gain: Option<f64>,
}

pub fn ladder_rows(stages: &[StageOutput]) -> Vec<LadderRow> {
    stages
        .iter()
        .enumerate()
        .map(|(i, s)| LadderRow {
            method: s.stage.label().to_string(),
            ap: s.ap,
            gain: (i > 0).then(|| s.ap - stages[i - 1].ap),
        })
        .collect()
}

/// Markdown table with columns Method / AP / Gain; AP values are fractions
/// rendered as percentages with one decimal.
pub fn render_ladder(rows: &[LadderRow]) -> String {
    let mut out = String::from("| Method | AP | Gain |\n| --- | --- | --- |\n");
    for r in rows {
        let gain = match r.gain {
            None => "-".to_string(),
            Some(g) => format!("{:+.1}", 100.0 * g),
        };
        let _ = writeln!(out, "| {} | {:.1} | {} |", r.method, 100.0 * r.ap, gain);
    }
    out
}

/// Mean over categories with ground truth of AP averaged over the IoU grid.
pub fn split_ap(ds: &Dataset, split: Split, dets: &[Detection], eval: &EvalConfig) -> f64 {
    let scenes: BTreeMap<SceneId, &Scene> = ds.split_scenes(split).map(|s| (s.id, s)).collect();
    let gts: Vec<_> = ds
        .annotations
        .iter()
        .filter(|a| a.provenance == Provenance::GroundTruth && scenes.contains_key(&a.scene_id))
        .cloned()
        .collect();
    let scored: Vec<Scored> = dets.iter().map(Scored::from).collect();
    mean_ap(&evaluate_detections(&scored, &gts, &scenes, eval)).unwrap_or(0.0)
}

/// Runs the enabled stages in their fixed order over `split`, evaluating
/// after each one. Disabled stages are skipped without a ladder row.
pub fn run_cascade(
    model: &impl PromptEncoders,
    ds: &Dataset,
    split: Split,
    prompts: &[(CategoryId, PromptSpec)],
    cfg: &CascadeConfig,
    eval: &EvalConfig,
) -> Result<Vec<StageOutput>> {
    cfg.validate()?;
    eval.validate()?;
    let queries = resolve_all(model, prompts, ds)?;
    let categories: Vec<CategoryId> = queries.iter().map(|(c, _)| *c).collect();
    let scenes: Vec<&Scene> = ds.split_scenes(split).collect();

    let per_scene = scenes
        .par_iter()
        .map(|s| detect_with_queries(model, s, ds, &queries, &cfg.detect))
        .collect::<Result<Vec<_>>>()?;
    let base = inject_label_noise(per_scene.into_iter().flatten().collect(), &categories, cfg.label_noise, cfg.seed);

    let mut out = vec![StageOutput {
        stage: Stage::Base,
        ap: split_ap(ds, split, &base, eval),
        detections: base,
    }];
    for stage in Stage::ORDER.into_iter().skip(1).filter(|s| s.enabled(cfg)) {
        let prev = out.last().expect("base stage").detections.clone();
        let dets = match stage {
            Stage::Base => unreachable!("base runs first"),
            Stage::RefineAndTile => {
                let tiled = scenes
                    .par_iter()
                    .map(|s| {
                        tiled_detect(model, s, ds, &queries, &cfg.tiles, cfg.min_tile_size, cfg.tile_merge_iou, &cfg.detect)
                    })
                    .collect::<Result<Vec<_>>>()?;
                // Tiling adds boxes; the base detections keep their (noisy)
                // labels until refinement below.
                let mut pool = prev;
                pool.extend(
                    tiled
                        .into_iter()
                        .flatten()
                        .filter(|d| d.source.transform.is_some()),
                );
                let pool = batched_nms_agnostic(pool, cfg.tile_merge_iou);
                let prototypes = build_prototypes(model, ds, &categories, cfg.prototype_exemplars)?;
                refine_categories(pool, &prototypes, model, ds)?
            }
            Stage::BackgroundFilter => {
                let (bg, obj) =
                    background_training_crops(model, ds, Split::Train, cfg.background.samples, cfg.background.seed)?;
                let clf = train_background_classifier(&bg, &obj, &cfg.background)?;
                filter_background(prev, &clf, model, ds)?
            }
            Stage::BatchedNms => batched_nms(prev, cfg.nms_iou),
            Stage::BoxRefinement => refine_boxes(prev, cfg.refiner, ds)?,
        };
        out.push(StageOutput {
            stage,
            ap: split_ap(ds, split, &dets, eval),
            detections: dets,
        });
    }
    Ok(out)
}

/// Class-agnostic NMS per scene, used to merge near-identical boxes before
/// they are relabeled.
fn batched_nms_agnostic(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut by_scene: BTreeMap<SceneId, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_scene.entry(d.scene_id).or_default().push(d);
    }
    let mut out = Vec::new();
    for (_, group) in by_scene {
        let boxes: Vec<BBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        let keep = geometry::nms(&boxes, &scores, iou_threshold);
        let mut slots: Vec<Option<Detection>> = group.into_iter().map(Some).collect();
        out.extend(keep.into_iter().map(|i| slots[i].take().expect("kept once")));
    }
    sort_detections(&mut out);
    out
}
