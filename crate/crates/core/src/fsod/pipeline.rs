use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prompts::{augment_prompts, AugmentConfig, CommandParaphraser, IdentityParaphraser, Paraphraser, SynonymParaphraser};
use super::pseudo::{pseudo_label, PseudoLabelConfig};
use super::selection::{
    inference_queries, scenes_map, select_checkpoint, AnnotationFactor, Candidate, FactorAssignment, SelectionReport,
    TextFactor, TrainingFactors,
};
use super::thresholds::{search_thresholds, ThresholdMap, ThresholdSearch};
use super::tta::{tta_detect, TtaConfig};
use crate::dataset::{Annotation, Dataset, Scene, SceneId, Split};
use crate::embedding::{BundleConfig, EncoderBundle, PromptEncoders};
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::inference::{DetectConfig, Detection};
use crate::training::{train, PromptTable, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParaphraserChoice {
    Identity,
    #[default]
    Synonyms,
    Command(CommandParaphraser),
}

impl ParaphraserChoice {
    pub fn build(&self, seed: u64) -> Box<dyn Paraphraser> {
        match self {
            ParaphraserChoice::Identity => Box::new(IdentityParaphraser),
            ParaphraserChoice::Synonyms => Box::new(SynonymParaphraser::shape_world(seed)),
            ParaphraserChoice::Command(c) => Box::new(c.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsodConfig {
    pub paraphraser: ParaphraserChoice,
    pub augment: AugmentConfig,
    pub pseudo: PseudoLabelConfig,
    pub bundle: BundleConfig,
    pub training: TrainingConfig,
    pub tta: TtaConfig,
    pub thresholds: ThresholdSearch,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
    pub seed: u64,
}

impl FsodConfig {
    pub fn validate(&self) -> Result<()> {
        self.pseudo.validate()?;
        self.bundle.validate()?;
        self.training.validate()?;
        self.tta.validate()?;
        self.thresholds.validate()?;
        self.eval.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsodOutcome {
    pub checkpoints: Vec<(TrainingFactors, EncoderBundle)>,
    pub pseudo_labels: Vec<Annotation>,
    pub selection: SelectionReport,
    pub thresholds: BTreeMap<String, ThresholdMap>,
    pub test_detections: Vec<Detection>,
    /// Test mAP per domain over all domain categories.
    pub test_map: BTreeMap<String, f64>,
}

fn train_variant(
    ds: &Dataset,
    prompts: &PromptTable,
    factors: TrainingFactors,
    cfg: &FsodConfig,
) -> Result<EncoderBundle> {
    let mut bundle = EncoderBundle::init(ds, &cfg.bundle, &prompts.vocabulary(), cfg.seed)?;
    train(ds, &mut bundle, &cfg.training, prompts, factors.visual_prompt, |_, _| Ok(()))?;
    Ok(bundle)
}

fn tta_scenes(
    model: &impl PromptEncoders,
    ds: &Dataset,
    scenes: &[&Scene],
    queries: &[(crate::dataset::CategoryId, crate::inference::Query)],
    cfg: &FsodConfig,
) -> Result<Vec<Detection>> {
    let per_scene = scenes
        .par_iter()
        .map(|s| tta_detect(model, s, ds, queries, &cfg.tta, &cfg.detect))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Trains one checkpoint per training-factor combination, selects the best
/// (checkpoint, assignment) per domain on val, searches per-category
/// thresholds on val and runs TTA inference on test over all categories.
pub fn run_fsod(ds: &Dataset, cfg: &FsodConfig) -> Result<FsodOutcome> {
    cfg.validate()?;
    let original = PromptTable::from_names(ds);
    let augmented = augment_prompts(&ds.categories, cfg.paraphraser.build(cfg.seed).as_ref(), &cfg.augment)?;
    let table = |t: TextFactor| match t {
        TextFactor::Original => &original,
        TextFactor::Augmented => &augmented,
    };

    let bootstrap_factors = TrainingFactors {
        text_prompt: TextFactor::Original,
        visual_prompt: crate::training::VisualSource::OutImage,
        annotations: AnnotationFactor::Original,
    };
    let bootstrap = train_variant(ds, &original, bootstrap_factors, cfg)?;
    let pseudo_labels = pseudo_label(&bootstrap, ds, &cfg.pseudo, &cfg.detect)?;
    let with_pseudo = ds.with_annotations(ds.annotations.iter().cloned().chain(pseudo_labels.iter().cloned()).collect())?;

    let mut checkpoints = Vec::new();
    for factors in TrainingFactors::grid() {
        let bundle = if factors == bootstrap_factors {
            bootstrap.clone()
        } else {
            let data = match factors.annotations {
                AnnotationFactor::Original => ds,
                AnnotationFactor::PseudoLabeled => &with_pseudo,
            };
            train_variant(data, table(factors.text_prompt), factors, cfg)?
        };
        checkpoints.push((factors, bundle));
    }

    let candidates: Vec<Candidate<'_, EncoderBundle>> = FactorAssignment::grid()
        .into_iter()
        .map(|a| {
            let (_, model) = checkpoints
                .iter()
                .find(|(f, _)| *f == a.training())
                .expect("every training combination has a checkpoint");
            Candidate {
                checkpoint: a.training().slug(),
                assignment: a,
                model,
            }
        })
        .collect();
    let selection = select_checkpoint(&candidates, ds, Split::Val, &cfg.eval, &cfg.detect)?;

    let mut thresholds = BTreeMap::new();
    let mut test_detections = Vec::new();
    let mut test_map = BTreeMap::new();
    for (domain, winner) in &selection.winners {
        let (_, model) = checkpoints
            .iter()
            .find(|(f, _)| *f == winner.assignment.training())
            .ok_or_else(|| Error::Missing(format!("no checkpoint for {}", winner.assignment)))?;
        let categories = ds.domain_categories(domain);
        let queries = inference_queries(model, ds, &categories, winner.assignment.inference, cfg.eval.visual_exemplars)?;

        let val: Vec<&Scene> = ds.split_scenes(Split::Val).filter(|s| &s.domain == domain).collect();
        let val_dets = tta_scenes(model, ds, &val, &queries, cfg)?;
        let lookup: BTreeMap<SceneId, &Scene> = val.iter().map(|s| (s.id, *s)).collect();
        let restricted = EvalConfig {
            restrict_known: true,
            ..cfg.eval.clone()
        };
        let map = search_thresholds(
            &val_dets,
            &super::selection::ground_truth(ds, &val),
            &lookup,
            &categories,
            &restricted,
            &cfg.thresholds,
        )?;

        let test: Vec<&Scene> = ds.split_scenes(Split::Test).filter(|s| &s.domain == domain).collect();
        let dets = map.apply(tta_scenes(model, ds, &test, &queries, cfg)?);
        let unrestricted = EvalConfig {
            restrict_known: false,
            ..cfg.eval.clone()
        };
        test_map.insert(domain.clone(), scenes_map(ds, &test, &dets, &unrestricted));
        test_detections.extend(dets);
        thresholds.insert(domain.clone(), map);
    }
    crate::inference::sort_detections(&mut test_detections);

    Ok(FsodOutcome {
        checkpoints,
        pseudo_labels,
        selection,
        thresholds,
        test_detections,
        test_map,
    })
}
