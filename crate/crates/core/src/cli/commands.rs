use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{load_config, RunConfig};
use super::{Cli, Command, DirectionArg, ModelArgs, OutArgs, ProtocolArg, VisualSourceArg, RESOLVED_CONFIG_FILE};
use crate::dataset::{
    generate_shape_world, load_dataset, save_dataset, write_detections, Dataset, DetectionRecord, Provenance, Scene,
    SceneId, Split, FORMAT_VERSION,
};
use crate::embedding::{load_checkpoint, save_checkpoint, Checkpoint, EncoderBundle};
use crate::engine::{
    autolabel_backward, autolabel_forward, merge_labels, select_subset, AutolabelReport, CommandOracles, DeskOracles,
    LabelingOracles, MergeReport,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    aggregate, evaluate_detections, evaluate_protocol, mean_ap, render_summary, DomainScores, MetricReport, Protocol,
    ProtocolResult, Scored, SummaryRow,
};
use crate::fsod::{run_fsod, tta_detect, FactorAssignment, SelectionEntry, ThresholdMap};
use crate::inference::{deploy, detect_scenes, resolve_all, sort_detections, PromptSpec};
use crate::postproc::{ladder_rows, render_ladder, run_cascade, LadderRow};
use crate::training::{loss_csv, train, LossReport, PromptTable, VisualSource};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Creates the output directory. An existing non-empty directory is only
/// reused with `--force`, and then emptied first.
fn prepare_out(out: &OutArgs, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| Error::Config("no output directory; pass --out or set paths.out".into()))?;
    if dir.exists() {
        let non_empty = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
        if non_empty && !out.force {
            return Err(Error::Config(format!(
                "output directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)
}

fn dataset_path(arg: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset; pass --dataset or set paths.dataset".into()))
}

fn load_model(args: &ModelArgs, cfg: &RunConfig) -> Result<(Checkpoint, Dataset)> {
    let ckpt = args
        .checkpoint
        .clone()
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint; pass --checkpoint or set paths.checkpoint".into()))?;
    let ds = load_dataset(&dataset_path(&args.dataset, cfg)?)?;
    Ok((load_checkpoint(&ckpt)?, ds))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.set)?;
    match &cli.command {
        Command::Synth { seed, out } => synth(cfg, *seed, out),
        Command::Train {
            dataset,
            resume,
            save_every,
            visual_source,
            dry_run,
            out,
        } => train_cmd(&cfg, dataset, resume.as_deref(), *save_every, *visual_source, *dry_run, out),
        Command::Eval {
            model,
            detections,
            protocol,
            split,
            out,
        } => match detections {
            Some(path) => eval_detections(&cfg, &model.dataset, path, (*split).into(), out),
            None => eval_cmd(&cfg, model, *protocol, (*split).into(), out),
        },
        Command::Insdet { model, split, out } => insdet(&cfg, model, (*split).into(), out),
        Command::Fsod { dataset, out } => fsod(&cfg, dataset, out),
        Command::Curate {
            model,
            budget,
            split,
            out,
        } => curate(cfg, model, *budget, (*split).into(), out),
        Command::Autolabel {
            model,
            direction,
            split,
            out,
        } => autolabel(&cfg, model, *direction, (*split).into(), out),
        Command::Detect {
            model,
            prompts,
            split,
            tta,
            out,
        } => detect_cmd(&cfg, model, prompts, (*split).into(), *tta, out),
    }
}

fn synth(mut cfg: RunConfig, seed: Option<u64>, out: &OutArgs) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = generate_shape_world(&cfg.synth, cfg.seed)?;
    let dir = prepare_out(out, &cfg)?;
    save_dataset(&dir, &ds)?;
    write_resolved(&dir, &cfg)?;
    println!(
        "wrote {} scenes, {} annotations, {} categories to {}",
        ds.scenes.len(),
        ds.annotations.len(),
        ds.categories.len(),
        dir.display()
    );
    Ok(())
}

fn loss_file(reports: &[LossReport]) -> String {
    format!("# format_version: {FORMAT_VERSION}\n{}", loss_csv(reports))
}

fn train_cmd(
    cfg: &RunConfig,
    dataset: &Option<PathBuf>,
    resume: Option<&Path>,
    save_every: u64,
    visual_source: VisualSourceArg,
    dry_run: bool,
    out: &OutArgs,
) -> Result<()> {
    let ds = load_dataset(&dataset_path(dataset, cfg)?)?;
    let prompts = PromptTable::from_names(&ds);
    let visual_source = match visual_source {
        VisualSourceArg::InImage => VisualSource::InImage,
        VisualSourceArg::OutImage => VisualSource::OutImage,
    };
    let mut bundle = match resume {
        Some(path) => match load_checkpoint(path)? {
            Checkpoint::Bundle(b) => b,
            Checkpoint::Deployed(_) => {
                return Err(Error::Config(format!(
                    "{} is a deployed model; resuming needs a full bundle checkpoint",
                    path.display()
                )))
            }
        },
        None => EncoderBundle::init(&ds, &cfg.bundle, &prompts.vocabulary(), cfg.seed)?,
    };
    if bundle.config != cfg.bundle {
        return Err(Error::Config("checkpoint bundle settings differ from the config's bundle block".into()));
    }
    if bundle.step > cfg.training.total_steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {} but training.total_steps is {}",
            bundle.step, cfg.training.total_steps
        )));
    }
    if cfg.training.require_signal().is_err() {
        eprintln!("warning: all loss weights are zero; the checkpoint will equal its starting point");
    }
    if dry_run {
        println!(
            "config ok: {} steps from step {} on {} training scenes",
            cfg.training.total_steps,
            bundle.step,
            ds.splits.train.len()
        );
        return Ok(());
    }
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let mut reports = Vec::new();
    // The aborted checkpoint keeps the last state whose update finished.
    let mut last_good = bundle.clone();
    let result = train(&ds, &mut bundle, &cfg.training, &prompts, visual_source, |b, r| {
        reports.push(r.clone());
        last_good.clone_from(b);
        if save_every > 0 && b.step % save_every == 0 && b.step < cfg.training.total_steps {
            save_checkpoint(
                &dir.join(format!("checkpoint-step{:06}.json", b.step)),
                &Checkpoint::Bundle(b.clone()),
            )?;
        }
        Ok(())
    });
    write_text(&dir.join("losses.csv"), &loss_file(&reports))?;
    if let Err(e) = result {
        save_checkpoint(&dir.join("checkpoint.json.aborted"), &Checkpoint::Bundle(last_good))?;
        return Err(e);
    }
    save_checkpoint(&dir.join("deployed.json"), &Checkpoint::Deployed(deploy(&bundle)))?;
    save_checkpoint(&dir.join("checkpoint.json"), &Checkpoint::Bundle(bundle))?;
    println!("trained to step {} in {}", cfg.training.total_steps, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalFile<'a> {
    format_version: u32,
    split: Split,
    report: &'a MetricReport,
    /// Max AP is at least the better protocol mean.
    max_ap_holds: bool,
    protocols: &'a [ProtocolResult],
}

fn eval_cmd(cfg: &RunConfig, model: &ModelArgs, protocol: ProtocolArg, split: Split, out: &OutArgs) -> Result<()> {
    let (model, ds) = load_model(model, cfg)?;
    let protocols: Vec<Protocol> = match protocol {
        ProtocolArg::All => Protocol::ALL.to_vec(),
        ProtocolArg::TextG => vec![Protocol::TextG],
        ProtocolArg::VisualG => vec![Protocol::VisualG],
        ProtocolArg::VisualI => vec![Protocol::VisualI],
    };
    if protocols.contains(&Protocol::VisualG) && ds.exemplars.values().all(Vec::is_empty) {
        return Err(Error::Config(
            "protocol visual-g requires an exemplar index, and the dataset has none".into(),
        ));
    }
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let mut results = Vec::new();
    let mut per_domain: BTreeMap<String, DomainScores> = BTreeMap::new();
    for p in protocols {
        let r = evaluate_protocol(&model, &ds, p, split, &cfg.eval, &cfg.detect)?;
        for (domain, v) in &r.per_domain {
            let e = per_domain.entry(domain.clone()).or_default();
            match p {
                Protocol::TextG => e.text_g = Some(*v),
                Protocol::VisualG => e.visual_g = Some(*v),
                Protocol::VisualI => e.visual_i = Some(*v),
            }
        }
        results.push(r);
    }
    let report = aggregate(per_domain);
    write_json(
        &dir.join("report.json"),
        &EvalFile {
            format_version: FORMAT_VERSION,
            split,
            report: &report,
            max_ap_holds: report.max_ap_holds(),
            protocols: &results,
        },
    )?;
    let table = render_summary(&[SummaryRow {
        model: "checkpoint".into(),
        training_size: format!("{} scenes", ds.splits.train.len()),
        report: report.clone(),
    }]);
    write_text(&dir.join("summary.md"), &table)?;
    print!("{table}");
    println!("max AP inequality: {}", if report.max_ap_holds() { "holds" } else { "VIOLATED" });
    Ok(())
}

#[derive(Serialize)]
struct DetectionEvalFile {
    format_version: u32,
    split: Split,
    per_domain: BTreeMap<String, f64>,
    mean: Option<f64>,
}

fn split_ground_truth(ds: &Dataset, scenes: &[&Scene]) -> Vec<crate::dataset::Annotation> {
    scenes
        .iter()
        .flat_map(|s| ds.annotations_of(s.id))
        .filter(|a| a.provenance == Provenance::GroundTruth)
        .cloned()
        .collect()
}

fn eval_detections(cfg: &RunConfig, dataset: &Option<PathBuf>, path: &Path, split: Split, out: &OutArgs) -> Result<()> {
    let ds = load_dataset(&dataset_path(dataset, cfg)?)?;
    let records = crate::dataset::read_detections(path)?;
    let scored = records
        .iter()
        .map(|r| {
            Ok(Scored {
                scene_id: r.image_id,
                category_id: r.category_id,
                bbox: crate::geometry::BBox::from_xywh(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3])?,
                score: r.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let mut per_domain = BTreeMap::new();
    for domain in ds.domains() {
        let scenes: Vec<&Scene> = ds.split_scenes(split).filter(|s| s.domain == domain).collect();
        let lookup: BTreeMap<SceneId, &Scene> = scenes.iter().map(|s| (s.id, *s)).collect();
        let mine: Vec<Scored> = scored.iter().filter(|d| lookup.contains_key(&d.scene_id)).cloned().collect();
        let scores = evaluate_detections(&mine, &split_ground_truth(&ds, &scenes), &lookup, &cfg.eval);
        if let Some(m) = mean_ap(&scores) {
            per_domain.insert(domain, m);
        }
    }
    let mean = crate::evalkit::protocol_mean(&per_domain);
    for (d, v) in &per_domain {
        println!("{d}: mAP {v:.4}");
    }
    write_json(
        &dir.join("report.json"),
        &DetectionEvalFile {
            format_version: FORMAT_VERSION,
            split,
            per_domain,
            mean,
        },
    )
}

fn text_prompts(ds: &Dataset) -> Vec<(crate::dataset::CategoryId, PromptSpec)> {
    ds.categories.iter().map(|c| (c.id, PromptSpec::text(&c.name))).collect()
}

#[derive(Serialize)]
struct LadderFile<'a> {
    format_version: u32,
    split: Split,
    rows: &'a [LadderRow],
    detections_per_stage: Vec<usize>,
}

fn insdet(cfg: &RunConfig, model: &ModelArgs, split: Split, out: &OutArgs) -> Result<()> {
    let (model, ds) = load_model(model, cfg)?;
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let stages = run_cascade(&model, &ds, split, &text_prompts(&ds), &cfg.cascade, &cfg.eval)?;
    let rows = ladder_rows(&stages);
    let table = render_ladder(&rows);
    write_json(
        &dir.join("ladder.json"),
        &LadderFile {
            format_version: FORMAT_VERSION,
            split,
            rows: &rows,
            detections_per_stage: stages.iter().map(|s| s.detections.len()).collect(),
        },
    )?;
    write_text(&dir.join("ladder.md"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct FsodFile<'a> {
    format_version: u32,
    assignments_per_domain: usize,
    entries: &'a [SelectionEntry],
    winners: &'a BTreeMap<String, SelectionEntry>,
    thresholds: &'a BTreeMap<String, ThresholdMap>,
    test_map: &'a BTreeMap<String, f64>,
    pseudo_labels: usize,
}

fn fsod(cfg: &RunConfig, dataset: &Option<PathBuf>, out: &OutArgs) -> Result<()> {
    let ds = load_dataset(&dataset_path(dataset, cfg)?)?;
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let outcome = run_fsod(&ds, &cfg.fsod)?;
    let grid = FactorAssignment::grid().len();
    println!("factor grid: {grid} assignments per domain");
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    for (factors, bundle) in &outcome.checkpoints {
        save_checkpoint(
            &ckpt_dir.join(format!("{}.json", factors.slug())),
            &Checkpoint::Bundle(bundle.clone()),
        )?;
    }
    let records: Vec<DetectionRecord> = outcome.test_detections.iter().map(|d| d.to_record()).collect();
    write_detections(&dir.join("test_detections.json"), &records)?;
    let pl = ds.with_annotations(ds.annotations.iter().cloned().chain(outcome.pseudo_labels.iter().cloned()).collect())?;
    save_dataset(&dir.join("pseudo_labeled"), &pl)?;
    for (domain, w) in &outcome.selection.winners {
        println!(
            "{domain}: {} (val mAP {:.4}, test mAP {:.4})",
            w.assignment,
            w.val_map,
            outcome.test_map.get(domain).copied().unwrap_or(0.0)
        );
    }
    write_json(
        &dir.join("fsod.json"),
        &FsodFile {
            format_version: FORMAT_VERSION,
            assignments_per_domain: grid,
            entries: &outcome.selection.entries,
            winners: &outcome.selection.winners,
            thresholds: &outcome.thresholds,
            test_map: &outcome.test_map,
            pseudo_labels: outcome.pseudo_labels.len(),
        },
    )
}

#[derive(Serialize)]
struct CurateFile {
    format_version: u32,
    split: Split,
    budget: usize,
    scene_ids: Vec<SceneId>,
}

fn curate(mut cfg: RunConfig, model: &ModelArgs, budget: Option<usize>, split: Split, out: &OutArgs) -> Result<()> {
    if let Some(b) = budget {
        cfg.selection.budget = b;
    }
    let (model, ds) = load_model(model, &cfg)?;
    let scenes: Vec<&Scene> = ds.split_scenes(split).collect();
    cfg.selection.validate(scenes.len())?;
    let dir = prepare_out(out, &cfg)?;
    write_resolved(&dir, &cfg)?;
    let scene_ids = select_subset(&model, &ds, &scenes, &cfg.selection)?;
    println!("selected {} of {} scenes", scene_ids.len(), scenes.len());
    write_json(
        &dir.join("curated.json"),
        &CurateFile {
            format_version: FORMAT_VERSION,
            split,
            budget: cfg.selection.budget,
            scene_ids,
        },
    )
}

#[derive(Serialize)]
struct AutolabelFile<'a> {
    format_version: u32,
    split: Split,
    forward: Option<&'a AutolabelReport>,
    backward: Option<&'a AutolabelReport>,
    merge: &'a MergeReport,
}

fn autolabel(cfg: &RunConfig, model: &ModelArgs, direction: DirectionArg, split: Split, out: &OutArgs) -> Result<()> {
    let (model, ds) = load_model(model, cfg)?;
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let desk;
    let command: CommandOracles;
    let oracles: &dyn LabelingOracles = match &cfg.oracles {
        Some(c) => {
            command = c.clone();
            &command
        }
        None => {
            desk = DeskOracles::new(&model, &ds, cfg.autolabel.detect.proposals.clone());
            &desk
        }
    };
    let scenes: Vec<&Scene> = ds.split_scenes(split).collect();
    let forward = match direction {
        DirectionArg::Forward | DirectionArg::Both => {
            Some(autolabel_forward(&model, &ds, &scenes, oracles, &cfg.autolabel)?)
        }
        DirectionArg::Backward => None,
    };
    let backward = match direction {
        DirectionArg::Backward | DirectionArg::Both => {
            Some(autolabel_backward(&ds, &scenes, oracles, &cfg.autolabel.filters)?)
        }
        DirectionArg::Forward => None,
    };
    let empty = Vec::new();
    let f = forward.as_ref().map_or(&empty, |r| &r.annotations);
    let b = backward.as_ref().map_or(&empty, |r| &r.annotations);
    let (merged, merge) = merge_labels(&ds, &[f, b])?;
    for r in forward.iter().chain(backward.iter()) {
        for fail in &r.failures {
            eprintln!("warning: scene {}: {}", fail.scene_id, fail.message);
        }
    }
    println!("added {} labels ({} duplicates dropped)", merge.added, merge.duplicates_dropped);
    save_dataset(&dir.join("dataset"), &merged)?;
    write_json(
        &dir.join("autolabel.json"),
        &AutolabelFile {
            format_version: FORMAT_VERSION,
            split,
            forward: forward.as_ref(),
            backward: backward.as_ref(),
            merge: &merge,
        },
    )
}

fn detect_cmd(
    cfg: &RunConfig,
    model: &ModelArgs,
    prompts: &[String],
    split: Split,
    tta: bool,
    out: &OutArgs,
) -> Result<()> {
    let (model, ds) = load_model(model, cfg)?;
    let specs = if prompts.is_empty() {
        text_prompts(&ds)
    } else {
        prompts
            .iter()
            .map(|p| {
                let c = ds
                    .category_by_name(p)
                    .ok_or_else(|| Error::Config(format!("prompt {p:?} names no category of the dataset")))?;
                Ok((c.id, PromptSpec::text(p)))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let dir = prepare_out(out, cfg)?;
    write_resolved(&dir, cfg)?;
    let queries = resolve_all(&model, &specs, &ds)?;
    let scenes: Vec<&Scene> = ds.split_scenes(split).collect();
    let mut dets = if tta {
        use rayon::prelude::*;
        let per_scene = scenes
            .par_iter()
            .map(|s| tta_detect(&model, s, &ds, &queries, &cfg.fsod.tta, &cfg.detect))
            .collect::<Result<Vec<_>>>()?;
        per_scene.into_iter().flatten().collect()
    } else {
        detect_scenes(&model, &scenes, &ds, &queries, &cfg.detect)?
    };
    sort_detections(&mut dets);
    let records: Vec<DetectionRecord> = dets.iter().map(|d| d.to_record()).collect();
    write_detections(&dir.join("detections.json"), &records)?;
    println!("{} detections on {} scenes", records.len(), scenes.len());
    Ok(())
}
