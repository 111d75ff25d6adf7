//! Pinned fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;
pub mod oracles;

use std::sync::OnceLock;

use promptdet::dataset::{generate_shape_world, Dataset, DomainPalette, SynthConfig};
use promptdet::embedding::{BundleConfig, EncoderBundle};
use promptdet::inference::{ProposalConfig, ProposalMode};
use promptdet::postproc::CascadeConfig;
use promptdet::training::{train, PromptTable, TrainingConfig, VisualSource};

pub const WORLD_SEED: u64 = 7;

pub fn shape_world() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate_shape_world(&SynthConfig::default(), WORLD_SEED).expect("default world"))
}

pub fn untrained(ds: &Dataset) -> EncoderBundle {
    EncoderBundle::init(ds, &BundleConfig::default(), &[], WORLD_SEED).expect("bundle init")
}

pub fn train_bundle(ds: &Dataset, cfg: &TrainingConfig) -> EncoderBundle {
    let mut b = untrained(ds);
    train(ds, &mut b, cfg, &PromptTable::from_names(ds), VisualSource::OutImage, |_, _| Ok(())).expect("training");
    b
}

/// The default world trained with the default configuration.
pub fn trained() -> &'static EncoderBundle {
    static B: OnceLock<EncoderBundle> = OnceLock::new();
    B.get_or_init(|| train_bundle(shape_world(), &TrainingConfig::default()))
}

/// One domain of instances among unannotated distractors.
pub fn insdet_world() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = SynthConfig {
            scenes: 120,
            domains: vec![DomainPalette::new(
                "insdet",
                &["square", "circle", "triangle", "star"],
                &["red", "blue", "green"],
            )],
            distractors: Some(DomainPalette::new("clutter", &["pentagon", "cross"], &["gray", "white"])),
            max_distractors: 3,
            ..SynthConfig::default()
        };
        generate_shape_world(&cfg, WORLD_SEED).expect("insdet world")
    })
}

pub fn insdet_model() -> &'static EncoderBundle {
    static B: OnceLock<EncoderBundle> = OnceLock::new();
    B.get_or_init(|| train_bundle(insdet_world(), &TrainingConfig::default()))
}

pub fn insdet_cascade() -> CascadeConfig {
    let mut cfg = CascadeConfig {
        label_noise: 0.3,
        seed: 3,
        ..CascadeConfig::default()
    };
    cfg.detect.proposals = ProposalConfig {
        mode: ProposalMode::Oracle,
        copies: 3,
        jitter: 0.1,
        ..ProposalConfig::default()
    };
    cfg
}
