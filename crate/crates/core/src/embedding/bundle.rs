use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Embedding, EncoderParams, ParamGrads, RegionFeaturizer, RegionView, Tokenizer};
use crate::dataset::{Dataset, Scene, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::inference::DeployedModel;
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderRole {
    PretrainedText,
    ContrastiveText,
    ContrastiveVisual,
}

impl EncoderRole {
    pub const ALL: [EncoderRole; 3] = [
        EncoderRole::PretrainedText,
        EncoderRole::ContrastiveText,
        EncoderRole::ContrastiveVisual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderRole::PretrainedText => "pretrained-text",
            EncoderRole::ContrastiveText => "contrastive-text",
            EncoderRole::ContrastiveVisual => "contrastive-visual",
        }
    }

    fn seed_role(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BundleConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Hashed band width for out-of-vocabulary words.
    pub overflow: usize,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            dim: 32,
            hidden: 64,
            overflow: 8,
            warmup_steps: 300,
            warmup_lr: 2.0,
        }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(self.warmup_lr.is_finite() && self.warmup_lr >= 0.0) {
            return Err(Error::Config("warmup_lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Read-only access to the encoders used at inference time. Implemented by
/// both the full training bundle and the deployed model, so inference code
/// cannot reach the frozen teacher.
pub trait PromptEncoders: Sync {
    fn contrastive_text(&self) -> &EncoderParams;
    fn contrastive_visual(&self) -> &EncoderParams;
    fn tokenizer(&self) -> &Tokenizer;
    fn featurizer(&self) -> &RegionFeaturizer;

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        self.contrastive_text().encode(&self.tokenizer().featurize_text(prompt)?)
    }

    fn encode_region(&self, scene: &Scene, b: &BBox, view: RegionView) -> Result<Embedding> {
        self.contrastive_visual().encode(&self.featurizer().featurize_region(scene, b, view)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBundle {
    pub config: BundleConfig,
    pub tokenizer: Tokenizer,
    pub featurizer: RegionFeaturizer,
    pub pretrained_text: EncoderParams,
    pub contrastive_text: EncoderParams,
    pub contrastive_visual: EncoderParams,
    /// Training steps applied so far.
    pub step: u64,
    /// Hash of whatever configuration produced this bundle.
    pub config_hash: String,
}

impl PromptEncoders for EncoderBundle {
    fn contrastive_text(&self) -> &EncoderParams {
        &self.contrastive_text
    }
    fn contrastive_visual(&self) -> &EncoderParams {
        &self.contrastive_visual
    }
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
    fn featurizer(&self) -> &RegionFeaturizer {
        &self.featurizer
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

impl EncoderBundle {
    /// Fresh encoders for `ds`. The pretrained text encoder is warmed up on
    /// category names and descriptions, then frozen.
    pub fn init(ds: &Dataset, config: &BundleConfig, extra_vocab: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        let world = ds
            .world
            .clone()
            .ok_or_else(|| Error::Config("region featurization needs a dataset with a world spec".into()))?;
        let tokenizer = Tokenizer::from_dataset(ds, extra_vocab, config.overflow);
        let featurizer = RegionFeaturizer::new(world);
        let text_in = tokenizer.dim();
        let mk = |role: EncoderRole, input: usize| {
            EncoderParams::init(input, config.hidden, config.dim, seed, role.seed_role())
        };
        let mut pretrained_text = mk(EncoderRole::PretrainedText, text_in);
        let contrastive_text = mk(EncoderRole::ContrastiveText, text_in);
        let contrastive_visual = mk(EncoderRole::ContrastiveVisual, featurizer.dim());

        let mut texts: Vec<&str> = Vec::new();
        for c in &ds.categories {
            texts.push(&c.name);
            if let Some(d) = &c.description {
                texts.push(d);
            }
        }
        warm_up(&mut pretrained_text, &tokenizer, &texts, config, seed)?;
        pretrained_text.frozen = true;

        let config_hash = hash_json(&(config, &tokenizer, &featurizer, seed));
        Ok(EncoderBundle {
            config: config.clone(),
            tokenizer,
            featurizer,
            pretrained_text,
            contrastive_text,
            contrastive_visual,
            step: 0,
            config_hash,
        })
    }

    pub fn encoder(&self, role: EncoderRole) -> &EncoderParams {
        match role {
            EncoderRole::PretrainedText => &self.pretrained_text,
            EncoderRole::ContrastiveText => &self.contrastive_text,
            EncoderRole::ContrastiveVisual => &self.contrastive_visual,
        }
    }

    pub fn encoder_mut(&mut self, role: EncoderRole) -> &mut EncoderParams {
        match role {
            EncoderRole::PretrainedText => &mut self.pretrained_text,
            EncoderRole::ContrastiveText => &mut self.contrastive_text,
            EncoderRole::ContrastiveVisual => &mut self.contrastive_visual,
        }
    }

    pub fn encode_pretrained_text(&self, prompt: &str) -> Result<Embedding> {
        self.pretrained_text.encode(&self.tokenizer.featurize_text(prompt)?)
    }

    pub fn validate(&self) -> Result<()> {
        let frozen = EncoderRole::ALL.iter().filter(|r| self.encoder(**r).frozen).count();
        if frozen != 1 || !self.pretrained_text.frozen {
            return Err(Error::Config("bundle must have exactly one frozen encoder, the pretrained text one".into()));
        }
        for r in EncoderRole::ALL {
            let e = self.encoder(r);
            if e.output_dim != self.config.dim {
                return Err(Error::Shape {
                    expected: self.config.dim,
                    actual: e.output_dim,
                });
            }
        }
        Ok(())
    }
}

/// Fits the text encoder to random word-sum targets by full-batch gradient
/// descent on mean `1 - cos`.
fn warm_up(params: &mut EncoderParams, tok: &Tokenizer, texts: &[&str], cfg: &BundleConfig, seed: u64) -> Result<()> {
    if texts.is_empty() || cfg.warmup_steps == 0 {
        return Ok(());
    }
    let mut rng = seed::rng(&[tag::WARMUP, seed]);
    let word_vectors: Vec<Vec<f64>> = (0..tok.dim())
        .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut inputs = Vec::with_capacity(texts.len());
    let mut targets = Vec::with_capacity(texts.len());
    for t in texts {
        let x = tok.featurize_text(t)?;
        let mut target = vec![0.0; cfg.dim];
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                target.iter_mut().zip(&word_vectors[i]).for_each(|(a, w)| *a += xi * w);
            }
        }
        targets.push(Embedding::normalize(target)?);
        inputs.push(x);
    }
    let n = inputs.len() as f64;
    for _ in 0..cfg.warmup_steps {
        let mut grads = ParamGrads::zeros_like(params);
        for (x, t) in inputs.iter().zip(&targets) {
            let cache = params.forward(x)?;
            let g: Vec<f64> = t.values().iter().map(|v| -v / n).collect();
            params.backward(&cache, &g, &mut grads);
        }
        params.sgd_step(&grads, cfg.warmup_lr);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Checkpoint {
    Bundle(EncoderBundle),
    Deployed(DeployedModel),
}

impl Checkpoint {
    fn encoders(&self) -> &dyn PromptEncoders {
        match self {
            Checkpoint::Bundle(b) => b,
            Checkpoint::Deployed(d) => d,
        }
    }
}

impl PromptEncoders for Checkpoint {
    fn contrastive_text(&self) -> &EncoderParams {
        self.encoders().contrastive_text()
    }
    fn contrastive_visual(&self) -> &EncoderParams {
        self.encoders().contrastive_visual()
    }
    fn tokenizer(&self) -> &Tokenizer {
        self.encoders().tokenizer()
    }
    fn featurizer(&self) -> &RegionFeaturizer {
        self.encoders().featurizer()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    model: Checkpoint,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(&CheckpointFile {
        format_version: FORMAT_VERSION,
        model: ckpt.clone(),
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    Ok(file.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_shape_world, SynthConfig};
    use crate::embedding::cosine;

    fn bundle() -> (Dataset, EncoderBundle) {
        let ds = generate_shape_world(&SynthConfig { scenes: 4, ..Default::default() }, 1).unwrap();
        let b = EncoderBundle::init(&ds, &BundleConfig::default(), &[], 1).unwrap();
        (ds, b)
    }

    #[test]
    fn exactly_one_frozen_encoder() {
        let (_, b) = bundle();
        b.validate().unwrap();
        assert!(b.pretrained_text.frozen);
        assert!(!b.contrastive_text.frozen && !b.contrastive_visual.frozen);
    }

    #[test]
    fn warm_up_makes_teacher_compositional() {
        let (_, b) = bundle();
        let e = |s: &str| b.encode_pretrained_text(s).unwrap();
        // shared words pull names together
        let shared = cosine(&e("red square"), &e("red circle"));
        let disjoint = cosine(&e("red square"), &e("yellow star"));
        assert!(shared > disjoint + 0.2, "{shared} vs {disjoint}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (_, b) = bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &Checkpoint::Bundle(b.clone())).unwrap();
        match load_checkpoint(&path).unwrap() {
            Checkpoint::Bundle(back) => assert_eq!(back, b),
            other => panic!("unexpected {other:?}"),
        }
    }
}
