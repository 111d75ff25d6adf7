use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::dataset::{SynthConfig, FORMAT_VERSION};
use crate::embedding::BundleConfig;
use crate::engine::{AutolabelConfig, CommandOracles, SelectionConfig};
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::fsod::FsodConfig;
use crate::inference::DetectConfig;
use crate::postproc::CascadeConfig;
use crate::training::TrainingConfig;

/// Paths given in a config file are relative to that file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Every tunable of every command. All defaults live in the module config
/// types; the resolved dump written next to each output lists them all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub bundle: BundleConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
    pub cascade: CascadeConfig,
    pub fsod: FsodConfig,
    pub selection: SelectionConfig,
    pub autolabel: AutolabelConfig,
    /// External oracle programs; the built-in desk oracles are used when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracles: Option<CommandOracles>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            seed: 7,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            bundle: BundleConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            detect: DetectConfig::default(),
            cascade: CascadeConfig::default(),
            fsod: FsodConfig::default(),
            selection: SelectionConfig::default(),
            autolabel: AutolabelConfig::default(),
            oracles: None,
        }
    }
}

impl RunConfig {
    /// Checks that do not depend on the command being run.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.synth.validate()?;
        self.bundle.validate()?;
        self.training.validate()?;
        self.eval.validate()?;
        self.cascade.validate()?;
        self.fsod.validate()?;
        self.autolabel.filters.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parses one `--set` value as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

/// Applies `a.b.c=value` to a TOML tree, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed --set key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

/// Loads the config file (if any), applies overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    let file_paths: Option<PathsConfig> = match table.get("paths") {
        Some(v) => Some(
            v.clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("paths: {}", e.message())))?,
        ),
        None => None,
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    // Only paths that came from the file are rebased onto its directory.
    if let (Some(p), Some(fp)) = (path, file_paths) {
        let base = p.parent().unwrap_or(Path::new(""));
        let mut rebased = fp.clone();
        rebase(base, &mut rebased.dataset);
        rebase(base, &mut rebased.checkpoint);
        rebase(base, &mut rebased.out);
        if cfg.paths.dataset == fp.dataset {
            cfg.paths.dataset = rebased.dataset;
        }
        if cfg.paths.checkpoint == fp.checkpoint {
            cfg.paths.checkpoint = rebased.checkpoint;
        }
        if cfg.paths.out == fp.out {
            cfg.paths.out = rebased.out;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = load_config(None, &["training.total_steps=20".into(), "seed=3".into()]).unwrap();
        assert_eq!(cfg.training.total_steps, 20);
        assert_eq!(cfg.seed, 3);
        assert!(load_config(None, &["training.bogus=1".into()]).is_err());
        assert!(load_config(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn string_values_need_no_quotes() {
        let cfg = load_config(None, &["selection.uncertainty=margin".into()]).unwrap();
        assert_eq!(cfg.selection.uncertainty, crate::engine::UncertaintyMode::Margin);
    }
}
