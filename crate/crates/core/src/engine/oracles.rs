use std::collections::BTreeSet;
use std::io::Write as _;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene};
use crate::embedding::{cosine, tokens, PromptEncoders, RegionView};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::inference::{propose_regions, ProposalConfig};

/// The external models the auto-labeler consults. Every method must be
/// deterministic for fixed inputs.
pub trait LabelingOracles: Sync {
    fn caption(&self, scene: &Scene) -> Result<String>;
    fn extract_phrases(&self, caption: &str) -> Result<Vec<String>>;
    fn is_physical(&self, phrase: &str) -> Result<bool>;
    fn propose(&self, scene: &Scene) -> Result<Vec<BBox>>;
    fn region_caption(&self, scene: &Scene, b: &BBox) -> Result<String>;
    /// Agreement between a region and a caption, in `[0, 1]`.
    fn alignment(&self, scene: &Scene, b: &BBox, caption: &str) -> Result<f64>;
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Splits a caption on commas and "and", dropping leading articles.
/// Repeated phrases are kept so callers can count instances.
pub fn split_phrases(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .replace(" and ", ",")
        .split(',')
        .map(|p| {
            tokens(p)
                .into_iter()
                .skip_while(|w| ARTICLES.contains(&w.as_str()))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .filter(|p| !p.is_empty())
        .collect()
}

fn join_caption(phrases: &[String]) -> String {
    let items: Vec<String> = phrases.iter().map(|p| format!("a {p}")).collect();
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

/// Oracles backed by the synthetic scene content and the model's own
/// encoders.
pub struct DeskOracles<'a, M> {
    pub model: &'a M,
    pub dataset: &'a Dataset,
    /// Nouns that name physical things.
    pub physical_nouns: BTreeSet<String>,
    pub proposals: ProposalConfig,
}

impl<'a, M: PromptEncoders> DeskOracles<'a, M> {
    /// Physical nouns are the shapes of the world the model was built for.
    pub fn new(model: &'a M, dataset: &'a Dataset, proposals: ProposalConfig) -> Self {
        let physical_nouns = model.featurizer().world.shapes.iter().cloned().collect();
        DeskOracles {
            model,
            dataset,
            physical_nouns,
            proposals,
        }
    }
}

impl<M: PromptEncoders> LabelingOracles for DeskOracles<'_, M> {
    fn caption(&self, scene: &Scene) -> Result<String> {
        let phrases: Vec<String> = scene
            .objects()
            .iter()
            .map(|o| format!("{} {}", o.color, o.shape))
            .collect();
        Ok(join_caption(&phrases))
    }

    fn extract_phrases(&self, caption: &str) -> Result<Vec<String>> {
        Ok(split_phrases(caption))
    }

    fn is_physical(&self, phrase: &str) -> Result<bool> {
        Ok(tokens(phrase).last().is_some_and(|w| self.physical_nouns.contains(w)))
    }

    fn propose(&self, scene: &Scene) -> Result<Vec<BBox>> {
        Ok(propose_regions(scene, self.dataset, &self.proposals))
    }

    fn region_caption(&self, scene: &Scene, b: &BBox) -> Result<String> {
        let featurizer = self.model.featurizer();
        Ok(match featurizer.dominant_object(scene, b) {
            Some((i, _)) => {
                let o = &scene.objects()[i];
                format!("{} {}", o.color, o.shape)
            }
            None => "background".to_string(),
        })
    }

    fn alignment(&self, scene: &Scene, b: &BBox, caption: &str) -> Result<f64> {
        let region = self.model.encode_region(scene, b, RegionView::Proposal)?;
        let text = self.model.encode_text(caption)?;
        Ok(cosine(&region, &text).clamp(0.0, 1.0))
    }
}

/// One external program per oracle: request lines on stdin, a single
/// response line on stdout, exit status 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl OracleCommand {
    pub fn call(&self, request: &str) -> Result<String> {
        let fail = |message: String| Error::Oracle {
            oracle: self.program.clone(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(format!("{request}\n").as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exit status {}", out.status)));
        }
        let text = String::from_utf8(out.stdout).map_err(|e| fail(e.to_string()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let line = lines.next().ok_or_else(|| fail("empty response".into()))?;
        if lines.next().is_some() {
            return Err(fail("expected a single response line".into()));
        }
        Ok(line.trim().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandOracles {
    pub captioner: OracleCommand,
    pub phrase_extractor: OracleCommand,
    pub physical_filter: OracleCommand,
    pub proposer: OracleCommand,
    pub region_captioner: OracleCommand,
    pub alignment_scorer: OracleCommand,
}

fn box_field(b: &BBox) -> String {
    let [x, y, w, h] = b.to_xywh();
    format!("{x},{y},{w},{h}")
}

/// Parses `x,y,w,h;x,y,w,h;...`; an empty line is no boxes.
pub fn parse_box_list(line: &str) -> Result<Vec<BBox>> {
    let bad = |m: String| Error::Oracle {
        oracle: "proposer".into(),
        message: m,
    };
    line.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let v: Vec<f64> = item
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("{item:?}: {e}")))?;
            match v[..] {
                [x, y, w, h] => BBox::from_xywh(x, y, w, h),
                _ => Err(bad(format!("{item:?}: expected x,y,w,h"))),
            }
        })
        .collect()
}

impl LabelingOracles for CommandOracles {
    fn caption(&self, scene: &Scene) -> Result<String> {
        self.captioner.call(&serde_json::to_string(scene)?)
    }

    fn extract_phrases(&self, caption: &str) -> Result<Vec<String>> {
        let line = self.phrase_extractor.call(caption)?;
        Ok(line
            .split('\t')
            .map(|p| p.trim().to_lowercase())
            .filter(|p| !p.is_empty())
            .collect())
    }

    fn is_physical(&self, phrase: &str) -> Result<bool> {
        match self.physical_filter.call(phrase)?.as_str() {
            "keep" => Ok(true),
            "drop" => Ok(false),
            other => Err(Error::Oracle {
                oracle: self.physical_filter.program.clone(),
                message: format!("expected keep or drop, got {other:?}"),
            }),
        }
    }

    fn propose(&self, scene: &Scene) -> Result<Vec<BBox>> {
        parse_box_list(&self.proposer.call(&serde_json::to_string(scene)?)?)
    }

    fn region_caption(&self, scene: &Scene, b: &BBox) -> Result<String> {
        self.region_captioner
            .call(&format!("{}\n{}", serde_json::to_string(scene)?, box_field(b)))
    }

    fn alignment(&self, scene: &Scene, b: &BBox, caption: &str) -> Result<f64> {
        let line = self
            .alignment_scorer
            .call(&format!("{}\n{}\n{}", serde_json::to_string(scene)?, box_field(b), caption))?;
        let v: f64 = line.parse().map_err(|_| Error::Oracle {
            oracle: self.alignment_scorer.program.clone(),
            message: format!("expected a decimal score, got {line:?}"),
        })?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Oracle {
                oracle: self.alignment_scorer.program.clone(),
                message: format!("score {v} outside [0, 1]"),
            });
        }
        Ok(v)
    }
}
