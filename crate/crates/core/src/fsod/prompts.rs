use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::process::{Command, Stdio};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::{Category, CategoryId, Dataset, Provenance, SceneId, Split};
use crate::embedding::tokens;
use crate::error::{Error, Result};
use crate::inference::ExemplarBox;
use crate::seed::{self, tag};
use crate::training::{PromptTable, VisualSource};

/// System preamble sent ahead of the term list to an external paraphraser.
pub const PARAPHRASE_PREAMBLE: &str = "You are an assistant specialized in generating concise noun-phrase definitions by paraphrasing. You will be given a list of terms in the format [term] = [definition]. For each term, return a corresponding line in the format [term] = [paraphrased definition].
Your paraphrased definitions must:
  1. Be concise and written as noun phrases.
  2. Preserve the original meaning and context.
  3. Clearly distinguish each term from the others.
  4. Follow the same line-by-line format as the input.
Do not add or omit any terms.";

/// Splits a `term = definition` line.
pub fn parse_term_line(line: &str) -> Result<(String, String)> {
    let bad = || Error::ParaphraseFormat { line: line.to_string() };
    let (term, def) = line.split_once(" = ").ok_or_else(bad)?;
    let (term, def) = (term.trim(), def.trim());
    if term.is_empty() || def.is_empty() {
        return Err(bad());
    }
    Ok((term.to_string(), def.to_string()))
}

pub fn format_term_line(term: &str, definition: &str) -> String {
    format!("{term} = {definition}")
}

/// Rewrites `term = definition` lines into `term = paraphrase` lines, one
/// output per input in the same order.
pub trait Paraphraser {
    fn paraphrase(&self, lines: &[String]) -> Result<Vec<String>>;
}

/// Returns every definition unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityParaphraser;

impl Paraphraser for IdentityParaphraser {
    fn paraphrase(&self, lines: &[String]) -> Result<Vec<String>> {
        lines.iter().map(|l| parse_term_line(l).map(|_| l.clone())).collect()
    }
}

/// Word-level synonym substitution. Each word with table entries is
/// replaced by one of its synonyms, drawn from a per-line seeded stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymParaphraser {
    pub table: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

impl SynonymParaphraser {
    pub fn new(table: BTreeMap<String, Vec<String>>, seed: u64) -> Self {
        SynonymParaphraser { table, seed }
    }

    /// Synonyms for the default shape-world vocabulary.
    pub fn shape_world(seed: u64) -> Self {
        let pairs: &[(&str, &[&str])] = &[
            ("red", &["crimson", "scarlet"]),
            ("blue", &["azure", "cobalt"]),
            ("green", &["emerald", "jade"]),
            ("yellow", &["golden", "lemon"]),
            ("purple", &["violet", "plum"]),
            ("orange", &["amber", "tangerine"]),
            ("square", &["box"]),
            ("circle", &["disc", "ring"]),
            ("triangle", &["wedge"]),
            ("star", &["starburst"]),
            ("hexagon", &["hex"]),
            ("diamond", &["rhombus", "lozenge"]),
            ("colored", &["tinted", "painted"]),
            ("shape", &["figure", "form"]),
        ];
        let table = pairs
            .iter()
            .map(|(w, syn)| (w.to_string(), syn.iter().map(|s| s.to_string()).collect()))
            .collect();
        SynonymParaphraser { table, seed }
    }

    fn rewrite(&self, definition: &str, line: usize) -> String {
        let mut rng = seed::rng(&[tag::PARAPHRASE, self.seed, line as u64]);
        tokens(definition)
            .into_iter()
            .map(|w| match self.table.get(&w).and_then(|s| s.choose(&mut rng)) {
                Some(s) => s.clone(),
                None => w,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Paraphraser for SynonymParaphraser {
    fn paraphrase(&self, lines: &[String]) -> Result<Vec<String>> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (term, def) = parse_term_line(l)?;
                Ok(format_term_line(&term, &self.rewrite(&def, i)))
            })
            .collect()
    }
}

/// Runs a program that reads the preamble, a blank line and the term lines
/// on stdin and prints one paraphrased line per term on stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandParaphraser {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

impl Paraphraser for CommandParaphraser {
    fn paraphrase(&self, lines: &[String]) -> Result<Vec<String>> {
        let fail = |message: String| Error::Command {
            program: self.program.clone(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let mut input = format!("{PARAPHRASE_PREAMBLE}\n\n");
        for l in lines {
            input.push_str(l);
            input.push('\n');
        }
        child
            .stdin
            .take()
            .expect("stdin piped")
            .write_all(input.as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8(out.stdout).map_err(|e| fail(e.to_string()))?;
        Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Negative prompts per category.
    pub negatives_per_category: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            negatives_per_category: 2,
            seed: 0,
        }
    }
}

const NEGATIVE_MATERIALS: [&str; 6] = ["wooden", "metal", "glass", "paper", "stone", "woolen"];
const NEGATIVE_OBJECTS: [&str; 8] = ["chair", "bottle", "lamp", "key", "cup", "book", "shoe", "clock"];

/// Candidate negative phrases sharing no word with any category name or
/// description.
pub fn negative_pool(categories: &[Category]) -> Vec<String> {
    let used: BTreeSet<String> = categories
        .iter()
        .flat_map(|c| tokens(&c.name).into_iter().chain(c.description.iter().flat_map(|d| tokens(d))))
        .collect();
    let mut pool = Vec::new();
    for m in NEGATIVE_MATERIALS {
        for o in NEGATIVE_OBJECTS {
            if !used.contains(m) && !used.contains(o) {
                pool.push(format!("{m} {o}"));
            }
        }
    }
    pool
}

fn normalized(text: &str) -> String {
    tokens(text).join(" ")
}

/// Category names plus one paraphrase of each description (or name), and a
/// sampled set of negative prompts. A paraphrase that reads as another
/// category's name is an ambiguity error.
pub fn augment_prompts(
    categories: &[Category],
    paraphraser: &dyn Paraphraser,
    cfg: &AugmentConfig,
) -> Result<PromptTable> {
    let lines: Vec<String> = categories
        .iter()
        .map(|c| format_term_line(&c.name, c.description.as_deref().unwrap_or(&c.name)))
        .collect();
    let out = paraphraser.paraphrase(&lines)?;
    if out.len() != lines.len() {
        let line = out
            .get(lines.len())
            .cloned()
            .unwrap_or_else(|| format!("<{} lines for {} terms>", out.len(), lines.len()));
        return Err(Error::ParaphraseFormat { line });
    }
    let names: BTreeMap<String, CategoryId> = categories.iter().map(|c| (normalized(&c.name), c.id)).collect();
    let mut table = PromptTable::default();
    for (c, line) in categories.iter().zip(&out) {
        let (term, para) = parse_term_line(line)?;
        if normalized(&term) != normalized(&c.name) {
            return Err(Error::ParaphraseFormat { line: line.clone() });
        }
        if let Some(other) = names.get(&normalized(&para)) {
            if *other != c.id {
                return Err(Error::Ambiguity {
                    category: c.id,
                    paraphrase: para,
                });
            }
        }
        let mut texts = vec![c.name.clone()];
        let description = c.description.as_deref().map(normalized);
        if normalized(&para) != normalized(&c.name) && Some(normalized(&para)) != description {
            texts.push(para);
        }
        table.prompts.insert(c.id, texts);
    }
    let pool = negative_pool(categories);
    let n = (cfg.negatives_per_category * categories.len()).min(pool.len());
    let mut rng = seed::rng(&[tag::NEGATIVE, cfg.seed]);
    let mut negatives: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
    negatives.sort();
    table.negatives = negatives;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompts {
    pub exemplars: Vec<ExemplarBox>,
    /// Out-image was requested but only the query scene has the category.
    pub fell_back: bool,
}

/// Ground-truth boxes of `category` in train scenes, used as visual prompts
/// for `query_scene`. In-image keeps boxes from the query scene only;
/// out-image keeps boxes from every other scene and falls back to in-image
/// when there are none. At most `n` boxes, in a seeded order.
pub fn build_visual_prompts(
    ds: &Dataset,
    source: VisualSource,
    category: CategoryId,
    query_scene: SceneId,
    n: usize,
    seed: u64,
) -> Result<VisualPrompts> {
    let train: BTreeSet<SceneId> = ds.splits.get(Split::Train).iter().copied().collect();
    let boxes: Vec<ExemplarBox> = ds
        .annotations
        .iter()
        .filter(|a| a.category_id == category && a.provenance == Provenance::GroundTruth && train.contains(&a.scene_id))
        .map(|a| ExemplarBox {
            scene_id: a.scene_id,
            bbox: a.bbox,
        })
        .collect();
    if boxes.is_empty() {
        return Err(Error::Exemplars {
            category,
            requested: n,
            available: 0,
        });
    }
    let in_image = || -> Vec<ExemplarBox> {
        let mut v: Vec<ExemplarBox> = ds
            .annotations_of(query_scene)
            .filter(|a| a.category_id == category)
            .map(|a| ExemplarBox {
                scene_id: a.scene_id,
                bbox: a.bbox,
            })
            .collect();
        v.truncate(n);
        v
    };
    let (mut chosen, fell_back) = match source {
        VisualSource::InImage => (in_image(), false),
        VisualSource::OutImage => {
            let others: Vec<ExemplarBox> = boxes.into_iter().filter(|b| b.scene_id != query_scene).collect();
            if others.is_empty() {
                (in_image(), true)
            } else {
                (others, false)
            }
        }
    };
    let mut rng = seed::rng(&[tag::EXEMPLAR, seed, category as u64, query_scene]);
    chosen.shuffle(&mut rng);
    chosen.truncate(n);
    Ok(VisualPrompts {
        exemplars: chosen,
        fell_back,
    })
}
