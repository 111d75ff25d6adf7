//! Few-shot adaptation tooling: prompt augmentation, visual prompt
//! sourcing, pseudo-labeling, test-time augmentation, per-category
//! threshold search and factor-grid checkpoint selection.

mod pipeline;
mod prompts;
mod pseudo;
mod selection;
mod thresholds;
mod tta;

pub use pipeline::{run_fsod, FsodConfig, FsodOutcome, ParaphraserChoice};
pub use prompts::{
    augment_prompts, build_visual_prompts, format_term_line, negative_pool, parse_term_line, AugmentConfig,
    CommandParaphraser, IdentityParaphraser, Paraphraser, SynonymParaphraser, VisualPrompts, PARAPHRASE_PREAMBLE,
};
pub use pseudo::{hide_annotations, label_precision, pseudo_label, PseudoLabelConfig};
pub use selection::{
    domain_val_map, ground_truth, inference_queries, scenes_map, select_checkpoint, AnnotationFactor, Candidate,
    FactorAssignment, InferenceFactor, SelectionEntry, SelectionReport, TextFactor, TrainingFactors,
};
pub use thresholds::{category_ap, search_thresholds, ThresholdMap, ThresholdSearch};
pub use tta::{tta_candidates, tta_detect, TtaConfig};
