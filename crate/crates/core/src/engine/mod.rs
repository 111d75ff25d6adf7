//! Data engine: uncertainty and diversity driven subset selection, and
//! caption-first and region-first auto-labeling with pluggable oracles.

mod autolabel;
mod oracles;
mod select;

pub use autolabel::{
    autolabel_backward, autolabel_forward, merge_labels, AutolabelConfig, AutolabelReport, DropCounts,
    LabelFilterConfig, MergeReport, SceneFailure, DUPLICATE_IOU,
};
pub use oracles::{parse_box_list, split_phrases, CommandOracles, DeskOracles, LabelingOracles, OracleCommand};
pub use select::{
    greedy_select, pair_similarity, scene_features, select_subset, uncertainty_of, EmbeddingSource, SceneFeatures,
    SelectionConfig, UncertaintyMode,
};
