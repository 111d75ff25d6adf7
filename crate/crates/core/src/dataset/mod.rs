//! Scenes, annotations, splits and the exemplar index.
//!
//! A [`Dataset`] is immutable once built; derived datasets (extra labels,
//! hidden labels) are produced through the `with_*` constructors which
//! re-validate every invariant.

mod coco;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GeomTransform};

pub use coco::{
    export_coco, ingest_coco, ingest_coco_str, load_dataset, read_detections, save_dataset,
    write_detections, DetectionRecord, CONTENT_FILE, ANNOTATION_FILE,
};
pub use synth::{generate_shape_world, DomainPalette, SynthConfig};

pub type CategoryId = u32;
pub type SceneId = u64;
pub type AnnotationId = u64;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    pub bbox: BBox,
    /// `None` for clutter objects outside the category vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<CategoryId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SceneContent {
    Synthetic { objects: Vec<SceneObject> },
    External { reference: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: SceneId,
    pub width: f64,
    pub height: f64,
    pub domain: String,
    /// Categories known to be present. `None` means fully annotated.
    pub known_categories: Option<Vec<CategoryId>>,
    pub content: SceneContent,
}

impl Scene {
    pub fn objects(&self) -> &[SceneObject] {
        match &self.content {
            SceneContent::Synthetic { objects } => objects,
            SceneContent::External { .. } => &[],
        }
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.content, SceneContent::Synthetic { .. })
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// The same scene seen through a scale or flip transform. Tile offsets
    /// are handled by [`Scene::crop`].
    pub fn transformed(&self, t: &GeomTransform) -> Scene {
        let (width, height) = match *t {
            GeomTransform::Scale { factor } => (self.width * factor, self.height * factor),
            _ => (self.width, self.height),
        };
        let content = match &self.content {
            SceneContent::Synthetic { objects } => SceneContent::Synthetic {
                objects: objects
                    .iter()
                    .map(|o| SceneObject {
                        bbox: t.apply(&o.bbox),
                        ..o.clone()
                    })
                    .collect(),
            },
            c => c.clone(),
        };
        Scene {
            width,
            height,
            content,
            ..self.clone()
        }
    }

    /// Crop to `window`; objects are clipped and re-expressed in the window
    /// frame. Objects that do not intersect the window are dropped.
    pub fn crop(&self, window: &BBox) -> Scene {
        let shift = GeomTransform::TileOffset {
            dx: -window.x_min,
            dy: -window.y_min,
        };
        let content = match &self.content {
            SceneContent::Synthetic { objects } => SceneContent::Synthetic {
                objects: objects
                    .iter()
                    .filter_map(|o| {
                        let clipped = o.bbox.intersection(window)?;
                        (clipped.area() > 0.0).then(|| SceneObject {
                            bbox: shift.apply(&clipped),
                            ..o.clone()
                        })
                    })
                    .collect(),
            },
            c => c.clone(),
        };
        Scene {
            width: window.width(),
            height: window.height(),
            content,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    PseudoLabel,
    #[serde(alias = "auto-label")]
    AutoLabelForward,
    AutoLabelBackward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: AnnotationId,
    pub scene_id: SceneId,
    pub category_id: CategoryId,
    pub bbox: BBox,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<SceneId>,
    pub val: Vec<SceneId>,
    pub test: Vec<SceneId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[SceneId] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub scene_id: SceneId,
    pub annotation_id: AnnotationId,
}

/// Vocabulary and noise settings of a synthetic world. Region features are
/// laid out from the shape and color lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub noise: f64,
    pub clutter_dims: usize,
    pub clutter: f64,
    /// Norm of a per-scene offset on the shape and color coordinates, shared
    /// by every region of the scene (a global color cast).
    #[serde(default)]
    pub scene_shift: f64,
    pub seed: u64,
}

/// Anything carrying a category, so partial-annotation filtering works on
/// detections and annotations alike.
pub trait Categorized {
    fn category(&self) -> CategoryId;
}

impl Categorized for Annotation {
    fn category(&self) -> CategoryId {
        self.category_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Restricted<T> {
    pub items: Vec<T>,
    /// Set when the scene had no known-category list and nothing was filtered.
    pub unrestricted: bool,
}

pub fn restrict_to_known_categories<T: Categorized + Clone>(items: &[T], scene: &Scene) -> Restricted<T> {
    match &scene.known_categories {
        None => Restricted {
            items: items.to_vec(),
            unrestricted: true,
        },
        Some(known) => {
            let known: BTreeSet<_> = known.iter().copied().collect();
            Restricted {
                items: items.iter().filter(|d| known.contains(&d.category())).cloned().collect(),
                unrestricted: false,
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub scenes: Vec<Scene>,
    pub annotations: Vec<Annotation>,
    pub splits: Splits,
    pub exemplars: BTreeMap<CategoryId, Vec<ExemplarRef>>,
    pub world: Option<WorldSpec>,
    /// Unrecognised top-level fields from an ingested file.
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    index: Index,
}

#[derive(Debug, Clone, Default)]
struct Index {
    scene_pos: BTreeMap<SceneId, usize>,
    by_scene: BTreeMap<SceneId, Vec<usize>>,
    ann_pos: BTreeMap<AnnotationId, usize>,
    category_pos: BTreeMap<CategoryId, usize>,
}

impl Dataset {
    /// Validates every invariant and builds lookup indexes. When `exemplars`
    /// is `None` the index is derived from ground-truth train annotations.
    pub fn new(
        categories: Vec<Category>,
        scenes: Vec<Scene>,
        annotations: Vec<Annotation>,
        splits: Splits,
        exemplars: Option<BTreeMap<CategoryId, Vec<ExemplarRef>>>,
        world: Option<WorldSpec>,
    ) -> Result<Self> {
        let mut ds = Dataset {
            categories,
            scenes,
            annotations,
            splits,
            exemplars: BTreeMap::new(),
            world,
            metadata: Default::default(),
            index: Index::default(),
        };
        ds.reindex()?;
        ds.exemplars = match exemplars {
            Some(e) => e,
            None => ds.derive_exemplars(),
        };
        ds.validate_exemplars()?;
        Ok(ds)
    }

    fn reindex(&mut self) -> Result<()> {
        let mut idx = Index::default();
        for (i, c) in self.categories.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err(Error::Config(format!("category {} has an empty name", c.id)));
            }
            if idx.category_pos.insert(c.id, i).is_some() {
                return Err(Error::Config(format!("duplicate category id {}", c.id)));
            }
        }
        for (i, s) in self.scenes.iter().enumerate() {
            if idx.scene_pos.insert(s.id, i).is_some() {
                return Err(Error::Config(format!("duplicate scene id {}", s.id)));
            }
            if !(s.width > 0.0 && s.height > 0.0) {
                return Err(Error::Config(format!("scene {} has non-positive size", s.id)));
            }
            if let Some(known) = &s.known_categories {
                if let Some(bad) = known.iter().find(|k| !idx.category_pos.contains_key(k)) {
                    return Err(Error::UnknownId {
                        kind: "category",
                        id: *bad as u64,
                    });
                }
            }
            for o in s.objects() {
                if !o.bbox.is_valid() || !o.bbox.within(s.width, s.height) {
                    return Err(Error::Config(format!("scene {} has an object outside its bounds", s.id)));
                }
            }
        }
        for (i, a) in self.annotations.iter().enumerate() {
            let pos = *idx.scene_pos.get(&a.scene_id).ok_or(Error::UnknownId {
                kind: "image",
                id: a.scene_id,
            })?;
            if !idx.category_pos.contains_key(&a.category_id) {
                return Err(Error::UnknownId {
                    kind: "category",
                    id: a.category_id as u64,
                });
            }
            let s = &self.scenes[pos];
            if !a.bbox.is_valid() || !a.bbox.within(s.width, s.height) {
                return Err(Error::Config(format!(
                    "annotation {} lies outside scene {}",
                    a.id, a.scene_id
                )));
            }
            if idx.ann_pos.insert(a.id, i).is_some() {
                return Err(Error::Config(format!("duplicate annotation id {}", a.id)));
            }
            idx.by_scene.entry(a.scene_id).or_default().push(i);
        }
        let mut seen = BTreeSet::new();
        for id in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if !idx.scene_pos.contains_key(id) {
                return Err(Error::UnknownId { kind: "image", id: *id });
            }
            if !seen.insert(*id) {
                return Err(Error::Config(format!("scene {id} appears in more than one split")));
            }
        }
        if seen.len() != self.scenes.len() {
            return Err(Error::Config("splits do not cover every scene".into()));
        }
        self.index = idx;
        Ok(())
    }

    fn derive_exemplars(&self) -> BTreeMap<CategoryId, Vec<ExemplarRef>> {
        let mut out: BTreeMap<CategoryId, Vec<ExemplarRef>> = BTreeMap::new();
        for &sid in &self.splits.train {
            for a in self.annotations_of(sid) {
                if a.provenance == Provenance::GroundTruth {
                    out.entry(a.category_id).or_default().push(ExemplarRef {
                        scene_id: sid,
                        annotation_id: a.id,
                    });
                }
            }
        }
        for refs in out.values_mut() {
            refs.sort_by_key(|r| r.annotation_id);
        }
        out
    }

    fn validate_exemplars(&self) -> Result<()> {
        for (cat, refs) in &self.exemplars {
            for r in refs {
                let a = self.annotation(r.annotation_id).ok_or(Error::UnknownId {
                    kind: "annotation",
                    id: r.annotation_id,
                })?;
                if a.scene_id != r.scene_id || a.category_id != *cat {
                    return Err(Error::Config(format!(
                        "exemplar entry for annotation {} is inconsistent",
                        r.annotation_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same scenes and splits with a different annotation set. The exemplar
    /// index is re-derived.
    pub fn with_annotations(&self, annotations: Vec<Annotation>) -> Result<Dataset> {
        let mut ds = Dataset::new(
            self.categories.clone(),
            self.scenes.clone(),
            annotations,
            self.splits.clone(),
            None,
            self.world.clone(),
        )?;
        ds.metadata = self.metadata.clone();
        Ok(ds)
    }

    pub fn with_scenes(&self, scenes: Vec<Scene>) -> Result<Dataset> {
        let mut ds = Dataset::new(
            self.categories.clone(),
            scenes,
            self.annotations.clone(),
            self.splits.clone(),
            Some(self.exemplars.clone()),
            self.world.clone(),
        )?;
        ds.metadata = self.metadata.clone();
        Ok(ds)
    }

    pub fn scene(&self, id: SceneId) -> Option<&Scene> {
        self.index.scene_pos.get(&id).map(|&i| &self.scenes[i])
    }

    pub fn annotation(&self, id: AnnotationId) -> Option<&Annotation> {
        self.index.ann_pos.get(&id).map(|&i| &self.annotations[i])
    }

    pub fn category(&self, id: CategoryId) -> Option<&Category> {
        self.index.category_pos.get(&id).map(|&i| &self.categories[i])
    }

    pub fn category_by_name(&self, name: &str) -> Option<&Category> {
        let name = name.trim().to_lowercase();
        self.categories.iter().find(|c| c.name.to_lowercase() == name)
    }

    pub fn annotations_of(&self, scene: SceneId) -> impl Iterator<Item = &Annotation> {
        self.index
            .by_scene
            .get(&scene)
            .into_iter()
            .flatten()
            .map(|&i| &self.annotations[i])
    }

    pub fn split_scenes(&self, split: Split) -> impl Iterator<Item = &Scene> {
        self.splits.get(split).iter().filter_map(|id| self.scene(*id))
    }

    /// Sorted, de-duplicated domain tags.
    pub fn domains(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.scenes.iter().map(|s| s.domain.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Categories that have at least one annotation in scenes of `domain`,
    /// in id order.
    pub fn domain_categories(&self, domain: &str) -> Vec<CategoryId> {
        let set: BTreeSet<CategoryId> = self
            .annotations
            .iter()
            .filter(|a| self.scene(a.scene_id).is_some_and(|s| s.domain == domain))
            .map(|a| a.category_id)
            .collect();
        set.into_iter().collect()
    }

    pub fn exemplars_of(&self, category: CategoryId) -> &[ExemplarRef] {
        self.exemplars.get(&category).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn next_annotation_id(&self) -> AnnotationId {
        self.annotations.iter().map(|a| a.id).max().map_or(1, |m| m + 1)
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.categories == other.categories
            && self.scenes == other.scenes
            && self.annotations == other.annotations
            && self.splits == other.splits
            && self.exemplars == other.exemplars
            && self.world == other.world
            && self.metadata == other.metadata
    }
}
